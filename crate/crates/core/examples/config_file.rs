//! Parses a run configuration, applies overrides and prints the resolved
//! file that reproduces the run.

use fbsde_walk::config::RunConfig;

const TEXT: &str = "\
# noisy training with the speed penalty
noise_scale = 1
constraint = true
v_min = 1.0
iterations = 2000
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = RunConfig::parse(TEXT)?;
    config.apply_override("hidden=8")?;
    let p = config.lipm()?;
    println!("omega^2 = {:.4}, footstep {:.2} s, nominal velocity {:.4}", p.omega_sq(), p.step_duration(), p.nominal_velocity());
    print!("{}", config.to_text());
    match RunConfig::parse("learning_rat = 0.1") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
