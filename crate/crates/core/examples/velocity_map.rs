//! Start-versus-end velocity map of one footstep and its contraction ratio.
//!
//! ```text
//! cargo run --release --example velocity_map -- CHECKPOINT [noise_scale]
//! ```

use fbsde_walk::cost::CostSpec;
use fbsde_walk::lipm::LipmParams;
use fbsde_walk::net::NetParams;
use fbsde_walk::train::{eval_velocity_map, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next().unwrap_or_else(|| "out/train_policy/policy.fbsd".into());
    let mut p = LipmParams::default();
    p.noise_scale = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.0);
    let spec = CostSpec::walking_default(&p);
    let params = NetParams::load(checkpoint.as_ref())?;

    let map = eval_velocity_map(&params, 64, &TrainConfig::for_model(&p), &p, &spec, 1)?;
    println!("nominal velocity {:.4}", map.v_nominal);
    for pair in map.pairs.iter().take(8) {
        println!(
            "  start ({:.3}, {:.3})  end ({:.3}, {:.3})",
            pair.v_start[0], pair.v_start[1], pair.v_end[0], pair.v_end[1]
        );
    }
    println!("rho {:.4} (x {:.4}, y {:.4})", map.rho(), map.rho_axis(0), map.rho_axis(1));
    map.write_csv(&mut std::io::stdout().lock())?;
    Ok(())
}
