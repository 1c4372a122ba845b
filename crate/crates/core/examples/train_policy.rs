//! Trains a walking policy and reports its velocity-map contraction.
//!
//! ```text
//! cargo run --release --example train_policy -- [iterations] [noise_scale] [out_dir]
//! ```

use std::path::PathBuf;

use fbsde_walk::cost::CostSpec;
use fbsde_walk::lipm::LipmParams;
use fbsde_walk::train::{eval_velocity_map, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let noise_scale: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.0);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train_policy".into()));

    let mut p = LipmParams::default();
    p.noise_scale = noise_scale;
    let spec = CostSpec::walking_default(&p);
    let config = TrainConfig {
        iterations,
        noiseless: noise_scale == 0.0,
        ..TrainConfig::for_model(&p)
    };
    let outcome = train(&config, &p, &spec, Some(&out))?;
    let map = eval_velocity_map(&outcome.params, 64, &config, &p, &spec, 1)?;
    println!("updates: {} (skipped {})", outcome.updates, outcome.skipped);
    println!("rho: {:.4} (x {:.4}, y {:.4})", map.rho(), map.rho_axis(0), map.rho_axis(1));
    println!("policy written to {}", out.join("policy.fbsd").display());
    Ok(())
}
