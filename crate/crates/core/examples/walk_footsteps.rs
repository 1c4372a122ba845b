//! Walks a trained policy over many footsteps and writes the trace.
//!
//! ```text
//! cargo run --release --example walk_footsteps -- CHECKPOINT [steps] [noise_scale]
//! ```
//!
//! Train a checkpoint first with the `train_policy` example.

use std::fs::File;
use std::io::BufWriter;

use fbsde_walk::cost::CostSpec;
use fbsde_walk::lipm::{LipmParams, LipmState};
use fbsde_walk::net::NetParams;
use fbsde_walk::walk::walk;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next().unwrap_or_else(|| "out/train_policy/policy.fbsd".into());
    let steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let mut p = LipmParams::default();
    p.noise_scale = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.0);

    let params = NetParams::load(checkpoint.as_ref())?;
    let spec = CostSpec::walking_default(&p);
    let v = p.nominal_velocity();
    let trace = walk(&params, &p, &spec, &LipmState::new(-0.4, -0.4, v, v), (-0.4, -0.4), steps, 1)?;

    for f in &trace.footsteps {
        println!(
            "footstep {:2}: v ({:.3}, {:.3}) -> ({:.3}, {:.3})",
            f.footstep, f.start.vel_x, f.start.vel_y, f.end.vel_x, f.end.vel_y
        );
    }
    let saturated = trace.rows.iter().filter(|r| r.cop != r.cop_raw).count();
    println!("max |pos| {:.4}, bounded: {}", trace.max_abs_position(), trace.is_bounded(1.5));
    println!("CoP saturated on {saturated} of {} ticks", trace.rows.len());
    trace.write_csv(&mut BufWriter::new(File::create("trace.csv")?))?;
    println!("wrote trace.csv");
    Ok(())
}
