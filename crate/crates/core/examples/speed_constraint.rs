//! Trains one policy without and one with the minimum-speed penalty, then
//! compares how often each walks slower than the bound.
//!
//! ```text
//! cargo run --release --example speed_constraint -- [iterations] [noise_scale] [footsteps]
//! ```

use fbsde_walk::cost::{CostSpec, SpeedConstraint};
use fbsde_walk::lipm::{LipmParams, LipmState};
use fbsde_walk::train::{train, TrainConfig};
use fbsde_walk::walk::{walk, ConstraintReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let mut p = LipmParams::default();
    p.noise_scale = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.1);
    let footsteps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);

    let v = p.nominal_velocity();
    let start = LipmState::new(-0.4, -0.4, v, v);
    let free = CostSpec::walking_default(&p);
    let bounded = free.clone().with_constraint(Some(SpeedConstraint { v_min: 1.0, mu: 50.0 }));
    let config = TrainConfig {
        iterations,
        noiseless: p.noise_scale == 0.0,
        ..TrainConfig::for_model(&p)
    };

    for (label, spec) in [("unconstrained", &free), ("constrained", &bounded)] {
        let policy = train(&config, &p, spec, None)?.params;
        let trace = walk(&policy, &p, spec, &start, (-0.4, -0.4), footsteps, 1)?;
        let r = ConstraintReport::from_trace(label, &trace, 1.0, footsteps, p.steps_per_footstep);
        println!(
            "{label:13}: {:.2}% of ticks below 1.0 m/s, speed [{:.3}, {:.3}], {} footsteps completed",
            100.0 * r.violation_fraction,
            r.min_speed,
            r.max_speed,
            r.footsteps_completed
        );
    }
    Ok(())
}
