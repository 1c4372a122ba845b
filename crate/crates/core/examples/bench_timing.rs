//! Per-tick cost of the network controller against one MPC solve.
//!
//! ```text
//! cargo run --release --example bench_timing -- [samples] [CHECKPOINT]
//! ```
//!
//! Without a checkpoint an untrained network is timed; inference cost does
//! not depend on the weights.

use fbsde_walk::cost::CostSpec;
use fbsde_walk::lipm::LipmParams;
use fbsde_walk::mpc::{bench, MpcSettings};
use fbsde_walk::net::{NetConfig, NetParams};
use fbsde_walk::train::TrainConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let samples = args.next().map(|s| s.parse()).transpose()?.unwrap_or(420);
    let params = match args.next() {
        Some(path) => NetParams::load(path.as_ref())?,
        None => NetParams::init(0, NetConfig::default())?,
    };
    let p = LipmParams::default();
    let spec = CostSpec::walking_default(&p);
    let t = TrainConfig::for_model(&p);
    let report = bench(&params, &p, &spec, &MpcSettings::default(), samples, &t.init_nominal, &t.init_half_widths, 1)?;
    println!("{}", report.summary_json());
    Ok(())
}
