//! Reverse-mode loss gradient against central finite differences on a
//! small network and a two-tick horizon.

use fbsde_walk::cost::CostSpec;
use fbsde_walk::fbsde::{batch_loss, eval_loss, BatchNoise, LossOptions};
use fbsde_walk::lipm::{LipmParams, LipmState};
use fbsde_walk::net::{NetConfig, NetParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = LipmParams::default();
    let spec = CostSpec::walking_default(&base);
    let mut p = base.clone();
    p.steps_per_footstep = 2;
    let config = NetConfig {
        layers: 1,
        hidden: 2,
        v0_width: 2,
        h0_width: 2,
    };
    let params = NetParams::init(3, config)?;
    let x0 = [LipmState::new(-0.4, -0.38, 1.1, 1.2), LipmState::new(-0.42, -0.41, 1.18, 1.05)];
    let noise = BatchNoise::from_seeds(&[11, 12], 2, p.dt);
    // a unit cyclic weight keeps the loss small enough for
    // central differences to resolve every entry
    let opts = LossOptions {
        lambda_cyclic: 1.0,
        ..LossOptions::default()
    };

    let (report, grads) = batch_loss(&x0, &params, &spec, &p, &noise, &opts)?;
    println!("loss {:.6e}", report.total);

    let loss = |t: usize, i: usize, delta: f64| -> Result<f64, Box<dyn std::error::Error>> {
        let mut q = params.clone();
        q.tensors_mut()[t].data_mut()[i] += delta;
        Ok(eval_loss(&x0, &q, &spec, &p, &noise, &opts)?.total)
    };
    // Richardson-extrapolated central difference, error O(h^4)
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (t, g) in grads.slots.iter().enumerate() {
        for i in 0..g.len() {
            let d1 = (loss(t, i, h)? - loss(t, i, -h)?) / (2.0 * h);
            let d2 = (loss(t, i, h / 2.0)? - loss(t, i, -h / 2.0)?) / h;
            let fd = (4.0 * d2 - d1) / 3.0;
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        println!("tensor {t:2}: {} entries checked", g.len());
    }
    println!("worst relative error {worst:.3e}");
    Ok(())
}
