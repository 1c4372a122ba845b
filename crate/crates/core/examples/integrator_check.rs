//! Euler-Maruyama against the closed-form pendulum solution.
//!
//! Integrates 0.7 s with a constant CoP at several step sizes and prints the
//! worst relative error and the ratio between successive halvings.

use fbsde_walk::lipm::{analytic_step, step_euler_maruyama, CopControl, LipmParams, LipmState};

fn relative_error(a: &LipmState, b: &LipmState) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

fn main() {
    let x0 = LipmState::new(-0.4, -0.4, 1.2, 1.2);
    let u = CopControl::new(0.05, -0.03);
    let horizon = 0.7;
    let mut previous: Option<f64> = None;
    println!("{:>10} {:>8} {:>14} {:>8}", "dt", "steps", "max rel err", "ratio");
    for k in 0..8 {
        let mut p = LipmParams::default();
        p.dt = 0.02 / 2f64.powi(k);
        let steps = (horizon / p.dt).round() as usize;
        let mut x = x0;
        for _ in 0..steps {
            x = step_euler_maruyama(&x, &u, [0.0; 2], &p);
        }
        let exact = analytic_step(&x0, &u, horizon, &p);
        let err = relative_error(&x, &exact);
        let ratio = previous.map(|e| e / err).unwrap_or(f64::NAN);
        println!("{:>10.6} {:>8} {:>14.6e} {:>8.3}", p.dt, steps, err, ratio);
        previous = Some(err);
    }
}
