//! The preview-control baseline: one condensed QP in detail, then a
//! closed-loop footstep under receding-horizon control.

use fbsde_walk::cost::CostSpec;
use fbsde_walk::lipm::{LipmParams, LipmState};
use fbsde_walk::mpc::{build_condensed_qp, closed_loop, solve_qp_admm, MpcSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = LipmParams::default();
    let spec = CostSpec::walking_default(&p);
    let settings = MpcSettings::default();
    let v = p.nominal_velocity();
    let x0 = LipmState::new(-0.4, -0.4, v, v);

    let qp = build_condensed_qp(&x0, &p, &spec, &settings);
    let sol = solve_qp_admm(&qp, &settings)?;
    println!(
        "QP: {} variables, {} iterations, converged {}, polished {}, KKT {:.2e}, {:.2} ms",
        qp.dim(),
        sol.iterations,
        sol.converged,
        sol.polished,
        sol.kkt_residual,
        sol.solve_ns as f64 / 1e6
    );
    let active = sol.u.iter().filter(|u| u.abs() >= settings.cop_bound - 1e-9).count();
    println!("bounds active on {active} of {} CoP components", qp.dim());

    let xs = closed_loop(&x0, p.steps_per_footstep, &p, &spec, &settings)?;
    for (k, x) in xs.iter().enumerate().step_by(5) {
        println!("tick {k:2}: pos ({:+.3}, {:+.3}) vel ({:.3}, {:.3})", x.pos_x, x.pos_y, x.vel_x, x.vel_y);
    }
    Ok(())
}
