//! The closed-form CoP minimises the Hamiltonian: random perturbations of
//! it never do better.

use fbsde_walk::cost::{hamiltonian, optimal_control, CostSpec};
use fbsde_walk::lipm::{CopControl, LipmParams, LipmState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let p = LipmParams::default();
    let spec = CostSpec::walking_default(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut beaten = 0;
    let mut worst_margin = f64::INFINITY;
    for _ in 0..1000 {
        let x = LipmState::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let vx: [f64; 4] = std::array::from_fn(|_| rng.random_range(-50.0..50.0));
        let u = optimal_control(&vx, &spec, &p);
        let best = hamiltonian(&x, &vx, &u, &spec, &p);
        for _ in 0..100 {
            let v = CopControl::new(u.px + rng.random_range(-0.5..0.5), u.py + rng.random_range(-0.5..0.5));
            let margin = hamiltonian(&x, &vx, &v, &spec, &p) - best;
            worst_margin = worst_margin.min(margin);
            if margin < 0.0 {
                beaten += 1;
            }
        }
    }
    println!("perturbations that beat the optimum: {beaten} of 100000");
    println!("smallest margin: {worst_margin:.3e}");
}
