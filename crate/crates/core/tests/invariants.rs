use fbsde_walk::config::RunConfig;
use fbsde_walk::cost::{hamiltonian, optimal_control, CostSpec, SpeedConstraint};
use fbsde_walk::fbsde::{eval_loss, BatchNoise, LossOptions};
use fbsde_walk::lipm::{CopControl, LipmParams, LipmState};
use fbsde_walk::net::{NetConfig, NetParams};
use fbsde_walk::walk::walk;
use proptest::prelude::*;

fn small_config() -> impl Strategy<Value = NetConfig> {
    (1usize..3, 1usize..6, 1usize..5, 1usize..5).prop_map(|(layers, hidden, v0_width, h0_width)| NetConfig {
        layers,
        hidden,
        v0_width,
        h0_width,
    })
}

fn state() -> impl Strategy<Value = LipmState> {
    (-0.5..-0.3f64, -0.5..-0.3f64, 0.9..1.4f64, 0.9..1.4f64).prop_map(|(a, b, c, d)| LipmState::new(a, b, c, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), config in small_config()) {
        let params = NetParams::init(seed, config).unwrap();
        let back = NetParams::from_bytes(&params.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), params.to_bytes());
        prop_assert_eq!(back.config(), config);
    }

    #[test]
    fn resolved_config_parses_back(
        dt in 0.001..0.05f64,
        lr in 1e-6..1e-1f64,
        seed in any::<u64>(),
        noise in 0.0..2.0f64,
        hidden in 1usize..64,
    ) {
        let mut c = RunConfig::default();
        c.dt = dt;
        c.learning_rate = lr;
        c.seed = seed;
        c.noise_scale = noise;
        c.hidden = hidden;
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn walks_reset_to_the_nominal_start_and_respect_the_clip(
        seed in any::<u64>(),
        start in state(),
        noise in 0.0..1.0f64,
    ) {
        let mut p = LipmParams::default();
        p.noise_scale = noise;
        let spec = CostSpec::walking_default(&p);
        let params = NetParams::init(seed, NetConfig { layers: 1, hidden: 4, v0_width: 4, h0_width: 4 }).unwrap();
        let trace = walk(&params, &p, &spec, &start, (-0.4, -0.4), 3, seed).unwrap();
        prop_assert!(trace.cop_within(p.cop_clip_half));
        for r in &trace.rows {
            prop_assert_eq!(r.tick, r.footstep * p.steps_per_footstep + r.local_tick);
            if r.local_tick == 0 && r.footstep > 0 {
                prop_assert_eq!((r.state.pos_x, r.state.pos_y), (-0.4, -0.4));
            }
        }
    }

    #[test]
    fn loss_is_the_sum_of_nonnegative_parts(seed in any::<u64>(), a in state(), b in state(), constrained in any::<bool>()) {
        let mut p = LipmParams::default();
        p.steps_per_footstep = 4;
        let base = LipmParams::default();
        let spec = CostSpec::walking_default(&base)
            .with_constraint(constrained.then_some(SpeedConstraint { v_min: 1.0, mu: 50.0 }));
        let params = NetParams::init(seed, NetConfig { layers: 1, hidden: 3, v0_width: 3, h0_width: 3 }).unwrap();
        let noise = BatchNoise::from_seeds(&[seed, seed ^ 1], 4, p.dt);
        let r = eval_loss(&[a, b], &params, &spec, &p, &noise, &LossOptions::default()).unwrap();
        prop_assert!(r.terminal_match >= 0.0 && r.cyclic >= 0.0 && r.reg >= 0.0);
        let sum = r.terminal_match + r.cyclic + r.reg;
        prop_assert!((r.total - sum).abs() <= 1e-12 * sum.max(1.0));
    }

    #[test]
    fn closed_form_control_minimises_the_hamiltonian(
        x in prop::array::uniform4(-2.0..2.0f64),
        vx in prop::array::uniform4(-20.0..20.0f64),
        d in prop::array::uniform2(-1.0..1.0f64),
        scale in -6i32..1,
    ) {
        let p = LipmParams::default();
        let spec = CostSpec::walking_default(&p);
        let x = LipmState::from_array(x);
        let u = optimal_control(&vx, &spec, &p);
        let s = 10f64.powi(scale);
        let v = CopControl::new(u.px + s * d[0], u.py + s * d[1]);
        prop_assert!(hamiltonian(&x, &vx, &u, &spec, &p) <= hamiltonian(&x, &vx, &v, &spec, &p));
    }
}
