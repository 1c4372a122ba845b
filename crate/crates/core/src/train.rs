//! Training loop, initial-state sampling and velocity-map evaluation.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost::CostSpec;
use crate::fbsde::{self, BatchNoise, FbsdeError, LossOptions};
use crate::lipm::{LipmParams, LipmState};
use crate::net::{NetConfig, NetError, NetParams};
use crate::tensor::{Gradients, Matrix};

/// Consecutive non-finite batches tolerated before training gives up.
pub const MAX_BAD_BATCHES: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged: {count} consecutive non-finite batches (last at iteration {iteration}: {reason})")]
    Diverged {
        count: usize,
        iteration: usize,
        reason: String,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fbsde(#[from] FbsdeError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init_nominal: LipmState,
    pub init_half_widths: [f64; 4],
    pub master_seed: u64,
    /// Periodic checkpoint interval; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub noiseless: bool,
    pub net: NetConfig,
    pub loss: LossOptions,
}

impl TrainConfig {
    /// Defaults for the walking model `p`; the nominal start sits half a step
    /// behind the foot center and moves at the nominal velocity.
    pub fn for_model(p: &LipmParams) -> Self {
        let v = p.nominal_velocity();
        let half = 0.5 * p.step_displacement;
        Self {
            iterations: 10_000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_nominal: LipmState::new(-half, -half, v, v),
            init_half_widths: [0.05, 0.05, 0.2, 0.2],
            master_seed: 0,
            checkpoint_every: 0,
            noiseless: false,
            net: NetConfig::default(),
            loss: LossOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if self.init_half_widths.iter().any(|w| !(*w >= 0.0)) {
            return bad("init_half_widths must be >= 0");
        }
        if self.loss.lambda_cyclic < 0.0 || self.loss.lambda_reg < 0.0 {
            return bad("loss weights must be >= 0");
        }
        self.net.validate()?;
        Ok(())
    }
}

pub fn sample_initial_state(nominal: &LipmState, half_widths: &[f64; 4], rng: &mut impl Rng) -> LipmState {
    let n = nominal.to_array();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = if half_widths[i] > 0.0 {
            n[i] + rng.random_range(-half_widths[i]..=half_widths[i])
        } else {
            n[i]
        };
    }
    LipmState::from_array(out)
}

/// Adam with bias correction. Non-finite gradients skip the update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    skipped: usize,
}

impl Adam {
    pub fn new(params: &NetParams, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Returns whether the update was applied.
    pub fn step(&mut self, params: &mut NetParams, grads: &Gradients) -> bool {
        assert_eq!(grads.slots.len(), self.m.len(), "gradient count does not match parameters");
        if grads.slots.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            warn!("non-finite gradient, update skipped ({} so far)", self.skipped);
            return false;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.slots)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        true
    }
}

/// One row of the deterministic metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub total: f64,
    pub terminal_match: f64,
    pub cyclic: f64,
    pub reg: f64,
}

pub const METRICS_HEADER: &str = "iteration,total,terminal_match,cyclic,reg";
pub const TIMING_HEADER: &str = "iteration,wall_ms";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub history: Vec<MetricsRow>,
    pub updates: u64,
    pub skipped: usize,
    pub checkpoints: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut timing = BufWriter::new(File::create(dir.join("metrics_timing.csv"))?);
        writeln!(timing, "{TIMING_HEADER}")?;
        Ok(Self { dir: dir.to_path_buf(), metrics, timing })
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.fbsd")
}

/// Runs `config.iterations` updates. With an output directory, writes
/// `metrics.csv`, `metrics_timing.csv`, periodic checkpoints and the final
/// `policy.fbsd`.
pub fn train(
    config: &TrainConfig,
    p: &LipmParams,
    spec: &CostSpec,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
    let mut params = NetParams::init(rng.random(), config.net)?;
    let mut adam = Adam::new(&params, config.learning_rate, config.beta1, config.beta2, config.epsilon);
    let mut outputs = out_dir.map(Outputs::create).transpose()?;
    let mut history = Vec::with_capacity(config.iterations);
    let mut checkpoints = Vec::new();
    let mut bad_run = 0;
    let start = Instant::now();
    let n_steps = p.steps_per_footstep;

    for iteration in 0..config.iterations {
        let x0: Vec<LipmState> = (0..config.batch_size)
            .map(|_| sample_initial_state(&config.init_nominal, &config.init_half_widths, &mut rng))
            .collect();
        let seeds: Vec<u64> = (0..config.batch_size).map(|_| rng.random()).collect();
        let noise = if config.noiseless {
            BatchNoise::zeros(config.batch_size, n_steps)
        } else {
            BatchNoise::from_seeds(&seeds, n_steps, p.dt)
        };

        let failure = match fbsde::batch_loss(&x0, &params, spec, p, &noise, &config.loss) {
            Ok((report, grads)) => {
                let row = MetricsRow {
                    iteration,
                    total: report.total,
                    terminal_match: report.terminal_match,
                    cyclic: report.cyclic,
                    reg: report.reg,
                };
                if let Some(o) = outputs.as_mut() {
                    writeln!(
                        o.metrics,
                        "{},{},{},{},{}",
                        row.iteration, row.total, row.terminal_match, row.cyclic, row.reg
                    )?;
                    writeln!(o.timing, "{},{:.3}", iteration, start.elapsed().as_secs_f64() * 1e3)?;
                }
                history.push(row);
                if adam.step(&mut params, &grads) {
                    None
                } else {
                    Some("non-finite gradient".to_string())
                }
            }
            Err(FbsdeError::NonFinite { step, what }) => {
                warn!("iteration {iteration}: non-finite {what} at timestep {step}, batch skipped");
                Some(format!("non-finite {what} at timestep {step}"))
            }
            Err(e) => return Err(e.into()),
        };
        match failure {
            None => bad_run = 0,
            Some(reason) => {
                bad_run += 1;
                if bad_run >= MAX_BAD_BATCHES {
                    return Err(TrainError::Diverged {
                        count: bad_run,
                        iteration,
                        reason,
                    });
                }
            }
        }

        if let Some(o) = outputs.as_ref() {
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                let path = o.dir.join(checkpoint_name(iteration + 1));
                params.save(&path)?;
                checkpoints.push(path);
            }
        }
        if iteration % 100 == 0 || iteration + 1 == config.iterations {
            if let Some(row) = history.last() {
                info!(
                    "iter {:>6} loss {:.6e} terminal {:.4e} cyclic {:.4e} reg {:.3e}",
                    row.iteration, row.total, row.terminal_match, row.cyclic, row.reg
                );
            }
        }
    }

    if let Some(mut o) = outputs {
        o.metrics.flush()?;
        o.timing.flush()?;
        params.save(&o.dir.join("policy.fbsd"))?;
    }
    Ok(TrainOutcome {
        params,
        history,
        updates: adam.steps_taken(),
        skipped: adam.skipped(),
        checkpoints,
    })
}

/// Start and end velocity of one evaluated footstep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityPair {
    pub v_start: [f64; 2],
    pub v_end: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityMap {
    pub pairs: Vec<VelocityPair>,
    pub v_nominal: f64,
}

pub const VELOCITY_MAP_HEADER: &str = "pair_index,axis,v_start,v_end,v_nominal";

impl VelocityMap {
    /// Contraction ratio on one axis (0 = x, 1 = y).
    pub fn rho_axis(&self, axis: usize) -> f64 {
        let n = self.pairs.len() as f64;
        let end: f64 = self.pairs.iter().map(|q| (q.v_end[axis] - self.v_nominal).abs()).sum::<f64>() / n;
        let start: f64 = self.pairs.iter().map(|q| (q.v_start[axis] - self.v_nominal).abs()).sum::<f64>() / n;
        end / start
    }

    /// Contraction ratio pooled over both axes.
    pub fn rho(&self) -> f64 {
        let dev = |f: fn(&VelocityPair) -> [f64; 2]| -> f64 {
            self.pairs
                .iter()
                .map(|q| {
                    let v = f(q);
                    (v[0] - self.v_nominal).abs() + (v[1] - self.v_nominal).abs()
                })
                .sum()
        };
        dev(|q| q.v_end) / dev(|q| q.v_start)
    }

    pub fn is_finite(&self) -> bool {
        self.pairs
            .iter()
            .all(|q| q.v_end.iter().chain(&q.v_start).all(|v| v.is_finite()))
    }

    /// One row per pair and axis.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{VELOCITY_MAP_HEADER}")?;
        for (i, q) in self.pairs.iter().enumerate() {
            for (axis, name) in ["x", "y"].iter().enumerate() {
                writeln!(w, "{i},{name},{},{},{}", q.v_start[axis], q.v_end[axis], self.v_nominal)?;
            }
        }
        Ok(())
    }
}

/// Rolls out `n_pairs` independent footsteps whose start velocities are drawn
/// around the nominal one; positions start at the fixed nominal point, as
/// after a frame reset. Noise follows `p.noise_scale`.
pub fn eval_velocity_map(
    params: &NetParams,
    n_pairs: usize,
    config: &TrainConfig,
    p: &LipmParams,
    spec: &CostSpec,
    seed: u64,
) -> Result<VelocityMap, FbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = config.init_half_widths;
    let x0: Vec<LipmState> = (0..n_pairs)
        .map(|_| sample_initial_state(&config.init_nominal, &[0.0, 0.0, hw[2], hw[3]], &mut rng))
        .collect();
    let seeds: Vec<u64> = (0..n_pairs).map(|_| rng.random()).collect();
    let noise = if p.noise_scale == 0.0 {
        BatchNoise::zeros(n_pairs, p.steps_per_footstep)
    } else {
        BatchNoise::from_seeds(&seeds, p.steps_per_footstep, p.dt)
    };
    let traj = fbsde::rollout_batch(&x0, params, spec, p, &noise, config.loss.clip_control)?;
    let pairs = x0
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let end = traj.terminal(m);
            VelocityPair {
                v_start: [s.vel_x, s.vel_y],
                v_end: [end.vel_x, end.vel_y],
            }
        })
        .collect();
    Ok(VelocityMap {
        pairs,
        v_nominal: p.nominal_velocity(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Five-tick footsteps that keep the default nominal velocity.
    fn miniature_model() -> LipmParams {
        let mut p = LipmParams::default();
        p.steps_per_footstep = 5;
        p.step_displacement = 0.8 * 5.0 / 35.0;
        p
    }

    fn miniature_config(p: &LipmParams) -> TrainConfig {
        TrainConfig {
            iterations: 200,
            batch_size: 8,
            learning_rate: 3e-2,
            net: NetConfig {
                layers: 2,
                hidden: 4,
                v0_width: 4,
                h0_width: 4,
            },
            master_seed: 7,
            ..TrainConfig::for_model(p)
        }
    }

    #[test]
    fn zero_width_sampling_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nom = LipmState::new(-0.4, -0.4, 1.1, 1.2);
        assert_eq!(sample_initial_state(&nom, &[0.0; 4], &mut rng), nom);
    }

    #[test]
    fn uniform_sampling_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nom = LipmState::new(-0.4, -0.4, 1.1429, 1.1429);
        let hw = [0.05, 0.05, 0.2, 0.2];
        let n = 10_000;
        let samples: Vec<[f64; 4]> = (0..n)
            .map(|_| sample_initial_state(&nom, &hw, &mut rng).to_array())
            .collect();
        let nom = nom.to_array();
        for i in 0..4 {
            let col: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            assert!(col.iter().all(|v| (v - nom[i]).abs() <= hw[i]));
            let mean = col.iter().sum::<f64>() / n as f64;
            let sigma = hw[i] / 3f64.sqrt();
            assert!((mean - nom[i]).abs() < 3.0 * sigma / (n as f64).sqrt());
        }
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let nom = LipmState::from_array(nom);
        assert_eq!(sample_initial_state(&nom, &hw, &mut a), sample_initial_state(&nom, &hw, &mut b));
    }

    fn one_param_net() -> NetParams {
        NetParams::init(
            0,
            NetConfig {
                layers: 1,
                hidden: 1,
                v0_width: 1,
                h0_width: 1,
            },
        )
        .unwrap()
    }

    fn grads_like(params: &NetParams, value: f64) -> Gradients {
        Gradients {
            slots: params
                .tensors()
                .iter()
                .map(|t| Matrix::filled(t.rows(), t.cols(), value))
                .collect(),
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params = one_param_net();
        let before = params.clone();
        let mut adam = Adam::new(&params, 1e-3, 0.9, 0.999, 1e-8);
        assert!(adam.step(&mut params, &grads_like(&before, 0.0)));
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = one_param_net();
        let before = params.clone();
        let mut adam = Adam::new(&params, 1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &grads_like(&before, 0.5));
        // bias-corrected first moment 0.5 over sqrt of second moment 0.25
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut params = one_param_net();
        let before = params.clone();
        let mut adam = Adam::new(&params, 1e-3, 0.9, 0.999, 1e-8);
        let mut g = grads_like(&before, 0.1);
        g.slots[2].data_mut()[0] = f64::NAN;
        assert!(!adam.step(&mut params, &g));
        assert_eq!(params, before);
        assert_eq!(adam.skipped(), 1);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn single_iteration_writes_one_row() {
        let p = miniature_model();
        let spec = CostSpec::walking_default(&p);
        let dir = tempfile::tempdir().unwrap();
        for every in [0, 1] {
            let config = TrainConfig {
                iterations: 1,
                checkpoint_every: every,
                ..miniature_config(&p)
            };
            let out = dir.path().join(format!("every{every}"));
            let r = train(&config, &p, &spec, Some(&out)).unwrap();
            assert_eq!(r.updates, 1);
            let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
            assert_eq!(csv.lines().count(), 2);
            assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
            assert_eq!(out.join(checkpoint_name(1)).exists(), every == 1);
            assert!(out.join("policy.fbsd").exists());
        }
    }

    #[test]
    fn training_is_deterministic_and_noise_matters() {
        let p = miniature_model();
        let spec = CostSpec::walking_default(&p);
        let config = TrainConfig {
            iterations: 5,
            ..miniature_config(&p)
        };
        let a = train(&config, &p, &spec, None).unwrap();
        let b = train(&config, &p, &spec, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let quiet = TrainConfig {
            noiseless: true,
            ..config.clone()
        };
        let c = train(&quiet, &p, &spec, None).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn noiseless_flag_zeroes_increments() {
        let p = miniature_model();
        let spec = CostSpec::walking_default(&p);
        // with every increment zero, the noise scale cannot matter
        let mut loud = p.clone();
        loud.noise_scale = 50.0;
        let config = TrainConfig {
            iterations: 3,
            noiseless: true,
            ..miniature_config(&p)
        };
        let a = train(&config, &p, &spec, None).unwrap();
        let b = train(&config, &loud, &spec, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn miniature_training_halves_terminal_match() {
        let p = miniature_model();
        let spec = CostSpec::walking_default(&p);
        let config = miniature_config(&p);
        let r = train(&config, &p, &spec, None).unwrap();
        let first = r.history[0].terminal_match;
        let tail: f64 = r.history[190..].iter().map(|h| h.terminal_match).sum::<f64>() / 10.0;
        assert!(tail <= 0.5 * first, "terminal_match {first} -> {tail}");
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let p = miniature_model();
        let spec = CostSpec::walking_default(&p);
        let norms: Vec<f64> = [1e-3, 1e-1, 10.0]
            .iter()
            .map(|&l| {
                let mut config = TrainConfig {
                    iterations: 100,
                    ..miniature_config(&p)
                };
                config.loss.lambda_reg = l;
                train(&config, &p, &spec, None).unwrap().params.theta_sum_squares()
            })
            .collect();
        assert!(norms[0] >= norms[1] && norms[1] >= norms[2], "{norms:?}");
    }

    #[test]
    fn velocity_map_shape_and_determinism() {
        let p = LipmParams::default();
        let spec = CostSpec::walking_default(&p);
        let config = TrainConfig::for_model(&p);
        let params = NetParams::init(3, NetConfig::default()).unwrap();
        let a = eval_velocity_map(&params, 64, &config, &p, &spec, 9).unwrap();
        let b = eval_velocity_map(&params, 64, &config, &p, &spec, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 64);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.iter().filter(|r| r.contains(",x,")).count(), 64);
        assert_eq!(rows.iter().filter(|r| r.contains(",y,")).count(), 64);
        let nominal = format!("{}", p.nominal_velocity());
        assert!(rows.iter().all(|r| r.ends_with(&nominal)));
        for q in &a.pairs {
            assert!((q.v_start[0] - p.nominal_velocity()).abs() <= 0.2);
        }
    }

    #[test]
    fn rho_is_one_for_identity_map() {
        let map = VelocityMap {
            pairs: vec![
                VelocityPair { v_start: [1.0, 1.3], v_end: [1.0, 1.3] },
                VelocityPair { v_start: [1.2, 0.9], v_end: [1.2, 0.9] },
            ],
            v_nominal: 1.1,
        };
        assert!((map.rho() - 1.0).abs() < 1e-12);
        assert!((map.rho_axis(0) - 1.0).abs() < 1e-12);
        let half = VelocityMap {
            pairs: map
                .pairs
                .iter()
                .map(|q| VelocityPair {
                    v_start: q.v_start,
                    v_end: [0.5 * (q.v_start[0] + 1.1), 0.5 * (q.v_start[1] + 1.1)],
                })
                .collect(),
            v_nominal: 1.1,
        };
        assert!((half.rho() - 0.5).abs() < 1e-12);
    }
}
