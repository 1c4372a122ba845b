//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key has a default; unknown
//! keys and malformed values are errors that name the key. [`RunConfig::to_text`]
//! writes the fully resolved configuration back in the same format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cost::{CostError, CostSpec, SpeedConstraint};
use crate::fbsde::{CyclicMode, LossOptions};
use crate::lipm::{LipmError, LipmParams, LipmState};
use crate::mpc::MpcSettings;
use crate::net::NetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", location(*.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("bad value for `{key}`{}: {reason}", location(*.line))]
    BadValue {
        key: String,
        reason: String,
        line: Option<usize>,
    },
    #[error("malformed line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid model parameters: {0}")]
    Model(#[from] LipmError),
    #[error("invalid cost weights: {0}")]
    Cost(#[from] CostError),
}

fn location(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

impl ConfigError {
    /// The key the error is about, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey { key, .. } | Self::BadValue { key, .. } => Some(key),
            Self::Model(LipmError::Invalid { name, .. }) => Some(name),
            _ => None,
        }
    }
}

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub com_height: f64,
    pub gravity: f64,
    pub foot_half_x: f64,
    pub foot_half_y: f64,
    pub cop_clip_half: f64,
    pub dt: f64,
    pub steps_per_footstep: usize,
    pub step_displacement: f64,
    pub noise_scale: f64,
    // cost
    pub q_diag: [f64; 4],
    pub r_diag: [f64; 2],
    pub qn_diag: [f64; 4],
    /// `None` tracks the nominal walking velocity.
    pub x_ref: Option<[f64; 4]>,
    pub constraint: bool,
    pub v_min: f64,
    pub mu: f64,
    // training
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// `None` starts half a step behind the foot at nominal velocity.
    pub init_nominal: Option<[f64; 4]>,
    pub init_half_widths: [f64; 4],
    pub seed: u64,
    pub checkpoint_every: usize,
    pub noiseless: bool,
    pub layers: usize,
    pub hidden: usize,
    pub v0_width: usize,
    pub h0_width: usize,
    pub cyclic_mode: CyclicMode,
    pub lambda_cyclic: f64,
    pub lambda_reg: f64,
    pub clip_in_training: bool,
    // mpc
    pub mpc_horizon: usize,
    pub mpc_cop_bound: f64,
    pub admm_rho: f64,
    pub admm_tol: f64,
    pub admm_max_iter: usize,
    pub admm_polish: bool,
    // evaluation
    pub n_pairs: usize,
    pub walk_steps: usize,
    pub constrain_steps: usize,
    pub bench_samples: usize,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = LipmParams::default();
        let t = TrainConfig::for_model(&p);
        let m = MpcSettings::default();
        Self {
            com_height: p.com_height(),
            gravity: p.gravity(),
            foot_half_x: p.foot_half_x,
            foot_half_y: p.foot_half_y,
            cop_clip_half: p.cop_clip_half,
            dt: p.dt,
            steps_per_footstep: p.steps_per_footstep,
            step_displacement: p.step_displacement,
            noise_scale: p.noise_scale,
            q_diag: [1.0; 4],
            r_diag: [100.0; 2],
            qn_diag: [100.0; 4],
            x_ref: None,
            constraint: false,
            v_min: 1.0,
            mu: 50.0,
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.beta1,
            adam_beta2: t.beta2,
            adam_epsilon: t.epsilon,
            init_nominal: None,
            init_half_widths: t.init_half_widths,
            seed: t.master_seed,
            checkpoint_every: 1000,
            noiseless: false,
            layers: t.net.layers,
            hidden: t.net.hidden,
            v0_width: t.net.v0_width,
            h0_width: t.net.h0_width,
            cyclic_mode: t.loss.cyclic,
            lambda_cyclic: t.loss.lambda_cyclic,
            lambda_reg: t.loss.lambda_reg,
            clip_in_training: t.loss.clip_control,
            mpc_horizon: m.horizon,
            mpc_cop_bound: m.cop_bound,
            admm_rho: m.rho,
            admm_tol: m.tol,
            admm_max_iter: m.max_iter,
            admm_polish: m.polish,
            n_pairs: 64,
            walk_steps: 20,
            constrain_steps: 64,
            bench_samples: 420,
            eval_seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
        line: None,
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, format!("`{v}`: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not a boolean"))),
    }
}

fn list<const N: usize>(key: &str, v: &str) -> Result<[f64; N], ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(bad(key, format!("expected {N} comma-separated numbers, got `{v}`")));
    }
    let mut out = [0.0; N];
    for (o, s) in out.iter_mut().zip(parts) {
        *o = num(key, s)?;
    }
    Ok(out)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Key names in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "com_height", "gravity", "foot_half_x", "foot_half_y", "cop_clip_half", "dt",
    "steps_per_footstep", "step_displacement", "noise_scale",
    "q_diag", "r_diag", "qn_diag", "x_ref", "constraint", "v_min", "mu",
    "iterations", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon",
    "init_nominal", "init_half_widths", "seed", "checkpoint_every", "noiseless",
    "layers", "hidden", "v0_width", "h0_width",
    "cyclic_mode", "lambda_cyclic", "lambda_reg", "clip_in_training",
    "mpc_horizon", "mpc_cop_bound", "admm_rho", "admm_tol", "admm_max_iter", "admm_polish",
    "n_pairs", "walk_steps", "constrain_steps", "bench_samples", "eval_seed", "out_dir",
];

impl RunConfig {
    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "com_height" => self.com_height = num(key, v)?,
            "gravity" => self.gravity = num(key, v)?,
            "foot_half_x" => self.foot_half_x = num(key, v)?,
            "foot_half_y" => self.foot_half_y = num(key, v)?,
            "cop_clip_half" => self.cop_clip_half = num(key, v)?,
            "dt" => self.dt = num(key, v)?,
            "steps_per_footstep" => self.steps_per_footstep = num(key, v)?,
            "step_displacement" => self.step_displacement = num(key, v)?,
            "noise_scale" => self.noise_scale = num(key, v)?,
            "q_diag" => self.q_diag = list(key, v)?,
            "r_diag" => self.r_diag = list(key, v)?,
            "qn_diag" => self.qn_diag = list(key, v)?,
            "x_ref" => {
                self.x_ref = match v {
                    "nominal" => None,
                    "zero" => Some([0.0; 4]),
                    _ => Some(list(key, v)?),
                }
            }
            "constraint" => self.constraint = boolean(key, v)?,
            "v_min" => self.v_min = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "adam_beta1" => self.adam_beta1 = num(key, v)?,
            "adam_beta2" => self.adam_beta2 = num(key, v)?,
            "adam_epsilon" => self.adam_epsilon = num(key, v)?,
            "init_nominal" => {
                self.init_nominal = match v {
                    "default" => None,
                    _ => Some(list(key, v)?),
                }
            }
            "init_half_widths" => self.init_half_widths = list(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "noiseless" => self.noiseless = boolean(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "v0_width" => self.v0_width = num(key, v)?,
            "h0_width" => self.h0_width = num(key, v)?,
            "cyclic_mode" => self.cyclic_mode = v.parse().map_err(|e: String| bad(key, e))?,
            "lambda_cyclic" => self.lambda_cyclic = num(key, v)?,
            "lambda_reg" => self.lambda_reg = num(key, v)?,
            "clip_in_training" => self.clip_in_training = boolean(key, v)?,
            "mpc_horizon" => self.mpc_horizon = num(key, v)?,
            "mpc_cop_bound" => self.mpc_cop_bound = num(key, v)?,
            "admm_rho" => self.admm_rho = num(key, v)?,
            "admm_tol" => self.admm_tol = num(key, v)?,
            "admm_max_iter" => self.admm_max_iter = num(key, v)?,
            "admm_polish" => self.admm_polish = boolean(key, v)?,
            "n_pairs" => self.n_pairs = num(key, v)?,
            "walk_steps" => self.walk_steps = num(key, v)?,
            "constrain_steps" => self.constrain_steps = num(key, v)?,
            "bench_samples" => self.bench_samples = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line: None,
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { key, line: Some(i + 1) },
                ConfigError::BadValue { key, reason, .. } => ConfigError::BadValue {
                    key,
                    reason,
                    line: Some(i + 1),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: assignment.to_string(),
            reason: "override must look like key=value".into(),
            line: None,
        })?;
        self.set(key.trim(), value)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "com_height" => self.com_height.to_string(),
            "gravity" => self.gravity.to_string(),
            "foot_half_x" => self.foot_half_x.to_string(),
            "foot_half_y" => self.foot_half_y.to_string(),
            "cop_clip_half" => self.cop_clip_half.to_string(),
            "dt" => self.dt.to_string(),
            "steps_per_footstep" => self.steps_per_footstep.to_string(),
            "step_displacement" => self.step_displacement.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "q_diag" => fmt_list(&self.q_diag),
            "r_diag" => fmt_list(&self.r_diag),
            "qn_diag" => fmt_list(&self.qn_diag),
            "x_ref" => self.x_ref.map(|r| fmt_list(&r)).unwrap_or_else(|| "nominal".into()),
            "constraint" => self.constraint.to_string(),
            "v_min" => self.v_min.to_string(),
            "mu" => self.mu.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_epsilon" => self.adam_epsilon.to_string(),
            "init_nominal" => self.init_nominal.map(|r| fmt_list(&r)).unwrap_or_else(|| "default".into()),
            "init_half_widths" => fmt_list(&self.init_half_widths),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "noiseless" => self.noiseless.to_string(),
            "layers" => self.layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "v0_width" => self.v0_width.to_string(),
            "h0_width" => self.h0_width.to_string(),
            "cyclic_mode" => self.cyclic_mode.to_string(),
            "lambda_cyclic" => self.lambda_cyclic.to_string(),
            "lambda_reg" => self.lambda_reg.to_string(),
            "clip_in_training" => self.clip_in_training.to_string(),
            "mpc_horizon" => self.mpc_horizon.to_string(),
            "mpc_cop_bound" => self.mpc_cop_bound.to_string(),
            "admm_rho" => self.admm_rho.to_string(),
            "admm_tol" => self.admm_tol.to_string(),
            "admm_max_iter" => self.admm_max_iter.to_string(),
            "admm_polish" => self.admm_polish.to_string(),
            "n_pairs" => self.n_pairs.to_string(),
            "walk_steps" => self.walk_steps.to_string(),
            "constrain_steps" => self.constrain_steps.to_string(),
            "bench_samples" => self.bench_samples.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("KEYS lists only known keys"),
        }
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        for key in KEYS {
            writeln!(out, "{key} = {}", self.value_of(key)).expect("writing to a String");
        }
        out
    }

    pub fn lipm(&self) -> Result<LipmParams, ConfigError> {
        Ok(LipmParams::new(
            self.com_height,
            self.gravity,
            self.foot_half_x,
            self.foot_half_y,
            self.cop_clip_half,
            self.dt,
            self.steps_per_footstep,
            self.step_displacement,
            self.noise_scale,
        )?)
    }

    pub fn cost(&self) -> Result<CostSpec, ConfigError> {
        let p = self.lipm()?;
        let v = p.nominal_velocity();
        let x_ref = self.x_ref.unwrap_or([0.0, 0.0, v, v]);
        let constraint = self.constraint.then_some(SpeedConstraint {
            v_min: self.v_min,
            mu: self.mu,
        });
        Ok(CostSpec::diagonal(self.q_diag, self.r_diag, self.qn_diag, x_ref, constraint)?)
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            layers: self.layers,
            hidden: self.hidden,
            v0_width: self.v0_width,
            h0_width: self.h0_width,
        }
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let p = self.lipm()?;
        let mut t = TrainConfig::for_model(&p);
        if let Some(n) = self.init_nominal {
            t.init_nominal = LipmState::from_array(n);
        }
        t.iterations = self.iterations;
        t.batch_size = self.batch_size;
        t.learning_rate = self.learning_rate;
        t.beta1 = self.adam_beta1;
        t.beta2 = self.adam_beta2;
        t.epsilon = self.adam_epsilon;
        t.init_half_widths = self.init_half_widths;
        t.master_seed = self.seed;
        t.checkpoint_every = self.checkpoint_every;
        t.noiseless = self.noiseless;
        t.net = self.net();
        t.loss = LossOptions {
            cyclic: self.cyclic_mode,
            lambda_cyclic: self.lambda_cyclic,
            lambda_reg: self.lambda_reg,
            clip_control: self.clip_in_training,
        };
        t.validate().map_err(|e| bad("training", e.to_string()))?;
        Ok(t)
    }

    pub fn mpc(&self) -> MpcSettings {
        MpcSettings {
            horizon: self.mpc_horizon,
            cop_bound: self.mpc_cop_bound,
            rho: self.admm_rho,
            tol: self.admm_tol,
            max_iter: self.admm_max_iter,
            polish: self.admm_polish,
        }
    }

    /// Fixed local start position `(x0, y0)` every footstep resets to.
    pub fn nominal_start(&self) -> Result<(f64, f64), ConfigError> {
        let n = self.train()?.init_nominal;
        Ok((n.pos_x, n.pos_y))
    }
}
