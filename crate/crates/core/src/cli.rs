//! Command-line front end.
//!
//! Settings resolve in layers: built-in defaults, then `--config FILE`, then
//! each `--set key=value` in order, then the dedicated flags. The resolved
//! configuration is written next to every command's outputs.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::fbsde::FbsdeError;
use crate::lipm::{LipmParams, LipmState};
use crate::mpc::{self, MpcError};
use crate::net::{CheckpointHeader, NetError, NetParams};
use crate::train::{self, TrainError};
use crate::walk::{self, ConstraintReport, WalkTrace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Debug, Parser)]
#[command(name = "fbsde-walk", version, about = "Train, walk and benchmark an FBSDE walking policy")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Sets both the training seed and the evaluation seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Policy checkpoint to load; defaults to `<out>/policy.fbsd`.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Describe every output file's columns and exit.
    #[arg(long)]
    pub help_formats: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics, checkpoints and policy.fbsd.
    Train(TrainArgs),
    /// Walk footsteps with a trained policy and write the trace.
    Walk(WalkArgs),
    /// Start-versus-end velocity map and its contraction ratio.
    EvalMap(EvalMapArgs),
    /// Compare speed-constraint violations of two policies.
    Constrain(ConstrainArgs),
    /// Time network inference against MPC solves.
    Bench(BenchArgs),
    /// Print a checkpoint header.
    Describe,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub noiseless: Option<bool>,
}

#[derive(Debug, Args)]
pub struct WalkArgs {
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConstrainArgs {
    /// Policy trained without the speed penalty.
    #[arg(long, value_name = "PATH")]
    pub unconstrained: PathBuf,
    /// Policy trained with the speed penalty.
    #[arg(long, value_name = "PATH")]
    pub constrained: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: NetError },
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no subcommand given; see --help")]
    NoCommand,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::NoCommand => EXIT_CONFIG,
            Self::Checkpoint { .. } => EXIT_CHECKPOINT,
            Self::Numerical(_) => EXIT_NUMERICAL,
            Self::Io { .. } => EXIT_IO,
        }
    }
}

impl From<FbsdeError> for CliError {
    fn from(e: FbsdeError) -> Self {
        Self::Numerical(e.to_string())
    }
}

impl From<MpcError> for CliError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::Invalid(_) => Self::Config(ConfigError::BadValue {
                key: "mpc".into(),
                reason: e.to_string(),
                line: None,
            }),
            other => Self::Numerical(other.to_string()),
        }
    }
}

pub const HELP_FORMATS: &str = "\
Output files (comma-separated, one header line, fixed column order)

train
  metrics.csv          iteration,total,terminal_match,cyclic,reg
  metrics_timing.csv   iteration,wall_ms
  checkpoint_NNNNNN.fbsd, policy.fbsd   binary checkpoints (see below)

walk
  trace.csv            tick,footstep,local_tick,pos_x,pos_y,vel_x,vel_y,cop_x,cop_y,cop_raw_x,cop_raw_y,value,dw_x,dw_y
                       one row per tick; positions in the current foot's frame;
                       cop is the executed (clipped) CoP, cop_raw the unclipped one
  footsteps.csv        footstep,v_start_x,v_start_y,v_end_x,v_end_y,end_pos_x,end_pos_y
                       end_pos is the terminal position before the frame reset
  walk_summary.json    footsteps, ticks, bounded, max_abs_position, cop_within_clip, diverged_at

eval-map
  velocity_map.csv     pair_index,axis,v_start,v_end,v_nominal   (axis is x or y)
  velocity_map.json    pairs, rho, rho_x, rho_y, v_nominal

constrain
  speed.csv            policy,tick,footstep,local_tick,speed,v_min
  speed_envelope.csv   policy,local_tick,speed_min,speed_max,v_min
  constrain_summary.json   per-policy violation fraction, min/max speed, envelopes

bench
  timing.csv           sample_index,method,nanoseconds   (method is fbsde or mpc)
  bench_summary.json   samples, horizon, state_dim, per-method mean_ns/std_ns, speedup

every command
  resolved_config.txt  key = value lines; feeding it back via --config reproduces the run

checkpoint (.fbsd)
  bytes 0..4    magic FBSD
  u32 LE        format version, state dim, layers, hidden, v0 width, h0 width
  u64 LE        parameter count
  f64 LE        parameters: per LSTM layer weight then bias, vx head, v0 head, h0 head

exit codes
  0 success, 1 i/o failure, 2 config error, 3 checkpoint error, 4 numerical abort
";

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.help_formats {
        print!("{HELP_FORMATS}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::NoCommand);
    };
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.set {
        config.apply_override(assignment)?;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.eval_seed = seed;
    }
    let checkpoint = cli.checkpoint.clone().unwrap_or_else(|| config.out_dir.join("policy.fbsd"));

    match command {
        Command::Describe => describe(&checkpoint),
        Command::Train(a) => {
            if let Some(n) = a.iterations {
                config.iterations = n;
            }
            if let Some(b) = a.noiseless {
                config.noiseless = b;
            }
            cmd_train(&config)
        }
        Command::Walk(a) => {
            if let Some(n) = a.steps {
                config.walk_steps = n;
            }
            cmd_walk(&config, &checkpoint)
        }
        Command::EvalMap(a) => {
            if let Some(n) = a.pairs {
                config.n_pairs = n;
            }
            cmd_eval_map(&config, &checkpoint)
        }
        Command::Constrain(a) => {
            if let Some(n) = a.steps {
                config.constrain_steps = n;
            }
            cmd_constrain(&config, &a.unconstrained, &a.constrained)
        }
        Command::Bench(a) => {
            if let Some(n) = a.samples {
                config.bench_samples = n;
            }
            if let Some(h) = a.horizon {
                config.mpc_horizon = h;
            }
            cmd_bench(&config, &checkpoint)
        }
    }
}

fn describe(checkpoint: &Path) -> Result<(), CliError> {
    let header = CheckpointHeader::read(checkpoint).map_err(|source| CliError::Checkpoint {
        path: checkpoint.to_path_buf(),
        source,
    })?;
    println!("{}", checkpoint.display());
    println!("{header}");
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates the output directory and writes the resolved config into it.
fn prepare_output(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, config.to_text()).map_err(io_err(&path))?;
    Ok(dir)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    let result = File::create(path).and_then(|file| {
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush()
    });
    result.map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Model used for evaluation: a noiseless run switches the noise off.
fn eval_model(config: &RunConfig) -> Result<LipmParams, CliError> {
    let mut p = config.lipm()?;
    if config.noiseless {
        p.noise_scale = 0.0;
    }
    Ok(p)
}

fn load_policy(config: &RunConfig, path: &Path) -> Result<NetParams, CliError> {
    NetParams::load_expecting(path, config.net()).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let p = config.lipm()?;
    let spec = config.cost()?;
    let t = config.train()?;
    let dir = prepare_output(config)?;
    let outcome = train::train(&t, &p, &spec, Some(&dir)).map_err(|e| match e {
        TrainError::Config(reason) => CliError::Config(ConfigError::BadValue {
            key: "training".into(),
            reason,
            line: None,
        }),
        TrainError::Net(source) => CliError::Checkpoint {
            path: dir.join("policy.fbsd"),
            source,
        },
        TrainError::Io(source) => CliError::Io {
            path: dir.clone(),
            source,
        },
        other => CliError::Numerical(other.to_string()),
    })?;
    if let Some(last) = outcome.history.last() {
        println!(
            "iteration {}: total {:.6e} (terminal {:.6e}, cyclic {:.6e}, reg {:.6e})",
            last.iteration, last.total, last.terminal_match, last.cyclic, last.reg
        );
    }
    println!("updates {} skipped {}", outcome.updates, outcome.skipped);
    println!("policy: {}", dir.join("policy.fbsd").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct WalkSummary {
    footsteps: usize,
    ticks: usize,
    bounded: bool,
    bound: f64,
    max_abs_position: f64,
    cop_within_clip: bool,
    diverged_at: Option<usize>,
}

/// Bound on local-frame CoM position used for the boundedness verdict.
pub const POSITION_BOUND: f64 = 1.5;

fn walk_policy(config: &RunConfig, params: &NetParams, p: &LipmParams, n_steps: usize) -> Result<WalkTrace, CliError> {
    let spec = config.cost()?;
    let t = config.train()?;
    let nominal = config.nominal_start()?;
    let start = LipmState::new(nominal.0, nominal.1, t.init_nominal.vel_x, t.init_nominal.vel_y);
    Ok(walk::walk(params, p, &spec, &start, nominal, n_steps, config.eval_seed)?)
}

pub fn cmd_walk(config: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let p = eval_model(config)?;
    let params = load_policy(config, checkpoint)?;
    let dir = prepare_output(config)?;
    let trace = walk_policy(config, &params, &p, config.walk_steps)?;
    let trace_path = dir.join("trace.csv");
    write_with(&trace_path, |w| trace.write_csv(w))?;
    write_with(&dir.join("footsteps.csv"), |w| trace.write_footsteps_csv(w))?;
    let summary = WalkSummary {
        footsteps: trace.footsteps.len(),
        ticks: trace.rows.len(),
        bounded: trace.is_bounded(POSITION_BOUND),
        bound: POSITION_BOUND,
        max_abs_position: trace.max_abs_position(),
        cop_within_clip: trace.cop_within(p.cop_clip_half),
        diverged_at: trace.diverged_at,
    };
    write_json(&dir.join("walk_summary.json"), &summary)?;
    for f in &trace.footsteps {
        println!(
            "footstep {:3}: v_start ({:+.4}, {:+.4}) v_end ({:+.4}, {:+.4})",
            f.footstep, f.start.vel_x, f.start.vel_y, f.end.vel_x, f.end.vel_y
        );
    }
    println!(
        "{} footsteps, max |pos| {:.4}, {}",
        summary.footsteps,
        summary.max_abs_position,
        if summary.bounded { "bounded" } else { "NOT bounded" }
    );
    if let Some(k) = trace.diverged_at {
        println!("diverged during footstep {k}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MapSummary {
    pairs: usize,
    rho: f64,
    rho_x: f64,
    rho_y: f64,
    v_nominal: f64,
}

pub fn cmd_eval_map(config: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let p = eval_model(config)?;
    let spec = config.cost()?;
    let t = config.train()?;
    let params = load_policy(config, checkpoint)?;
    let dir = prepare_output(config)?;
    let map = train::eval_velocity_map(&params, config.n_pairs, &t, &p, &spec, config.eval_seed)?;
    write_with(&dir.join("velocity_map.csv"), |w| map.write_csv(w))?;
    let summary = MapSummary {
        pairs: map.pairs.len(),
        rho: map.rho(),
        rho_x: map.rho_axis(0),
        rho_y: map.rho_axis(1),
        v_nominal: map.v_nominal,
    };
    write_json(&dir.join("velocity_map.json"), &summary)?;
    println!(
        "rho {:.4} (x {:.4}, y {:.4}) over {} pairs",
        summary.rho, summary.rho_x, summary.rho_y, summary.pairs
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ConstrainSummary {
    v_min: f64,
    noise_scale: f64,
    footsteps: usize,
    unconstrained: ConstraintReport,
    constrained: ConstraintReport,
    constrained_fewer_violations: bool,
}

pub fn cmd_constrain(config: &RunConfig, unconstrained: &Path, constrained: &Path) -> Result<(), CliError> {
    let p = eval_model(config)?;
    let free = load_policy(config, unconstrained)?;
    let bound = load_policy(config, constrained)?;
    let dir = prepare_output(config)?;
    let n = config.constrain_steps;
    let ticks = p.steps_per_footstep;
    let free_trace = walk_policy(config, &free, &p, n)?;
    let bound_trace = walk_policy(config, &bound, &p, n)?;
    let free_report = ConstraintReport::from_trace("unconstrained", &free_trace, config.v_min, n, ticks);
    let bound_report = ConstraintReport::from_trace("constrained", &bound_trace, config.v_min, n, ticks);
    write_with(&dir.join("speed.csv"), |w| {
        writeln!(w, "{}", walk::SPEED_HEADER)?;
        walk::write_speed_csv(w, "unconstrained", &free_trace, config.v_min)?;
        walk::write_speed_csv(w, "constrained", &bound_trace, config.v_min)
    })?;
    write_with(&dir.join("speed_envelope.csv"), |w| {
        writeln!(w, "{}", walk::ENVELOPE_HEADER)?;
        walk::write_envelope_csv(w, &free_report)?;
        walk::write_envelope_csv(w, &bound_report)
    })?;
    for r in [&free_report, &bound_report] {
        println!(
            "{:13}: {} / {} ticks below v_min {} ({:.2}%), speed [{:.4}, {:.4}]",
            r.label,
            r.violations,
            r.ticks,
            r.v_min,
            100.0 * r.violation_fraction,
            r.min_speed,
            r.max_speed
        );
    }
    let summary = ConstrainSummary {
        v_min: config.v_min,
        noise_scale: p.noise_scale,
        footsteps: n,
        constrained_fewer_violations: bound_report.violation_fraction < free_report.violation_fraction,
        unconstrained: free_report,
        constrained: bound_report,
    };
    write_json(&dir.join("constrain_summary.json"), &summary)?;
    Ok(())
}

pub fn cmd_bench(config: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let p = eval_model(config)?;
    let spec = config.cost()?;
    let t = config.train()?;
    let settings = config.mpc();
    let params = load_policy(config, checkpoint)?;
    let dir = prepare_output(config)?;
    let report = mpc::bench(
        &params,
        &p,
        &spec,
        &settings,
        config.bench_samples,
        &t.init_nominal,
        &t.init_half_widths,
        config.eval_seed,
    )?;
    write_with(&dir.join("timing.csv"), |w| report.write_csv(w))?;
    let path = dir.join("bench_summary.json");
    fs::write(&path, report.summary_json() + "\n").map_err(io_err(&path))?;
    let s = &report.summary;
    println!(
        "fbsde {:.1} us (sd {:.1}), mpc {:.1} us (sd {:.1}), speedup {:.2}x over {} samples",
        s.fbsde.mean_ns / 1e3,
        s.fbsde.std_ns / 1e3,
        s.mpc.mean_ns / 1e3,
        s.mpc.std_ns / 1e3,
        s.speedup,
        s.samples
    );
    Ok(())
}
