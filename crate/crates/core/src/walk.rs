//! Multi-footstep walking with the trained policy.
//!
//! Each footstep is one inference rollout in the foot's local frame. At the
//! boundary the positions are reset to the fixed nominal start and the
//! velocities carry over.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost::CostSpec;
use crate::fbsde::{rollout_batch, BatchNoise, FbsdeError};
use crate::lipm::{frame_reset, CopControl, LipmParams, LipmState};
use crate::net::NetParams;

/// Local positions beyond this are treated as a fall and stop the walk.
pub const DIVERGENCE_LIMIT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub tick: usize,
    pub footstep: usize,
    pub local_tick: usize,
    pub state: LipmState,
    pub cop: CopControl,
    pub cop_raw: CopControl,
    pub value: f64,
    pub dw: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootstepRecord {
    pub footstep: usize,
    pub start: LipmState,
    /// Terminal state in the old frame, before the reset.
    pub end: LipmState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrace {
    pub rows: Vec<TraceRow>,
    pub footsteps: Vec<FootstepRecord>,
    /// Footstep at which the walk left the divergence limit, if it did.
    pub diverged_at: Option<usize>,
}

pub const TRACE_HEADER: &str =
    "tick,footstep,local_tick,pos_x,pos_y,vel_x,vel_y,cop_x,cop_y,cop_raw_x,cop_raw_y,value,dw_x,dw_y";
pub const FOOTSTEP_HEADER: &str = "footstep,v_start_x,v_start_y,v_end_x,v_end_y,end_pos_x,end_pos_y";

impl WalkTrace {
    pub fn max_abs_position(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.state.pos_x.abs().max(r.state.pos_y.abs()))
            .fold(0.0, f64::max)
    }

    /// Bounded: every tick finite and inside `limit`, and no divergence.
    pub fn is_bounded(&self, limit: f64) -> bool {
        self.diverged_at.is_none()
            && self
                .rows
                .iter()
                .all(|r| r.state.is_finite() && r.state.pos_x.abs() < limit && r.state.pos_y.abs() < limit)
    }

    pub fn cop_within(&self, half: f64) -> bool {
        self.rows.iter().all(|r| r.cop.px.abs() <= half && r.cop.py.abs() <= half)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            let s = r.state;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.tick,
                r.footstep,
                r.local_tick,
                s.pos_x,
                s.pos_y,
                s.vel_x,
                s.vel_y,
                r.cop.px,
                r.cop.py,
                r.cop_raw.px,
                r.cop_raw.py,
                r.value,
                r.dw[0],
                r.dw[1]
            )?;
        }
        Ok(())
    }

    pub fn write_footsteps_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{FOOTSTEP_HEADER}")?;
        for f in &self.footsteps {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                f.footstep, f.start.vel_x, f.start.vel_y, f.end.vel_x, f.end.vel_y, f.end.pos_x, f.end.pos_y
            )?;
        }
        Ok(())
    }
}

/// Walks `n_steps` footsteps from `start`. Noise is drawn per footstep from
/// streams derived from `seed` whenever `p.noise_scale > 0`.
pub fn walk(
    params: &NetParams,
    p: &LipmParams,
    spec: &CostSpec,
    start: &LipmState,
    nominal_start: (f64, f64),
    n_steps: usize,
    seed: u64,
) -> Result<WalkTrace, FbsdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.steps_per_footstep;
    let mut trace = WalkTrace {
        rows: Vec::with_capacity(n_steps * n),
        footsteps: Vec::with_capacity(n_steps),
        diverged_at: None,
    };
    let mut x = *start;
    for footstep in 0..n_steps {
        let stream: u64 = rng.random();
        let noise = if p.noise_scale > 0.0 {
            BatchNoise::from_seeds(&[stream], n, p.dt)
        } else {
            BatchNoise::zeros(1, n)
        };
        let r = match rollout_batch(std::slice::from_ref(&x), params, spec, p, &noise, true) {
            Ok(t) => t.sample(0),
            Err(FbsdeError::NonFinite { .. }) => {
                trace.diverged_at = Some(footstep);
                break;
            }
            Err(e) => return Err(e),
        };
        for k in 0..n {
            trace.rows.push(TraceRow {
                tick: footstep * n + k,
                footstep,
                local_tick: k,
                state: r.x[k],
                cop: r.u[k],
                cop_raw: r.u_raw[k],
                value: r.y[k],
                dw: r.dw[k],
            });
        }
        let end = r.x[n];
        trace.footsteps.push(FootstepRecord {
            footstep,
            start: x,
            end,
        });
        let escaped = r
            .x
            .iter()
            .any(|s| !s.is_finite() || s.pos_x.abs() > DIVERGENCE_LIMIT || s.pos_y.abs() > DIVERGENCE_LIMIT);
        if escaped {
            trace.diverged_at = Some(footstep);
            break;
        }
        x = frame_reset(&end, nominal_start);
    }
    Ok(trace)
}

/// Speed statistics of one policy walking under the speed constraint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub label: String,
    pub v_min: f64,
    pub ticks: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per local tick, minimum and maximum speed over all footsteps.
    pub envelope_min: Vec<f64>,
    pub envelope_max: Vec<f64>,
    pub footsteps_completed: usize,
    pub diverged_at: Option<usize>,
}

impl ConstraintReport {
    /// A walk that diverged counts every missing tick as a violation.
    pub fn from_trace(label: &str, trace: &WalkTrace, v_min: f64, n_steps: usize, ticks_per_step: usize) -> Self {
        let speeds: Vec<f64> = trace.rows.iter().map(|r| r.state.speed()).collect();
        let expected = n_steps * ticks_per_step;
        let missing = expected - speeds.len().min(expected);
        let violations = speeds.iter().filter(|&&s| !(s >= v_min)).count() + missing;
        let mut envelope_min = vec![f64::INFINITY; ticks_per_step];
        let mut envelope_max = vec![f64::NEG_INFINITY; ticks_per_step];
        for r in &trace.rows {
            let s = r.state.speed();
            envelope_min[r.local_tick] = envelope_min[r.local_tick].min(s);
            envelope_max[r.local_tick] = envelope_max[r.local_tick].max(s);
        }
        Self {
            label: label.to_string(),
            v_min,
            ticks: expected,
            violations,
            violation_fraction: violations as f64 / expected.max(1) as f64,
            min_speed: speeds.iter().copied().fold(f64::INFINITY, f64::min),
            max_speed: speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            envelope_min,
            envelope_max,
            footsteps_completed: trace.footsteps.len(),
            diverged_at: trace.diverged_at,
        }
    }
}

pub const SPEED_HEADER: &str = "policy,tick,footstep,local_tick,speed,v_min";
pub const ENVELOPE_HEADER: &str = "policy,local_tick,speed_min,speed_max,v_min";

pub fn write_speed_csv(w: &mut impl Write, label: &str, trace: &WalkTrace, v_min: f64) -> io::Result<()> {
    for r in &trace.rows {
        writeln!(w, "{label},{},{},{},{},{v_min}", r.tick, r.footstep, r.local_tick, r.state.speed())?;
    }
    Ok(())
}

pub fn write_envelope_csv(w: &mut impl Write, report: &ConstraintReport) -> io::Result<()> {
    for (k, (lo, hi)) in report.envelope_min.iter().zip(&report.envelope_max).enumerate() {
        writeln!(w, "{},{k},{lo},{hi},{}", report.label, report.v_min)?;
    }
    Ok(())
}
