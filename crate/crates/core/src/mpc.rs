//! Preview-horizon MPC baseline: a condensed box-constrained QP over the
//! explicit-Euler LIPM chain, solved with ADMM, plus the timing harness that
//! compares it with network inference.

use std::io::{self, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{optimal_control, CostSpec};
use crate::lipm::{clip_cop, CopControl, LipmParams, LipmState};
use crate::net::{initial_heads, NetParams};
use crate::tensor::{Eager, Matrix};
use crate::train::sample_initial_state;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("non-finite ADMM iterate at iteration {0}")]
    NonFinite(usize),
    #[error("factorization failed: H + rho I is not positive definite")]
    Factorization,
    #[error("invalid MPC setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcSettings {
    pub horizon: usize,
    /// Half-width of the CoP box imposed in the QP.
    pub cop_bound: f64,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Re-solve on the detected active set after ADMM stops.
    pub polish: bool,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 60,
            cop_bound: 0.075,
            rho: 1.0,
            tol: 1e-6,
            max_iter: 10_000,
            polish: true,
        }
    }
}

impl MpcSettings {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Invalid("horizon must be >= 1".into()));
        }
        if !(self.cop_bound > 0.0) || !(self.rho > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(MpcError::Invalid(
                "cop_bound, rho, tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `min 1/2 u^T H u + f^T u` subject to `lb <= u <= ub`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub polished: bool,
    pub solve_ns: u64,
}

fn dmat(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn dmat4(m: &[[f64; 4]; 4]) -> DMatrix<f64> {
    DMatrix::from_fn(4, 4, |i, j| m[i][j])
}

/// Discrete preview chain `x_{i+1} = A_d x_i + B_d u_i`.
pub fn discrete_model(p: &LipmParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::identity(4, 4) + dmat(&p.drift_matrix()) * p.dt;
    let b = dmat(&p.control_matrix()) * p.dt;
    (a, b)
}

/// Stacked prediction `X = Phi x0 + Gamma U` for states `x_1..x_N`.
pub fn prediction_matrices(p: &LipmParams, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b) = discrete_model(p);
    let n = horizon;
    let mut phi = DMatrix::zeros(4 * n, 4);
    let mut gamma = DMatrix::zeros(4 * n, 2 * n);
    // powers[k] = A^k B
    let mut powers = Vec::with_capacity(n);
    let mut apow = DMatrix::identity(4, 4);
    for i in 0..n {
        powers.push(&apow * &b);
        apow = &a * &apow;
        phi.view_mut((4 * i, 0), (4, 4)).copy_from(&apow);
    }
    for i in 0..n {
        for j in 0..=i {
            gamma.view_mut((4 * i, 2 * j), (4, 2)).copy_from(&powers[i - j]);
        }
    }
    (phi, gamma)
}

/// Condenses the horizon-`N` tracking problem: stage weight `Q` on
/// `x_1..x_N` with `Q_N` added at the last stage, `u^T R u` on every control.
pub fn build_condensed_qp(x0: &LipmState, p: &LipmParams, spec: &CostSpec, settings: &MpcSettings) -> QpProblem {
    let n = settings.horizon;
    let (phi, gamma) = prediction_matrices(p, n);
    let q = dmat4(spec.q());
    let q_last = &q + dmat4(spec.qn());
    let r = DMatrix::from_fn(2, 2, |i, j| spec.r()[i][j]);

    // Qbar * Gamma and Qbar * (Phi x0 - Xref), block by block
    let x0v = DVector::from_row_slice(&x0.to_array());
    let xref = DVector::from_row_slice(&spec.x_ref);
    let free = &phi * x0v;
    let mut qg = DMatrix::zeros(4 * n, 2 * n);
    let mut qe = DVector::zeros(4 * n);
    for i in 0..n {
        let w = if i + 1 == n { &q_last } else { &q };
        qg.view_mut((4 * i, 0), (4, 2 * n))
            .copy_from(&(w * gamma.view((4 * i, 0), (4, 2 * n))));
        let e = free.rows(4 * i, 4) - &xref;
        qe.rows_mut(4 * i, 4).copy_from(&(w * e));
    }
    let mut h = gamma.transpose() * &qg;
    for k in 0..n {
        let mut blk = h.view_mut((2 * k, 2 * k), (2, 2));
        blk += &r;
    }
    h *= 2.0;
    // exact symmetry
    let h = (&h + h.transpose()) * 0.5;
    let f = gamma.transpose() * qe * 2.0;
    QpProblem {
        h,
        f,
        lb: DVector::from_element(2 * n, -settings.cop_bound),
        ub: DVector::from_element(2 * n, settings.cop_bound),
        horizon: n,
    }
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lb[i], self.ub[i]))
    }

    /// `|| P(u - (H u + f)) - u ||_inf`, zero exactly at the box-QP optimum.
    pub fn kkt_residual(&self, u: &DVector<f64>) -> f64 {
        let grad = &self.h * u + &self.f;
        (self.project(&(u - grad)) - u).amax()
    }
}

fn solve_on_active_set(qp: &QpProblem, z: &DVector<f64>) -> Option<DVector<f64>> {
    let n = qp.dim();
    let grad = &qp.h * z + &qp.f;
    let scale = 1e-9 * (qp.ub.amax() + qp.lb.amax()).max(1.0);
    let mut fixed = vec![None; n];
    for i in 0..n {
        if z[i] <= qp.lb[i] + scale && grad[i] >= 0.0 {
            fixed[i] = Some(qp.lb[i]);
        } else if z[i] >= qp.ub[i] - scale && grad[i] <= 0.0 {
            fixed[i] = Some(qp.ub[i]);
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
    let mut u = DVector::from_fn(n, |i, _| fixed[i].unwrap_or(0.0));
    if !free.is_empty() {
        let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| qp.h[(free[a], free[b])]);
        let rhs = DVector::from_fn(free.len(), |a, _| {
            let i = free[a];
            let coupled: f64 = (0..n).filter_map(|j| fixed[j].map(|v| qp.h[(i, j)] * v)).sum();
            -qp.f[i] - coupled
        });
        let sol = hff.cholesky()?.solve(&rhs);
        for (a, &i) in free.iter().enumerate() {
            u[i] = sol[a];
        }
    }
    let feasible = (0..n).all(|i| u[i] >= qp.lb[i] - 1e-12 && u[i] <= qp.ub[i] + 1e-12);
    feasible.then(|| qp.project(&u))
}

/// Scaled-form ADMM on the split `u = z`, `z` in the box, run on the
/// Jacobi-equilibrated problem (unit Hessian diagonal). `H + rho I` is
/// factored once. On `max_iter` the last feasible iterate is returned with
/// `converged = false`.
pub fn solve_qp_admm(qp: &QpProblem, settings: &MpcSettings) -> Result<QpSolution, MpcError> {
    let start = Instant::now();
    let n = qp.dim();
    let rho = settings.rho;
    // u = D v with D = diag(H)^{-1/2}
    let d = DVector::from_fn(n, |i, _| {
        let hii = qp.h[(i, i)];
        if hii > 0.0 { 1.0 / hii.sqrt() } else { 1.0 }
    });
    let hs = DMatrix::from_fn(n, n, |i, j| d[i] * qp.h[(i, j)] * d[j]);
    let fs = qp.f.component_mul(&d);
    let lbs = qp.lb.component_div(&d);
    let ubs = qp.ub.component_div(&d);
    let clip = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[i].clamp(lbs[i], ubs[i]));

    let chol = (&hs + DMatrix::identity(n, n) * rho)
        .cholesky()
        .ok_or(MpcError::Factorization)?;
    let mut z = clip(&DVector::zeros(n));
    let mut w = DVector::zeros(n);
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for k in 0..settings.max_iter {
        iterations = k + 1;
        let rhs = (&z - &w) * rho - &fs;
        let u = chol.solve(&rhs);
        let z_new = clip(&(&u + &w));
        w += &u - &z_new;
        primal = (&u - &z_new).amax();
        dual = rho * (&z_new - &z).amax();
        z = z_new;
        if !primal.is_finite() || !dual.is_finite() {
            return Err(MpcError::NonFinite(iterations));
        }
        if primal < settings.tol && dual < settings.tol {
            converged = true;
            break;
        }
    }
    let mut u = qp.project(&z.component_mul(&d));
    let mut kkt = qp.kkt_residual(&u);
    let mut polished = false;
    if settings.polish {
        if let Some(candidate) = solve_on_active_set(qp, &u) {
            let candidate_kkt = qp.kkt_residual(&candidate);
            if candidate_kkt < kkt {
                u = candidate;
                kkt = candidate_kkt;
                polished = true;
            }
        }
    }
    Ok(QpSolution {
        u,
        iterations,
        primal_residual: primal,
        dual_residual: dual,
        kkt_residual: kkt,
        converged,
        polished,
        solve_ns: start.elapsed().as_nanos() as u64,
    })
}

/// Receding-horizon control: the first CoP of the optimal preview plan.
pub fn mpc_step(x0: &LipmState, p: &LipmParams, spec: &CostSpec, settings: &MpcSettings) -> Result<CopControl, MpcError> {
    let qp = build_condensed_qp(x0, p, spec, settings);
    let sol = solve_qp_admm(&qp, settings)?;
    Ok(CopControl::new(sol.u[0], sol.u[1]))
}

/// Noiseless closed loop under MPC for `ticks` steps, starting at `x0`.
pub fn closed_loop(
    x0: &LipmState,
    ticks: usize,
    p: &LipmParams,
    spec: &CostSpec,
    settings: &MpcSettings,
) -> Result<Vec<LipmState>, MpcError> {
    let mut xs = vec![*x0];
    for _ in 0..ticks {
        let x = *xs.last().expect("non-empty");
        let u = mpc_step(&x, p, spec, settings)?;
        xs.push(crate::lipm::step_euler_maruyama(&x, &u, [0.0; 2], p));
    }
    Ok(xs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fbsde,
    Mpc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbsde => "fbsde",
            Method::Mpc => "mpc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean_ns: f64,
    pub std_ns: f64,
}

impl TimingStats {
    pub fn of(samples: &[u64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
        let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean_ns: mean,
            std_ns: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub samples: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub fbsde: TimingStats,
    pub mpc: TimingStats,
    /// Mean MPC time over mean network time.
    pub speedup: f64,
    pub serial: bool,
    pub mpc_converged: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub fbsde_ns: Vec<u64>,
    pub mpc_ns: Vec<u64>,
    pub summary: BenchSummary,
}

pub const TIMING_HEADER: &str = "sample_index,method,nanoseconds";

impl BenchReport {
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "{TIMING_HEADER}")?;
        for (method, times) in [(Method::Fbsde, &self.fbsde_ns), (Method::Mpc, &self.mpc_ns)] {
            for (i, t) in times.iter().enumerate() {
                writeln!(w, "{i},{},{t}", method.name())?;
            }
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

/// Times one network control computation (an LSTM tick plus the feedback
/// law and clip) against one MPC solve at each of `n_samples` random states.
/// Runs strictly in sequence.
#[allow(clippy::too_many_arguments)]
pub fn bench(
    params: &NetParams,
    p: &LipmParams,
    spec: &CostSpec,
    settings: &MpcSettings,
    n_samples: usize,
    nominal: &LipmState,
    half_widths: &[f64; 4],
    seed: u64,
) -> Result<BenchReport, MpcError> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = params.bind(&Eager);
    let mut fbsde_ns = Vec::with_capacity(n_samples);
    let mut mpc_ns = Vec::with_capacity(n_samples);
    let mut converged = 0;
    let mut sink = 0.0;
    for _ in 0..n_samples {
        let x = sample_initial_state(nominal, half_widths, &mut rng);
        let (_, state) = initial_heads(&x, params);
        let input = Matrix::column(&x.to_array());

        let t0 = Instant::now();
        let (vx, _) = net.step(&Eager, &input, &state);
        let d = vx.data();
        let u = clip_cop(&optimal_control(&[d[0], d[1], d[2], d[3]], spec, p), p);
        fbsde_ns.push(t0.elapsed().as_nanos() as u64);
        sink += u.px;

        let t1 = Instant::now();
        let qp = build_condensed_qp(&x, p, spec, settings);
        let sol = solve_qp_admm(&qp, settings)?;
        mpc_ns.push(t1.elapsed().as_nanos() as u64);
        sink += sol.u[0];
        converged += usize::from(sol.converged);
    }
    std::hint::black_box(sink);
    let fbsde = TimingStats::of(&fbsde_ns);
    let mpc = TimingStats::of(&mpc_ns);
    Ok(BenchReport {
        summary: BenchSummary {
            samples: n_samples,
            horizon: settings.horizon,
            state_dim: 4,
            fbsde,
            mpc,
            speedup: mpc.mean_ns / fbsde.mean_ns,
            serial: true,
            mpc_converged: converged,
            note: "420 instances is the reference sample count; runs were serial".into(),
        },
        fbsde_ns,
        mpc_ns,
    })
}
