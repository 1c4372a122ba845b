//! Quadratic running/terminal costs, the soft speed constraint, and the
//! Hamiltonian together with its closed-form minimizer.
//!
//! Two routes are provided for the pieces the rollout needs: plain scalar
//! functions on [`LipmState`] and batched [`Graph`] versions that act on a
//! `4 x M` block of states. They are checked against each other in tests.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen};
use thiserror::Error;

use crate::lipm::{CopControl, LipmParams, LipmState};
use crate::tensor::{Graph, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("control weight R must be symmetric positive definite")]
    ControlWeightNotPd,
    #[error("{0} must be symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("constraint weight mu must be >= 0, got {0}")]
    NegativeMu(f64),
}

/// Lower bound on planar CoM speed enforced by a squared-hinge penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedConstraint {
    pub v_min: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    q: [[f64; 4]; 4],
    r: [[f64; 2]; 2],
    qn: [[f64; 4]; 4],
    r_inv: [[f64; 2]; 2],
    pub x_ref: [f64; 4],
    pub constraint: Option<SpeedConstraint>,
}

/// Keeps the speed differentiable at a standstill.
const SPEED_EPS: f64 = 1e-12;

impl CostSpec {
    pub fn new(
        q: [[f64; 4]; 4],
        r: [[f64; 2]; 2],
        qn: [[f64; 4]; 4],
        x_ref: [f64; 4],
        constraint: Option<SpeedConstraint>,
    ) -> Result<Self, CostError> {
        let rm = Matrix2::from_fn(|i, j| r[i][j]);
        if (rm - rm.transpose()).abs().max() > 1e-12 {
            return Err(CostError::ControlWeightNotPd);
        }
        let inv = rm
            .cholesky()
            .ok_or(CostError::ControlWeightNotPd)?
            .inverse();
        check_psd("Q", &q)?;
        check_psd("Q_N", &qn)?;
        if let Some(c) = constraint {
            if !(c.mu >= 0.0) {
                return Err(CostError::NegativeMu(c.mu));
            }
        }
        Ok(Self {
            q,
            r,
            qn,
            r_inv: [[inv[(0, 0)], inv[(0, 1)]], [inv[(1, 0)], inv[(1, 1)]]],
            x_ref,
            constraint,
        })
    }

    /// Diagonal weights, the usual way the walking experiments are configured.
    pub fn diagonal(
        q: [f64; 4],
        r: [f64; 2],
        qn: [f64; 4],
        x_ref: [f64; 4],
        constraint: Option<SpeedConstraint>,
    ) -> Result<Self, CostError> {
        let d4 = |d: [f64; 4]| {
            let mut m = [[0.0; 4]; 4];
            for i in 0..4 {
                m[i][i] = d[i];
            }
            m
        };
        Self::new(d4(q), [[r[0], 0.0], [0.0, r[1]]], d4(qn), x_ref, constraint)
    }

    /// `Q = I`, `R = 100 I`, `Q_N = 100 I` against the nominal walking reference.
    pub fn walking_default(p: &LipmParams) -> Self {
        let v = p.nominal_velocity();
        Self::diagonal(
            [1.0; 4],
            [100.0; 2],
            [100.0; 4],
            [0.0, 0.0, v, v],
            None,
        )
        .expect("default weights are valid")
    }

    pub fn with_constraint(mut self, constraint: Option<SpeedConstraint>) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn q(&self) -> &[[f64; 4]; 4] {
        &self.q
    }

    pub fn r(&self) -> &[[f64; 2]; 2] {
        &self.r
    }

    pub fn qn(&self) -> &[[f64; 4]; 4] {
        &self.qn
    }

    pub fn r_inv(&self) -> &[[f64; 2]; 2] {
        &self.r_inv
    }

    /// `-R^{-1} G^T`, the 2x4 gain taking `V_x` to the optimal CoP.
    pub fn feedback_gain(&self, p: &LipmParams) -> Matrix {
        let g = p.control_matrix();
        let mut k = Matrix::zeros(2, 4);
        for i in 0..2 {
            for j in 0..4 {
                let gt_row_sum: f64 = (0..2).map(|l| self.r_inv[i][l] * g.get(j, l)).sum();
                k.set(i, j, -gt_row_sum);
            }
        }
        k
    }
}

fn check_psd(name: &'static str, m: &[[f64; 4]; 4]) -> Result<(), CostError> {
    let mm = Matrix4::from_fn(|i, j| m[i][j]);
    if (mm - mm.transpose()).abs().max() > 1e-12 {
        return Err(CostError::NotPsd(name));
    }
    let eig = SymmetricEigen::new(mm);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
        return Err(CostError::NotPsd(name));
    }
    Ok(())
}

fn quad4(m: &[[f64; 4]; 4], d: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            s += d[i] * m[i][j] * d[j];
        }
    }
    s
}

fn quad2(m: &[[f64; 2]; 2], u: &CopControl) -> f64 {
    let d = [u.px, u.py];
    let mut s = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            s += d[i] * m[i][j] * d[j];
        }
    }
    s
}

fn deviation(x: &LipmState, spec: &CostSpec) -> [f64; 4] {
    let a = x.to_array();
    [
        a[0] - spec.x_ref[0],
        a[1] - spec.x_ref[1],
        a[2] - spec.x_ref[2],
        a[3] - spec.x_ref[3],
    ]
}

fn penalty_speed(x: &LipmState) -> f64 {
    (x.vel_x * x.vel_x + x.vel_y * x.vel_y + SPEED_EPS).sqrt()
}

/// Squared-hinge speed penalty; zero when the constraint is inactive.
pub fn speed_penalty(x: &LipmState, spec: &CostSpec) -> f64 {
    match spec.constraint {
        Some(c) => {
            let gap = (c.v_min - penalty_speed(x)).max(0.0);
            c.mu * gap * gap
        }
        None => 0.0,
    }
}

pub fn state_cost(x: &LipmState, spec: &CostSpec) -> f64 {
    quad4(&spec.q, &deviation(x, spec)) + speed_penalty(x, spec)
}

/// `u^T R u`, the control cost as reported in metrics. The Hamiltonian uses
/// half of this.
pub fn control_cost(u: &CopControl, spec: &CostSpec) -> f64 {
    quad2(&spec.r, u)
}

pub fn terminal_cost(x: &LipmState, spec: &CostSpec) -> f64 {
    quad4(&spec.qn, &deviation(x, spec))
}

/// Unconstrained minimizer `u* = -R^{-1} G^T V_x`. Clipping is the caller's job.
pub fn optimal_control(vx: &[f64; 4], spec: &CostSpec, p: &LipmParams) -> CopControl {
    let k = spec.feedback_gain(p);
    let u = k.matmul(&Matrix::column(vx));
    CopControl::new(u.get(0, 0), u.get(1, 0))
}

/// `q(x) + (G u)^T V_x + 1/2 u^T R u`.
pub fn hamiltonian(x: &LipmState, vx: &[f64; 4], u: &CopControl, spec: &CostSpec, p: &LipmParams) -> f64 {
    let gu = p.control_matrix().matmul(&Matrix::column(&[u.px, u.py]));
    let coupling: f64 = gu.data().iter().zip(vx).map(|(a, b)| a * b).sum();
    state_cost(x, spec) + coupling + 0.5 * control_cost(u, spec)
}

fn mat4(m: &[[f64; 4]; 4]) -> Matrix {
    Matrix::from_rows(&[&m[0], &m[1], &m[2], &m[3]])
}

fn mat2(m: &[[f64; 2]; 2]) -> Matrix {
    Matrix::from_rows(&[&m[0], &m[1]])
}

/// Batched cost pieces on a computation graph. States are `4 x M`,
/// controls `2 x M`, and every cost comes back as a `1 x M` row.
pub struct GraphCost<N> {
    q: N,
    qn: N,
    r: N,
    neg_ref: N,
    vel_select: N,
    constraint: Option<SpeedConstraint>,
}

impl<N: Clone> GraphCost<N> {
    pub fn new<G: Graph<Node = N>>(g: &G, spec: &CostSpec) -> Self {
        let r = spec.x_ref;
        Self {
            q: g.constant(mat4(&spec.q)),
            qn: g.constant(mat4(&spec.qn)),
            r: g.constant(mat2(&spec.r)),
            neg_ref: g.constant(Matrix::column(&[-r[0], -r[1], -r[2], -r[3]])),
            vel_select: g.constant(Matrix::from_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]])),
            constraint: spec.constraint,
        }
    }

    fn quadratic<G: Graph<Node = N>>(&self, g: &G, w: &N, x: &N) -> N {
        let d = g.add_col(x, &self.neg_ref);
        g.col_sum(&g.mul(&d, &g.matmul(w, &d)))
    }

    pub fn penalty<G: Graph<Node = N>>(&self, g: &G, x: &N) -> Option<N> {
        let c = self.constraint?;
        let v = g.matmul(&self.vel_select, x);
        let m = g.value(x).cols();
        let eps = g.constant(Matrix::filled(1, m, SPEED_EPS));
        let speed = g.sqrt(&g.add(&g.col_sum(&g.mul(&v, &v)), &eps));
        let vmin = g.constant(Matrix::filled(1, m, c.v_min));
        let gap = g.relu(&g.sub(&vmin, &speed));
        Some(g.scale(&g.mul(&gap, &gap), c.mu))
    }

    pub fn state<G: Graph<Node = N>>(&self, g: &G, x: &N) -> N {
        let base = self.quadratic(g, &self.q, x);
        match self.penalty(g, x) {
            Some(p) => g.add(&base, &p),
            None => base,
        }
    }

    pub fn terminal<G: Graph<Node = N>>(&self, g: &G, x: &N) -> N {
        self.quadratic(g, &self.qn, x)
    }

    /// `u^T R u` per column.
    pub fn control<G: Graph<Node = N>>(&self, g: &G, u: &N) -> N {
        g.col_sum(&g.mul(u, &g.matmul(&self.r, u)))
    }
}
