//! Linear inverted pendulum dynamics in a footstep-local frame.
//!
//! The state is `[c_x, c_y, v_x, v_y]` and the control is the center of
//! pressure `p`. With `omega_sq = g / c_z` the continuous dynamics are
//! `c'' = omega_sq * (c - p)`, driven by Brownian noise on the acceleration
//! channels only.

use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum LipmError {
    #[error("invalid LIPM parameter `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },
}

/// Physical and discretization constants of the walking model.
#[derive(Debug, Clone, PartialEq)]
pub struct LipmParams {
    com_height: f64,
    gravity: f64,
    omega_sq: f64,
    pub foot_half_x: f64,
    pub foot_half_y: f64,
    /// Half-width of the box the executed CoP is clipped to.
    pub cop_clip_half: f64,
    pub dt: f64,
    pub steps_per_footstep: usize,
    /// Per-axis displacement between consecutive footsteps.
    pub step_displacement: f64,
    /// Multiplier on the diffusion `diag[0 0 1 1]`; zero gives the noiseless model.
    pub noise_scale: f64,
}

impl Default for LipmParams {
    fn default() -> Self {
        Self::new(1.0, 9.81, 0.075, 0.075, 0.15, 0.02, 35, 0.8, 1.0)
            .expect("default LIPM parameters are valid")
    }
}

impl LipmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        com_height: f64,
        gravity: f64,
        foot_half_x: f64,
        foot_half_y: f64,
        cop_clip_half: f64,
        dt: f64,
        steps_per_footstep: usize,
        step_displacement: f64,
        noise_scale: f64,
    ) -> Result<Self, LipmError> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LipmError::Invalid {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                })
            }
        };
        positive("com_height", com_height)?;
        positive("gravity", gravity)?;
        positive("foot_half_x", foot_half_x)?;
        positive("foot_half_y", foot_half_y)?;
        positive("cop_clip_half", cop_clip_half)?;
        positive("dt", dt)?;
        if steps_per_footstep == 0 {
            return Err(LipmError::Invalid {
                name: "steps_per_footstep",
                reason: "must be at least 1".into(),
            });
        }
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(LipmError::Invalid {
                name: "noise_scale",
                reason: format!("must be non-negative, got {noise_scale}"),
            });
        }
        Ok(Self {
            com_height,
            gravity,
            omega_sq: gravity / com_height,
            foot_half_x,
            foot_half_y,
            cop_clip_half,
            dt,
            steps_per_footstep,
            step_displacement,
            noise_scale,
        })
    }

    pub fn com_height(&self) -> f64 {
        self.com_height
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn omega_sq(&self) -> f64 {
        self.omega_sq
    }

    pub fn omega(&self) -> f64 {
        self.omega_sq.sqrt()
    }

    pub fn step_duration(&self) -> f64 {
        self.dt * self.steps_per_footstep as f64
    }

    /// Walking speed per axis that covers one step displacement per footstep.
    pub fn nominal_velocity(&self) -> f64 {
        self.step_displacement / self.step_duration()
    }

    /// Drift matrix `[[0, I], [omega_sq I, 0]]`.
    pub fn drift_matrix(&self) -> Matrix {
        let w = self.omega_sq;
        Matrix::from_rows(&[
            &[0.0, 0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0, 1.0],
            &[w, 0.0, 0.0, 0.0],
            &[0.0, w, 0.0, 0.0],
        ])
    }

    /// Control influence `G = [[0], [-omega_sq I]]`, mapping CoP to state rate.
    pub fn control_matrix(&self) -> Matrix {
        let w = self.omega_sq;
        Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[-w, 0.0], &[0.0, -w]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipmState {
    pub pos_x: f64,
    pub pos_y: f64,
    pub vel_x: f64,
    pub vel_y: f64,
}

impl LipmState {
    pub const fn new(pos_x: f64, pos_y: f64, vel_x: f64, vel_y: f64) -> Self {
        Self {
            pos_x,
            pos_y,
            vel_x,
            vel_y,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.pos_x, self.pos_y, self.vel_x, self.vel_y]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn speed(&self) -> f64 {
        self.vel_x.hypot(self.vel_y)
    }

    fn axpy(self, k: f64, other: LipmState) -> LipmState {
        LipmState::new(
            self.pos_x + k * other.pos_x,
            self.pos_y + k * other.pos_y,
            self.vel_x + k * other.vel_x,
            self.vel_y + k * other.vel_y,
        )
    }
}

/// Center of pressure in the footstep-local frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CopControl {
    pub px: f64,
    pub py: f64,
}

impl CopControl {
    pub const fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }
}

/// Uncontrolled state rate `[v_x, v_y, omega_sq c_x, omega_sq c_y]`.
pub fn drift(x: &LipmState, p: &LipmParams) -> LipmState {
    LipmState::new(x.vel_x, x.vel_y, p.omega_sq * x.pos_x, p.omega_sq * x.pos_y)
}

pub fn control_influence(u: &CopControl, p: &LipmParams) -> LipmState {
    LipmState::new(0.0, 0.0, -p.omega_sq * u.px, -p.omega_sq * u.py)
}

/// One explicit Euler–Maruyama step. `dw` holds the two Brownian increments
/// for the acceleration channels; pass zeros for the noiseless model.
pub fn step_euler_maruyama(x: &LipmState, u: &CopControl, dw: [f64; 2], p: &LipmParams) -> LipmState {
    let f = drift(x, p);
    let g = control_influence(u, p);
    let rate = f.axpy(1.0, g);
    let next = x.axpy(p.dt, rate);
    LipmState::new(
        next.pos_x,
        next.pos_y,
        next.vel_x + p.noise_scale * dw[0],
        next.vel_y + p.noise_scale * dw[1],
    )
}

/// Closed-form noiseless evolution over time `t` with the CoP held at `u`.
pub fn analytic_step(x: &LipmState, u: &CopControl, t: f64, p: &LipmParams) -> LipmState {
    let w = p.omega();
    let (ch, sh) = ((w * t).cosh(), (w * t).sinh());
    let axis = |c0: f64, v0: f64, cop: f64| {
        let c = cop + (c0 - cop) * ch + v0 / w * sh;
        let v = w * (c0 - cop) * sh + v0 * ch;
        (c, v)
    };
    let (cx, vx) = axis(x.pos_x, x.vel_x, u.px);
    let (cy, vy) = axis(x.pos_y, x.vel_y, u.py);
    LipmState::new(cx, cy, vx, vy)
}

pub fn clip_cop(u: &CopControl, p: &LipmParams) -> CopControl {
    let h = p.cop_clip_half;
    CopControl::new(u.px.clamp(-h, h), u.py.clamp(-h, h))
}

/// Re-expresses the terminal state of a footstep in the next footstep's frame:
/// positions jump to the fixed nominal start, velocities carry over.
pub fn frame_reset(x_end: &LipmState, nominal_start: (f64, f64)) -> LipmState {
    LipmState::new(nominal_start.0, nominal_start.1, x_end.vel_x, x_end.vel_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> LipmParams {
        LipmParams::default()
    }

    fn close(a: LipmState, b: [f64; 4]) {
        for (x, y) in a.to_array().iter().zip(b) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn drift_examples() {
        let p = params();
        close(drift(&LipmState::default(), &p), [0.0; 4]);
        close(
            drift(&LipmState::new(0.1, 0.1, 1.0, 1.0), &p),
            [1.0, 1.0, 0.981, 0.981],
        );
        close(
            drift(&LipmState::new(-0.4, -0.4, 1.1429, 1.1429), &p),
            [1.1429, 1.1429, -3.924, -3.924],
        );
    }

    #[test]
    fn control_influence_examples() {
        let p = params();
        close(control_influence(&CopControl::default(), &p), [0.0; 4]);
        close(
            control_influence(&CopControl::new(0.075, 0.0), &p),
            [0.0, 0.0, -0.73575, 0.0],
        );
        close(
            control_influence(&CopControl::new(-0.15, 0.15), &p),
            [0.0, 0.0, 1.4715, -1.4715],
        );
    }

    #[test]
    fn euler_maruyama_examples() {
        let p = params();
        let zero = CopControl::default();
        close(step_euler_maruyama(&LipmState::default(), &zero, [0.0, 0.0], &p), [0.0; 4]);
        close(
            step_euler_maruyama(&LipmState::new(0.0, 0.0, 1.0, 0.0), &zero, [0.0, 0.0], &p),
            [0.02, 0.0, 1.0, 0.0],
        );
        // 9.81 * 0.1 * 0.02 = 0.01962 of drift plus the 0.01 increment
        close(
            step_euler_maruyama(&LipmState::new(0.1, 0.0, 0.0, 0.0), &zero, [0.01, 0.0], &p),
            [0.1, 0.0, 0.02962, 0.0],
        );
    }

    #[test]
    fn analytic_examples() {
        let p = params();
        let x = LipmState::new(0.3, -0.2, 0.5, 1.0);
        let u = CopControl::new(0.05, -0.05);
        assert_eq!(analytic_step(&x, &u, 0.0, &p), x);

        // omega = sqrt(9.81) = 3.13209
        let s = analytic_step(&LipmState::new(0.0, 0.0, 1.0, 0.0), &CopControl::default(), 0.7, &p);
        let wt = 9.81f64.sqrt() * 0.7;
        assert_relative_eq!(s.pos_x, wt.sinh() / 9.81f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s.vel_x, wt.cosh(), epsilon = 1e-12);
        // quoted reference values are only accurate to about 1e-3
        assert_relative_eq!(s.pos_x, 1.4122, epsilon = 1e-3);
        assert_relative_eq!(s.vel_x, 4.5353, epsilon = 1e-3);

        let over = LipmState::new(0.07, -0.03, 0.0, 0.0);
        let eq = analytic_step(&over, &CopControl::new(0.07, -0.03), 1.3, &p);
        close(eq, [0.07, -0.03, 0.0, 0.0]);
    }

    #[test]
    fn clip_examples() {
        let p = params();
        assert_eq!(clip_cop(&CopControl::new(0.2, 0.0), &p), CopControl::new(0.15, 0.0));
        assert_eq!(clip_cop(&CopControl::new(0.1, -0.1), &p), CopControl::new(0.1, -0.1));
        assert_eq!(clip_cop(&CopControl::new(-0.3, 0.3), &p), CopControl::new(-0.15, 0.15));
    }

    #[test]
    fn frame_reset_examples() {
        close(
            frame_reset(&LipmState::new(0.4, 0.4, 1.2, 1.2), (-0.4, -0.4)),
            [-0.4, -0.4, 1.2, 1.2],
        );
        close(
            frame_reset(&LipmState::new(0.35, 0.42, 0.9, 1.3), (-0.4, -0.4)),
            [-0.4, -0.4, 0.9, 1.3],
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LipmParams::new(0.0, 9.81, 0.075, 0.075, 0.15, 0.02, 35, 0.8, 1.0).is_err());
        assert!(LipmParams::new(1.0, 9.81, 0.075, 0.075, 0.15, 0.02, 0, 0.8, 1.0).is_err());
        assert!(LipmParams::new(1.0, 9.81, 0.075, 0.075, 0.15, -0.1, 35, 0.8, 1.0).is_err());
    }

    #[test]
    fn matrices_agree_with_pointwise_rates() {
        let p = params();
        let x = LipmState::new(0.3, -0.1, 0.7, 1.2);
        let u = CopControl::new(0.04, -0.02);
        let rate = p
            .drift_matrix()
            .matmul(&Matrix::column(&x.to_array()))
            .add(&p.control_matrix().matmul(&Matrix::column(&[u.px, u.py])));
        let expected = drift(&x, &p).axpy(1.0, control_influence(&u, &p));
        for (a, b) in rate.data().iter().zip(expected.to_array()) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    fn finite() -> impl Strategy<Value = f64> {
        -5.0..5.0f64
    }

    proptest! {
        #[test]
        fn noise_and_control_never_move_positions(
            c in prop::array::uniform4(finite()),
            px in finite(), py in finite(), d1 in finite(), d2 in finite(),
        ) {
            let p = params();
            let x = LipmState::from_array(c);
            let a = step_euler_maruyama(&x, &CopControl::new(px, py), [d1, d2], &p);
            let b = step_euler_maruyama(&x, &CopControl::default(), [0.0, 0.0], &p);
            prop_assert_eq!(a.pos_x, b.pos_x);
            prop_assert_eq!(a.pos_y, b.pos_y);
        }

        #[test]
        fn clip_is_a_projection(px in -1.0..1.0f64, py in -1.0..1.0f64) {
            let p = params();
            let once = clip_cop(&CopControl::new(px, py), &p);
            prop_assert_eq!(clip_cop(&once, &p), once);
            prop_assert!(once.px.abs() <= p.cop_clip_half && once.py.abs() <= p.cop_clip_half);
        }

        #[test]
        fn frame_reset_is_idempotent_and_keeps_velocity(c in prop::array::uniform4(finite())) {
            let x = LipmState::from_array(c);
            let once = frame_reset(&x, (-0.4, -0.4));
            prop_assert_eq!(frame_reset(&once, (-0.4, -0.4)), once);
            prop_assert_eq!(once.vel_x.to_bits(), x.vel_x.to_bits());
            prop_assert_eq!(once.vel_y.to_bits(), x.vel_y.to_bits());
        }
    }
}
