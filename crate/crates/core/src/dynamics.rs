//! Parameter dynamics: control-affine models and fixed-step integrators.
//!
//! The moving sets are driven through their parameters, `λ̇ = f(λ) + g(λ)u`.
//! The only concrete vehicle here is a unicycle whose pose parameters are
//! `λ = (x_c1, x_c2, θ)`.  Input-output linearization about the offset
//! point `y = x_c + b(cosθ, sinθ)` turns the output dynamics into a clean
//! integrator `ẏ = u`, with the actual wheel commands recovered by
//! `(v, ω) = T⁻¹(θ)·u`.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::sets::ParamVector;
use crate::{Error, Result};

/// `λ̇ = f(λ) + g(λ)·u` with fixed dimensions.
pub trait ControlAffineDynamics {
    /// Length of `λ`.
    fn param_dim(&self) -> usize;
    /// Length of `u`.
    fn input_dim(&self) -> usize;
    /// Drift `f(λ)`.
    fn drift(&self, lambda: &ParamVector) -> Result<DVector<f64>>;
    /// Input matrix `g(λ)`, `param_dim × input_dim`.
    fn input_matrix(&self, lambda: &ParamVector) -> Result<DMatrix<f64>>;

    fn rate(&self, lambda: &ParamVector, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input has length {}, dynamics expect {}",
                u.len(),
                self.input_dim()
            )));
        }
        Ok(self.drift(lambda)? + self.input_matrix(lambda)? * u)
    }
}

/// Unicycle with linearization offset `b` (meters ahead of the axle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleAgent {
    b: f64,
}

impl UnicycleAgent {
    pub fn new(b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidInput(format!(
                "linearization offset b must be positive, got {b}"
            )));
        }
        Ok(Self { b })
    }

    pub fn offset(&self) -> f64 {
        self.b
    }

    /// Wheel commands for a linearized input: `(v, ω) = T⁻¹(θ)·u`.
    pub fn wheel_commands(&self, theta: f64, u: &DVector<f64>) -> Result<(f64, f64)> {
        if u.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "unicycle input must have length 2, got {}",
                u.len()
            )));
        }
        let t_inv = unicycle_transform(theta, self.b)?;
        let w = t_inv * DVector::from_row_slice(&[u[0], u[1]]);
        Ok((w[0], w[1]))
    }
}

/// `T⁻¹(θ) = [[cosθ, sinθ], [−sinθ/b, cosθ/b]]`, mapping the linearized
/// input to `(v, ω)`.
pub fn unicycle_transform(theta: f64, b: f64) -> Result<Matrix2<f64>> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::InvalidInput(format!(
            "linearization offset b must be positive, got {b}"
        )));
    }
    let (s, c) = theta.sin_cos();
    Ok(Matrix2::new(c, s, -s / b, c / b))
}

/// Input matrix `g̃(θ)` of the linearized unicycle: unicycle kinematics
/// `(ẋ_c1, ẋ_c2, θ̇) = (v cosθ, v sinθ, ω)` composed with `T⁻¹`, so that
/// `λ̇ = g̃(θ)·u` (the drift is identically zero).
pub fn modified_g(agent: &UnicycleAgent, theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    let b = agent.b;
    DMatrix::from_row_slice(3, 2, &[c * c, c * s, s * c, s * s, -s / b, c / b])
}

impl ControlAffineDynamics for UnicycleAgent {
    fn param_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, _lambda: &ParamVector) -> Result<DVector<f64>> {
        Ok(DVector::zeros(3))
    }

    fn input_matrix(&self, lambda: &ParamVector) -> Result<DMatrix<f64>> {
        let v = lambda.values();
        if v.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "unicycle parameters must be (x_c1, x_c2, theta), got length {}",
                v.len()
            )));
        }
        Ok(modified_g(self, v[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    Euler,
    Rk4,
}

/// One explicit step with the input held constant (zero-order hold).
pub fn integrate_step(
    dynamics: &dyn ControlAffineDynamics,
    lambda: &ParamVector,
    u: &DVector<f64>,
    dt: f64,
    method: IntegrationMethod,
) -> Result<ParamVector> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let x0 = lambda.values().clone();
    let next = match method {
        IntegrationMethod::Euler => {
            let k1 = dynamics.rate(lambda, u)?;
            &x0 + k1 * dt
        }
        IntegrationMethod::Rk4 => {
            let at = |x: &DVector<f64>| -> Result<DVector<f64>> {
                dynamics.rate(&lambda.with_values(x.clone())?, u)
            };
            let k1 = at(&x0)?;
            let k2 = at(&(&x0 + &k1 * (dt / 2.0)))?;
            let k3 = at(&(&x0 + &k2 * (dt / 2.0)))?;
            let k4 = at(&(&x0 + &k3 * dt))?;
            &x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    if !next.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure(
            "integration produced nonfinite parameters".into(),
        ));
    }
    lambda.with_values(next)
}
