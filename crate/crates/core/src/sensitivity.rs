//! Gradients of the smoothed distance with respect to both sets' parameters.
//!
//! At a certified optimum of the distance program the KKT conditions hold
//! with both constraints active and strictly positive multipliers, so the
//! implicit function theorem applies to the KKT map
//!
//! ```text
//! G(ν, θ) = [ (z_E − z_j) + μ₁ ∇_z c₁ ;
//!             (z_j − z_E) + μ₂ ∇_z c₂ ;
//!             μ₁ c₁ ; μ₂ c₂ ] = 0,      ν = (z_E, z_j, μ₁, μ₂),
//! ```
//!
//! giving `∂ν/∂θ = −(∂G/∂ν)⁻¹ ∂G/∂θ` and, by the chain rule through the
//! objective, `∂d/∂θ = (z_E − z_j)ᵀ (∂z_E/∂θ − ∂z_j/∂θ)`.
//!
//! The Jacobian `∂G/∂ν = [[A, Bᵀ], [diag(μ)·B, D]]` is factorized with
//! partial pivoting; `D` (the diagonal of constraint values, active to
//! 1e-6) is replaced by exact zeros so the factorization sees the block
//! structure the optimality theory analyzes instead of activity noise.
//! Degenerate geometries — exactly parallel flat faces, where the smoothed
//! boundary has underflow-level curvature in the tangential direction —
//! make the Jacobian singular to working precision; those are solved by a
//! truncated-SVD minimum-norm fallback, which leaves the distance gradient
//! intact because the null direction moves both witness points identically
//! and cancels from `∂z_E/∂θ − ∂z_j/∂θ`.

use nalgebra::{DMatrix, DVector};

use crate::distance::{eval_membership_full, DistanceProblem, DistanceSolution, DistanceStatus};
use crate::{Error, Result};

/// Assembled blocks of the implicit-function linear system.
#[derive(Debug, Clone)]
pub struct KktSystem {
    /// `(2N×2N)` Lagrangian Hessian in the primal variables:
    /// `[[I,−I],[−I,I]] + blkdiag(μ₁ ∇²c₁, μ₂ ∇²c₂)`.  Symmetric positive
    /// definite when the constraint stacks have full-rank `x`-Jacobians.
    pub a: DMatrix<f64>,
    /// `(2×2N)` stacked constraint gradients, block diagonal across the two
    /// points.
    pub b: DMatrix<f64>,
    /// Multiplier diagonal `(μ₁, μ₂)`.
    pub c: [f64; 2],
    /// Constraint-value diagonal; activity bounds it by 1e-6 in magnitude.
    pub d: [f64; 2],
    /// `((2N+2) × (M_E+M_j))` parameter-direction derivative of the KKT map.
    pub g_theta: DMatrix<f64>,
    /// Number of leading `g_theta` columns belonging to the ego parameters.
    pub param_split: usize,
    ambient: usize,
}

/// `∂d/∂θ` split by owner, plus the factorization conditioning.
#[derive(Debug, Clone)]
pub struct DistanceGradient {
    pub d_dlambda_e: DVector<f64>,
    pub d_dlambda_j: DVector<f64>,
    /// 1-norm condition estimate of the KKT Jacobian; `∞` when singular to
    /// working precision (minimum-norm fallback was used).
    pub condition_estimate: f64,
}

/// Builds the linear system whose solution differentiates the optimum.
///
/// Requires a certified solution: anything other than
/// [`DistanceStatus::Optimal`] is rejected, since the implicit function
/// theorem has no purchase at non-KKT points or intersecting sets.
pub fn assemble_kkt_system(p: &DistanceProblem, s: &DistanceSolution) -> Result<KktSystem> {
    if s.status != DistanceStatus::Optimal {
        return Err(Error::InvalidInput(format!(
            "sensitivity needs an Optimal distance solution, got {:?}",
            s.status
        )));
    }
    let n = p.ego.ambient_dim();
    let me = p.ego.param_dim();
    let mj = p.obstacle.param_dim();
    let (mu1, mu2) = (s.mu[0], s.mu[1]);

    let de = eval_membership_full(p.ego, &p.lambda_e, &s.z_e)?;
    let dj = eval_membership_full(p.obstacle, &p.lambda_j, &s.z_j)?;

    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, i)] += 1.0;
        a[(n + i, n + i)] += 1.0;
        a[(i, n + i)] -= 1.0;
        a[(n + i, i)] -= 1.0;
        for j in 0..n {
            a[(i, j)] += mu1 * de.hess_zz[(i, j)];
            a[(n + i, n + j)] += mu2 * dj.hess_zz[(i, j)];
        }
    }

    let mut b = DMatrix::zeros(2, 2 * n);
    for i in 0..n {
        b[(0, i)] = de.grad_z[i];
        b[(1, n + i)] = dj.grad_z[i];
    }

    let mut g_theta = DMatrix::zeros(2 * n + 2, me + mj);
    for t in 0..me {
        for i in 0..n {
            g_theta[(i, t)] = mu1 * de.cross[(i, t)];
        }
        g_theta[(2 * n, t)] = mu1 * de.grad_lambda[t];
    }
    for t in 0..mj {
        for i in 0..n {
            g_theta[(n + i, me + t)] = mu2 * dj.cross[(i, t)];
        }
        g_theta[(2 * n + 1, me + t)] = mu2 * dj.grad_lambda[t];
    }

    Ok(KktSystem {
        a,
        b,
        c: [mu1, mu2],
        d: [de.c, dj.c],
        g_theta,
        param_split: me,
        ambient: n,
    })
}

impl KktSystem {
    /// Full `(2N+2) × (2N+2)` Jacobian with the activity diagonal zeroed.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n2 = self.a.nrows();
        let dim = n2 + 2;
        let mut j = DMatrix::zeros(dim, dim);
        j.view_mut((0, 0), (n2, n2)).copy_from(&self.a);
        for col in 0..n2 {
            j[(col, n2)] = self.b[(0, col)];
            j[(col, n2 + 1)] = self.b[(1, col)];
            j[(n2, col)] = self.c[0] * self.b[(0, col)];
            j[(n2 + 1, col)] = self.c[1] * self.b[(1, col)];
        }
        j
    }

    /// `z_E − z_j` recovered from stationarity: `(z_E − z_j) = −μ₁ ∇c₁`.
    fn witness_diff(&self) -> DVector<f64> {
        let n = self.ambient;
        DVector::from_fn(n, |i, _| -self.c[0] * self.b[(0, i)])
    }
}

fn norm_1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Differentiates the optimum: returns `∂ν/∂θ` (all primal/dual
/// sensitivities) and the assembled distance gradient.
pub fn solve_sensitivity(k: &KktSystem) -> Result<(DMatrix<f64>, DistanceGradient)> {
    let jac = k.jacobian();
    let rhs = -&k.g_theta;
    let dim = jac.nrows();

    // Primary path: partial-pivoting LU with an explicit-inverse 1-norm
    // condition estimate (the system is at most a few dozen entries).
    let lu = jac.clone().lu();
    let mut solution: Option<(DMatrix<f64>, f64)> = None;
    if let Some(x) = lu.solve(&rhs) {
        if let Some(inv) = lu.try_inverse() {
            let cond = norm_1(&jac) * norm_1(&inv);
            if x.iter().all(|v| v.is_finite()) && cond.is_finite() && cond < 1e12 {
                solution = Some((x, cond));
            }
        }
    }

    // Fallback for (near-)singular Jacobians: minimum-norm solve from a
    // truncated SVD.  See the module docs for why the dropped directions
    // cannot pollute the distance gradient.
    let (x, cond) = match solution {
        Some(s) => s,
        None => {
            let svd = jac.clone().svd(true, true);
            let smax = svd.singular_values.max();
            if !(smax.is_finite() && smax > 0.0) {
                return Err(Error::SingularJacobian(
                    "KKT Jacobian has no finite singular values".into(),
                ));
            }
            let smin = svd.singular_values.min();
            let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            let x = svd
                .solve(&rhs, smax * 1e-13)
                .map_err(|e| Error::SingularJacobian(e.to_string()))?;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::SingularJacobian(
                    "minimum-norm sensitivity solve produced nonfinite entries".into(),
                ));
            }
            (x, cond)
        }
    };

    let n = k.ambient;
    let diff = k.witness_diff();
    let cols = x.ncols();
    let mut full = DVector::zeros(cols);
    for t in 0..cols {
        let mut acc = 0.0;
        for i in 0..n {
            acc += diff[i] * (x[(i, t)] - x[(n + i, t)]);
        }
        full[t] = acc;
    }
    debug_assert_eq!(dim, 2 * n + 2);

    let grad = DistanceGradient {
        d_dlambda_e: full.rows(0, k.param_split).into_owned(),
        d_dlambda_j: full.rows(k.param_split, cols - k.param_split).into_owned(),
        condition_estimate: cond,
    };
    if !grad.d_dlambda_e.iter().chain(grad.d_dlambda_j.iter()).all(|v| v.is_finite()) {
        return Err(Error::SingularJacobian(
            "distance gradient has nonfinite entries".into(),
        ));
    }
    Ok((x, grad))
}

/// Convenience wrapper: distance gradient for a problem/solution pair.
pub fn distance_gradient(p: &DistanceProblem, s: &DistanceSolution) -> Result<DistanceGradient> {
    let k = assemble_kkt_system(p, s)?;
    Ok(solve_sensitivity(&k)?.1)
}
