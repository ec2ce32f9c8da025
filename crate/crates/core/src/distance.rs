//! Smooth minimum-distance program between two parameterized convex sets.
//!
//! For an ego set and one obstacle, each given as a smooth constraint stack
//! (see [`crate::sets`]), the smoothed squared distance is
//!
//! ```text
//! d_ε⁺(λ_E, λ_j) = min_{z_E, z_j}  ½ ‖z_E − z_j‖²
//!                  s.t.  lse_eps_plus(F_E(z_E, λ_E)) ≤ ln(q_E)/ε_E
//!                        lse_eps_plus(F_j(z_j, λ_j)) ≤ ln(q_j)/ε_j .
//! ```
//!
//! Both constraint functions are smooth and strictly convex, so when the two
//! smoothed sets are disjoint the minimizer is unique, both constraints are
//! active there, and both multipliers are strictly positive — exactly the
//! structure the KKT sensitivity analysis downstream relies on.
//!
//! The solver is a primal log-barrier Newton method with continuation
//! (`t ∈ {1, 10, 100, ...}` until the duality-gap proxy `2/t ≤ 1e-10`),
//! started from strictly feasible interior points of each set, followed by
//! multiplier recovery `μ_k = 1/(t·(−c_k))` and a short Newton polish of the
//! full KKT system.  Before solving, a feasibility Newton on the pointwise
//! maximum of the two membership margins decides whether the smoothed sets
//! overlap; overlap is reported as [`DistanceStatus::Intersecting`] instead
//! of a meaningless distance.

use nalgebra::{DMatrix, DVector};

use crate::lse::lse_eps_plus;
use crate::sets::{find_interior_point, ParamVector, SetSpec};
use crate::{Error, Result};

/// Tolerance bundle certified by [`DistanceStatus::Optimal`].
pub const KKT_TOL: f64 = 1e-8;
/// Both constraints must be active to this tolerance at an optimum.
pub const ACTIVITY_TOL: f64 = 1e-6;
/// Strict complementarity floor for the recovered multipliers.
pub const MU_FLOOR: f64 = 1e-10;

/// One ego/obstacle pairing at fixed parameters.
pub struct DistanceProblem<'a> {
    pub ego: &'a dyn SetSpec,
    pub obstacle: &'a dyn SetSpec,
    pub lambda_e: ParamVector,
    pub lambda_j: ParamVector,
}

impl<'a> DistanceProblem<'a> {
    pub fn new(
        ego: &'a dyn SetSpec,
        obstacle: &'a dyn SetSpec,
        lambda_e: ParamVector,
        lambda_j: ParamVector,
    ) -> Result<Self> {
        if ego.ambient_dim() != obstacle.ambient_dim() {
            return Err(Error::InvalidInput(format!(
                "ego lives in dimension {}, obstacle in {}",
                ego.ambient_dim(),
                obstacle.ambient_dim()
            )));
        }
        Ok(Self {
            ego,
            obstacle,
            lambda_e,
            lambda_j,
        })
    }
}

/// Outcome taxonomy for [`solve_distance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceStatus {
    /// KKT residual ≤ 1e-8, both constraints active to 1e-6, multipliers
    /// ≥ 1e-10.
    Optimal,
    /// The smoothed sets overlap; `value` is 0 and the other diagnostics are
    /// meaningless.
    Intersecting,
    /// Newton budget exhausted before reaching tolerance.
    MaxIterations,
    /// Nonfinite iterates or a failed line search.
    NumericalFailure,
}

/// Solver options for [`solve_distance`].
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Total damped-Newton step budget across barrier continuation and
    /// polish.
    pub max_iter: usize,
    /// Optional explicit starting points `(z_E, z_j)`.  Near-optimal starts
    /// short-circuit into the KKT polish; infeasible starts are pulled back
    /// toward the set interiors.
    pub init: Option<(DVector<f64>, DVector<f64>)>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            init: None,
        }
    }
}

/// Primal points, multipliers, and certification diagnostics.
#[derive(Debug, Clone)]
pub struct DistanceSolution {
    pub z_e: DVector<f64>,
    pub z_j: DVector<f64>,
    /// `(μ₁, μ₂)` for the ego and obstacle membership constraints.
    pub mu: [f64; 2],
    /// `½‖z_E − z_j‖²`, recomputed from the returned points.
    pub value: f64,
    /// `∞`-norm of the full KKT residual (stationarity and complementarity).
    pub kkt_residual: f64,
    /// Values of the two membership constraints at the solution.
    pub constraint_residuals: [f64; 2],
    /// Damped-Newton steps spent (barrier + polish).
    pub iterations: usize,
    pub status: DistanceStatus,
}

/// Constraint value, gradient, and Hessian in `z` for one set's membership
/// function `c(z) = lse_eps_plus(F(z, λ)) − ln(q)/ε`.
pub(crate) struct MembershipEval {
    pub(crate) c: f64,
    pub(crate) grad: DVector<f64>,
    pub(crate) hess: DMatrix<f64>,
}

/// [`MembershipEval`] extended with the parameter-direction blocks needed by
/// the KKT sensitivity assembly.
pub(crate) struct MembershipDerivatives {
    pub(crate) c: f64,
    pub(crate) grad_z: DVector<f64>,
    pub(crate) hess_zz: DMatrix<f64>,
    /// `∂c/∂λ`, length `param_dim`.
    pub(crate) grad_lambda: DVector<f64>,
    /// `∂²c/∂z∂λ`, `ambient_dim × param_dim`.
    pub(crate) cross: DMatrix<f64>,
}

pub(crate) fn eval_membership(
    set: &dyn SetSpec,
    lambda: &ParamVector,
    z: &DVector<f64>,
) -> Result<MembershipEval> {
    let stack = set.eval_stack(z, lambda)?;
    let smooth = lse_eps_plus(stack.f.as_slice(), set.smoothing())?;
    let eps = set.smoothing().epsilon();
    let c = smooth.value - (set.constraint_count() as f64).ln() / eps;
    let grad = stack.jac_x.transpose() * &smooth.gradient;
    let mut hess = stack.jac_x.transpose() * &smooth.hessian * &stack.jac_x;
    for k in 0..stack.hess_xx.len() {
        hess += &stack.hess_xx[k] * smooth.gradient[k];
    }
    Ok(MembershipEval { c, grad, hess })
}

pub(crate) fn eval_membership_full(
    set: &dyn SetSpec,
    lambda: &ParamVector,
    z: &DVector<f64>,
) -> Result<MembershipDerivatives> {
    let stack = set.eval_stack(z, lambda)?;
    let smooth = lse_eps_plus(stack.f.as_slice(), set.smoothing())?;
    let eps = set.smoothing().epsilon();
    let c = smooth.value - (set.constraint_count() as f64).ln() / eps;
    let grad_z = stack.jac_x.transpose() * &smooth.gradient;
    let mut hess_zz = stack.jac_x.transpose() * &smooth.hessian * &stack.jac_x;
    for k in 0..stack.hess_xx.len() {
        hess_zz += &stack.hess_xx[k] * smooth.gradient[k];
    }
    let grad_lambda = stack.jac_lambda.transpose() * &smooth.gradient;
    let mut cross = stack.jac_x.transpose() * &smooth.hessian * &stack.jac_lambda;
    for k in 0..stack.hess_xlambda.len() {
        cross += &stack.hess_xlambda[k] * smooth.gradient[k];
    }
    Ok(MembershipDerivatives {
        c,
        grad_z,
        hess_zz,
        grad_lambda,
        cross,
    })
}

fn eval_membership_value(set: &dyn SetSpec, lambda: &ParamVector, z: &DVector<f64>) -> Result<f64> {
    let f = set.eval_values(z, lambda)?;
    let eps = set.smoothing().epsilon();
    Ok(lse_eps_plus(f.as_slice(), set.smoothing())?.value
        - (set.constraint_count() as f64).ln() / eps)
}

/// Searches for a point strictly inside both smoothed sets.
///
/// Minimizes the softened pointwise maximum of the two membership margins
/// with sharpening continuation; exits early as soon as any iterate is
/// strictly feasible for both.  Returns `Some(x)` on overlap, `None` when a
/// positive lower bound on `max(m₁, m₂)` certifies disjointness (or the
/// sharpening budget runs out without finding a common point).
fn detect_intersection(p: &DistanceProblem) -> Result<Option<DVector<f64>>> {
    let n = p.ego.ambient_dim();
    let he = p.ego.interior_hint(&p.lambda_e);
    let hj = p.obstacle.interior_hint(&p.lambda_j);
    let mut x = (&he + &hj) * 0.5;

    let margins = |x: &DVector<f64>| -> Result<(f64, f64)> {
        Ok((
            eval_membership_value(p.ego, &p.lambda_e, x)?,
            eval_membership_value(p.obstacle, &p.lambda_j, x)?,
        ))
    };

    let (m1, m2) = margins(&x)?;
    if m1.max(m2) < -1e-12 {
        return Ok(Some(x));
    }

    let mut beta = 4.0;
    while beta <= 1.1e6 {
        let mut converged_value = f64::INFINITY;
        for _ in 0..60 {
            let e1 = eval_membership(p.ego, &p.lambda_e, &x)?;
            let e2 = eval_membership(p.obstacle, &p.lambda_j, &x)?;
            if e1.c.max(e2.c) < -1e-12 {
                return Ok(Some(x));
            }
            // Softmax combination of the two margins at sharpness β.
            let m = e1.c.max(e2.c);
            let w1 = (beta * (e1.c - m)).exp();
            let w2 = (beta * (e2.c - m)).exp();
            let s = w1 + w2;
            let (s1, s2) = (w1 / s, w2 / s);
            let phi = m + (s.ln()) / beta;
            converged_value = phi;

            let grad = &e1.grad * s1 + &e2.grad * s2;
            let mut hess = &e1.hess * s1 + &e2.hess * s2;
            hess += (&e1.grad * &e1.grad.transpose()) * (beta * s1);
            hess += (&e2.grad * &e2.grad.transpose()) * (beta * s2);
            hess -= (&grad * &grad.transpose()) * beta;

            let step = match solve_spd(&hess, &grad, n) {
                Some(s) => s,
                None => break,
            };
            let dec = grad.dot(&step);
            if dec <= 1e-16 * (1.0 + phi.abs()) {
                break;
            }
            // Backtrack on the softened maximum.
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..50 {
                let cand = &x - &step * t;
                let (c1, c2) = margins(&cand)?;
                if c1.max(c2) < -1e-12 {
                    return Ok(Some(cand));
                }
                let mc = c1.max(c2);
                let phic = mc + ((beta * (c1 - mc)).exp() + (beta * (c2 - mc)).exp()).ln() / beta;
                if phic <= phi - 1e-4 * t * dec {
                    x = cand;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        // φ ≥ max(m₁,m₂) ≥ φ − ln2/β: a positive lower bound proves the
        // smoothed sets disjoint.
        if converged_value - std::f64::consts::LN_2 / beta > 0.0 {
            return Ok(None);
        }
        beta *= 8.0;
    }
    Ok(None)
}

fn solve_spd(hess: &DMatrix<f64>, grad: &DVector<f64>, n: usize) -> Option<DVector<f64>> {
    let scale = hess.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..30 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += ridge;
        }
        if let Some(ch) = nalgebra::Cholesky::new(h) {
            return Some(ch.solve(grad));
        }
        ridge = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
    }
    None
}

/// State threaded through the barrier/polish phases.
struct Workspace {
    z_e: DVector<f64>,
    z_j: DVector<f64>,
    iterations: usize,
}

/// Solves the smoothed distance program.
///
/// Errors are reserved for invalid problems (dimension mismatch, phase-I
/// failure, empty smoothed interior); solver outcomes, including hitting the
/// iteration budget, are reported in [`DistanceSolution::status`].
pub fn solve_distance(p: &DistanceProblem, opts: &SolveOptions) -> Result<DistanceSolution> {
    let n = p.ego.ambient_dim();

    if let Some(x) = detect_intersection(p)? {
        // Report the common point as both witnesses of the overlap.
        return Ok(DistanceSolution {
            z_e: x.clone(),
            z_j: x,
            mu: [0.0, 0.0],
            value: 0.0,
            kkt_residual: f64::INFINITY,
            constraint_residuals: [0.0, 0.0],
            iterations: 0,
            status: DistanceStatus::Intersecting,
        });
    }

    // Phase-I: strictly feasible interior points for the smoothed sets.
    let center_e = strict_smooth_interior(p.ego, &p.lambda_e)?;
    let center_j = strict_smooth_interior(p.obstacle, &p.lambda_j)?;

    let mut ws = Workspace {
        z_e: center_e.clone(),
        z_j: center_j.clone(),
        iterations: 0,
    };

    // A caller-provided start that already satisfies the KKT conditions to
    // modest accuracy can skip the barrier phase entirely.
    if let Some((ze, zj)) = &opts.init {
        if ze.len() != n || zj.len() != n {
            return Err(Error::InvalidInput(
                "solver init points have wrong dimension".into(),
            ));
        }
        let e1 = eval_membership(p.ego, &p.lambda_e, ze)?;
        let e2 = eval_membership(p.obstacle, &p.lambda_j, zj)?;
        let diff = ze - zj;
        let g1n = e1.grad.norm_squared();
        let g2n = e2.grad.norm_squared();
        if g1n > 0.0 && g2n > 0.0 {
            let mu1 = (-diff.dot(&e1.grad) / g1n).max(0.0);
            let mu2 = (diff.dot(&e2.grad) / g2n).max(0.0);
            let resid = kkt_residual_norm(&diff, &e1, &e2, mu1, mu2);
            if resid <= 1e-6 && e1.c <= 1e-8 && e2.c <= 1e-8 {
                ws.z_e = ze.clone();
                ws.z_j = zj.clone();
                let polished = polish(p, ws, mu1, mu2)?;
                return Ok(polished);
            }
        }
        // Otherwise use the provided points as a barrier start, pulled
        // toward the interiors until strictly feasible.
        let mut t = 0.0;
        loop {
            let cand_e = ze * (1.0 - t) + &center_e * t;
            let cand_j = zj * (1.0 - t) + &center_j * t;
            let c1 = eval_membership_value(p.ego, &p.lambda_e, &cand_e)?;
            let c2 = eval_membership_value(p.obstacle, &p.lambda_j, &cand_j)?;
            if c1 < -1e-10 && c2 < -1e-10 {
                ws.z_e = cand_e;
                ws.z_j = cand_j;
                break;
            }
            t = if t == 0.0 { 1e-6 } else { t * 4.0 };
            if t >= 1.0 {
                break; // fall back to the centers already in `ws`
            }
        }
    }

    // The continuation stops once 2/t ≤ 1e-5 and hands the iterate to the
    // KKT polish.  Riding the barrier further parks the witnesses at
    // −c ≈ 1/(tμ) ≲ 1e-12, where the curvature 1/c² pushes the Newton
    // systems past f64 conditioning and the line search can jam against the
    // boundary; the polish reaches far tighter certificates by quadratic
    // Newton on the KKT equations, which has no barrier stiffness.
    let mut t = 1.0;
    let mut stage_failure: Option<DistanceStatus> = None;
    loop {
        match barrier_stage(p, &mut ws, t, 0.25, opts.max_iter) {
            Ok(()) => {}
            Err(StageFailure::Budget) => {
                stage_failure = Some(DistanceStatus::MaxIterations);
                break;
            }
            Err(StageFailure::LineSearch) | Err(StageFailure::NonFinite) => {
                stage_failure = Some(DistanceStatus::NumericalFailure);
                break;
            }
            Err(StageFailure::Error(e)) => return Err(e),
        }
        if 2.0 / t <= 1e-5 {
            break;
        }
        t *= 10.0;
    }

    // Multiplier estimates from approximate complementarity at the last
    // barrier iterate; the polish runs even after a stage failure, since
    // Newton on the KKT system often recovers from a jammed line search.
    let e1 = eval_membership(p.ego, &p.lambda_e, &ws.z_e)?;
    let e2 = eval_membership(p.obstacle, &p.lambda_j, &ws.z_j)?;
    let mu1 = 1.0 / (t * (-e1.c).max(1e-300));
    let mu2 = 1.0 / (t * (-e2.c).max(1e-300));
    let polished = polish(p, ws, mu1, mu2)?;
    match stage_failure {
        Some(status) if polished.status != DistanceStatus::Optimal => {
            // Report how the barrier phase died, keeping the best iterate's
            // diagnostics.
            Ok(DistanceSolution { status, ..polished })
        }
        _ => Ok(polished),
    }
}

/// Runs [`find_interior_point`] and, if needed, keeps descending the smooth
/// maximum until the *smoothed* membership is strictly negative.
fn strict_smooth_interior(set: &dyn SetSpec, lambda: &ParamVector) -> Result<DVector<f64>> {
    let mut x = find_interior_point(set, lambda)?;
    if eval_membership_value(set, lambda, &x)? < -1e-12 {
        return Ok(x);
    }
    // The exact-set interior point sits above the smoothed threshold (very
    // loose smoothing of a thin set).  Descend the membership directly.
    for _ in 0..100 {
        let e = eval_membership(set, lambda, &x)?;
        if e.c < -1e-12 {
            return Ok(x);
        }
        let step = solve_spd(&e.hess, &e.grad, x.len())
            .ok_or_else(|| Error::NumericalFailure("singular membership Hessian".into()))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = &x - &step * t;
            if eval_membership_value(set, lambda, &cand)? < e.c - 1e-4 * t * e.grad.dot(&step) {
                x = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if eval_membership_value(set, lambda, &x)? < -1e-12 {
        Ok(x)
    } else {
        Err(Error::EmptyInterior)
    }
}

enum StageFailure {
    Budget,
    LineSearch,
    NonFinite,
    Error(Error),
}

impl From<Error> for StageFailure {
    fn from(e: Error) -> Self {
        StageFailure::Error(e)
    }
}

/// Newton iterations for one barrier parameter `t`, to Newton decrement
/// `target`.
fn barrier_stage(
    p: &DistanceProblem,
    ws: &mut Workspace,
    t: f64,
    target: f64,
    max_iter: usize,
) -> std::result::Result<(), StageFailure> {
    let n = p.ego.ambient_dim();
    loop {
        let e1 = eval_membership(p.ego, &p.lambda_e, &ws.z_e)?;
        let e2 = eval_membership(p.obstacle, &p.lambda_j, &ws.z_j)?;
        if !(e1.c < 0.0 && e2.c < 0.0) {
            return Err(StageFailure::NonFinite);
        }
        let diff = &ws.z_e - &ws.z_j;
        let phi = t * 0.5 * diff.norm_squared() - (-e1.c).ln() - (-e2.c).ln();

        // Gradient and Hessian of the barrier objective in (z_E, z_j).
        let mut grad = DVector::zeros(2 * n);
        for i in 0..n {
            grad[i] = t * diff[i] + e1.grad[i] / (-e1.c);
            grad[n + i] = -t * diff[i] + e2.grad[i] / (-e2.c);
        }
        let mut hess = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            hess[(i, i)] += t;
            hess[(n + i, n + i)] += t;
            hess[(i, n + i)] -= t;
            hess[(n + i, i)] -= t;
        }
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] += e1.hess[(i, j)] / (-e1.c) + e1.grad[i] * e1.grad[j] / (e1.c * e1.c);
                hess[(n + i, n + j)] +=
                    e2.hess[(i, j)] / (-e2.c) + e2.grad[i] * e2.grad[j] / (e2.c * e2.c);
            }
        }

        let step = solve_spd(&hess, &grad, 2 * n).ok_or(StageFailure::NonFinite)?;
        let dec2 = grad.dot(&step);
        if !dec2.is_finite() {
            return Err(StageFailure::NonFinite);
        }
        if dec2.max(0.0).sqrt() <= target {
            return Ok(());
        }
        // Only accepted steps are charged against the budget; checking
        // convergence at the carried-over iterate is free.
        if ws.iterations >= max_iter {
            return Err(StageFailure::Budget);
        }

        ws.iterations += 1;
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_e = &ws.z_e - step.rows(0, n) * s;
            let cand_j = &ws.z_j - step.rows(n, n) * s;
            let c1 = eval_membership_value(p.ego, &p.lambda_e, &cand_e)?;
            let c2 = eval_membership_value(p.obstacle, &p.lambda_j, &cand_j)?;
            if c1 < 0.0 && c2 < 0.0 {
                let d = &cand_e - &cand_j;
                let phic = t * 0.5 * d.norm_squared() - (-c1).ln() - (-c2).ln();
                if phic <= phi - 1e-4 * s * dec2 {
                    ws.z_e = cand_e;
                    ws.z_j = cand_j;
                    accepted = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !accepted {
            return Err(StageFailure::LineSearch);
        }
    }
}

fn kkt_residual_norm(
    diff: &DVector<f64>,
    e1: &MembershipEval,
    e2: &MembershipEval,
    mu1: f64,
    mu2: f64,
) -> f64 {
    let mut r = 0.0_f64;
    for i in 0..diff.len() {
        r = r.max((diff[i] + mu1 * e1.grad[i]).abs());
        r = r.max((-diff[i] + mu2 * e2.grad[i]).abs());
    }
    r.max((mu1 * e1.c).abs()).max((mu2 * e2.c).abs())
}

/// Newton micro-iterations allotted to the KKT polish on top of the barrier
/// budget; each one is a dense solve of a `(2N+2)²` system.
const POLISH_ITERS: usize = 8;

/// Newton polish of the full KKT system from a near-optimal barrier iterate.
fn polish(p: &DistanceProblem, mut ws: Workspace, mut mu1: f64, mut mu2: f64) -> Result<DistanceSolution> {
    let n = p.ego.ambient_dim();
    let mut best: Option<(DVector<f64>, DVector<f64>, f64, f64, f64)> = None;

    for _ in 0..POLISH_ITERS {
        let e1 = eval_membership(p.ego, &p.lambda_e, &ws.z_e)?;
        let e2 = eval_membership(p.obstacle, &p.lambda_j, &ws.z_j)?;
        let diff = &ws.z_e - &ws.z_j;
        let resid = kkt_residual_norm(&diff, &e1, &e2, mu1, mu2);
        if best.as_ref().map_or(true, |b| resid < b.4) {
            best = Some((ws.z_e.clone(), ws.z_j.clone(), mu1, mu2, resid));
        }
        if resid <= 1e-12 {
            break;
        }
        ws.iterations += 1;

        // Full KKT Jacobian in (z_E, z_j, μ₁, μ₂).
        let dim = 2 * n + 2;
        let mut jac = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = -(diff[i] + mu1 * e1.grad[i]);
            rhs[n + i] = -(-diff[i] + mu2 * e2.grad[i]);
            jac[(i, i)] += 1.0;
            jac[(i, n + i)] -= 1.0;
            jac[(n + i, i)] -= 1.0;
            jac[(n + i, n + i)] += 1.0;
            for j in 0..n {
                jac[(i, j)] += mu1 * e1.hess[(i, j)];
                jac[(n + i, n + j)] += mu2 * e2.hess[(i, j)];
            }
            jac[(i, 2 * n)] = e1.grad[i];
            jac[(n + i, 2 * n + 1)] = e2.grad[i];
            jac[(2 * n, i)] = mu1 * e1.grad[i];
            jac[(2 * n + 1, n + i)] = mu2 * e2.grad[i];
        }
        jac[(2 * n, 2 * n)] = e1.c;
        jac[(2 * n + 1, 2 * n + 1)] = e2.c;
        rhs[2 * n] = -(mu1 * e1.c);
        rhs[2 * n + 1] = -(mu2 * e2.c);

        // Sharp smoothing can leave the witness pair free to slide jointly
        // along exactly parallel faces; that direction is a true null space
        // of the KKT Jacobian and irrelevant to the residual, so take the
        // minimum-norm Newton step instead of failing on the singular LU.
        let svd = jac.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let delta = match svd.solve(&rhs, sigma_max * 1e-13) {
            Ok(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => break,
        };
        ws.z_e += delta.rows(0, n);
        ws.z_j += delta.rows(n, n);
        mu1 += delta[2 * n];
        mu2 += delta[2 * n + 1];
        if !(mu1.is_finite() && mu2.is_finite()) {
            break;
        }
    }

    let (z_e, z_j, mu1, mu2, _) = best.expect("polish records at least one iterate");
    // Final diagnostics at the best iterate.
    let e1 = eval_membership(p.ego, &p.lambda_e, &z_e)?;
    let e2 = eval_membership(p.obstacle, &p.lambda_j, &z_j)?;
    let diff = &z_e - &z_j;
    let resid = kkt_residual_norm(&diff, &e1, &e2, mu1, mu2);
    let value = 0.5 * diff.norm_squared();

    let finite = z_e.iter().chain(z_j.iter()).all(|v| v.is_finite())
        && mu1.is_finite()
        && mu2.is_finite()
        && resid.is_finite();
    let status = if !finite {
        DistanceStatus::NumericalFailure
    } else if resid <= KKT_TOL
        && e1.c.abs() <= ACTIVITY_TOL
        && e2.c.abs() <= ACTIVITY_TOL
        && mu1 >= MU_FLOOR
        && mu2 >= MU_FLOOR
    {
        DistanceStatus::Optimal
    } else {
        DistanceStatus::NumericalFailure
    };

    Ok(DistanceSolution {
        z_e,
        z_j,
        mu: [mu1, mu2],
        value,
        kkt_residual: resid,
        constraint_residuals: [e1.c, e2.c],
        iterations: ws.iterations,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lse::SmoothMaxParams;
    use crate::sets::{RigidPolytope, SmoothLens};
    use approx::assert_relative_eq;

    fn eps(v: f64) -> SmoothMaxParams {
        SmoothMaxParams::new(v).unwrap()
    }

    fn pose(x: f64, y: f64, th: f64) -> ParamVector {
        ParamVector::rigid_pose(x, y, th).unwrap()
    }

    fn boxes(e: f64) -> (RigidPolytope, RigidPolytope) {
        (
            RigidPolytope::unit_box(eps(e)).unwrap(),
            RigidPolytope::unit_box(eps(e)).unwrap(),
        )
    }

    #[test]
    fn unit_boxes_along_x_axis() {
        let (ego, obs) = boxes(100.0);
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.0), pose(5.0, 0.0, 0.0)).unwrap();
        let s = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, DistanceStatus::Optimal, "{s:?}");
        assert!(s.value > 4.40 && s.value < 4.50, "value {}", s.value);
        // High-precision boundary analysis puts the smoothed gap at
        // 3 − 2 ln(3)/100, so d = 4.434324652. Nearest points straddle the
        // facing faces on the x-axis.
        assert_relative_eq!(s.value, 4.434324652472, max_relative = 1e-6);
        assert_relative_eq!(s.z_e[0], 1.0 + 3.0_f64.ln() / 100.0, epsilon = 1e-4);
        assert!(s.z_e[1].abs() < 1e-4);
        assert_relative_eq!(s.z_j[0], 4.0 - 3.0_f64.ln() / 100.0, epsilon = 1e-4);
        assert!(s.kkt_residual <= KKT_TOL);
        assert!(s.constraint_residuals[0].abs() <= ACTIVITY_TOL);
        assert!(s.constraint_residuals[1].abs() <= ACTIVITY_TOL);
        assert!(s.mu[0] >= MU_FLOOR && s.mu[1] >= MU_FLOOR);
    }

    #[test]
    fn unit_boxes_stacked_vertically() {
        let (ego, obs) = boxes(100.0);
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.0), pose(0.0, 5.0, 0.0)).unwrap();
        let s = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, DistanceStatus::Optimal);
        assert_relative_eq!(s.value, 4.434324652472, max_relative = 1e-6);
        assert!(s.z_e[0].abs() < 1e-4);
        assert_relative_eq!(s.z_e[1], 1.0 + 3.0_f64.ln() / 100.0, epsilon = 1e-4);
        assert_relative_eq!(s.z_j[1], 4.0 - 3.0_f64.ln() / 100.0, epsilon = 1e-4);
    }

    #[test]
    fn overlapping_boxes_report_intersection() {
        let (ego, obs) = boxes(100.0);
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.0), pose(0.5, 0.0, 0.0)).unwrap();
        let s = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, DistanceStatus::Intersecting);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn stationarity_identity_holds() {
        let ego = RigidPolytope::regular_polygon(5, 0.9, eps(50.0)).unwrap();
        let obs = RigidPolytope::regular_polygon(4, 1.2, eps(50.0)).unwrap();
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.4), pose(4.0, 1.0, -0.7)).unwrap();
        let s = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, DistanceStatus::Optimal);
        // (z_E − z_j) = −μ₁ ∇c₁ and (z_j − z_E) = −μ₂ ∇c₂.
        let e1 = eval_membership(&ego, &p.lambda_e, &s.z_e).unwrap();
        let e2 = eval_membership(&obs, &p.lambda_j, &s.z_j).unwrap();
        let diff = &s.z_e - &s.z_j;
        assert!((&diff + &e1.grad * s.mu[0]).norm() <= 1e-7);
        assert!((-&diff + &e2.grad * s.mu[1]).norm() <= 1e-7);
    }

    #[test]
    fn warm_start_at_optimum_converges_immediately() {
        let (ego, obs) = boxes(100.0);
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.0), pose(5.0, 0.0, 0.0)).unwrap();
        let cold = solve_distance(&p, &SolveOptions::default()).unwrap();
        let warm = solve_distance(
            &p,
            &SolveOptions {
                init: Some((cold.z_e.clone(), cold.z_j.clone())),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(warm.status, DistanceStatus::Optimal);
        assert!(warm.iterations <= 3, "warm start took {} steps", warm.iterations);
        assert_relative_eq!(warm.value, cold.value, max_relative = 1e-9);
    }

    #[test]
    fn random_restarts_agree() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let ego = RigidPolytope::regular_polygon(6, 1.0, eps(50.0)).unwrap();
        let obs = RigidPolytope::regular_polygon(3, 0.8, eps(50.0)).unwrap();
        let p = DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.2), pose(3.5, -1.0, 1.1)).unwrap();
        let base = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(base.status, DistanceStatus::Optimal);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            // Random strictly feasible starts: jitter inside each body.
            let je = DVector::from_row_slice(&[
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ]);
            let jj = DVector::from_row_slice(&[
                3.5 + rng.gen_range(-0.2..0.2),
                -1.0 + rng.gen_range(-0.2..0.2),
            ]);
            let s = solve_distance(
                &p,
                &SolveOptions {
                    init: Some((je, jj)),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(s.status, DistanceStatus::Optimal);
            assert!((&s.z_e - &base.z_e).norm() <= 1e-6);
            assert!((&s.z_j - &base.z_j).norm() <= 1e-6);
        }
    }

    #[test]
    fn looser_smoothing_gives_smaller_distance() {
        let mut prev = -1.0;
        for e in [1.0, 10.0, 100.0, 200.0] {
            let (ego, obs) = boxes(e);
            let p =
                DistanceProblem::new(&ego, &obs, pose(0.0, 0.0, 0.0), pose(5.0, 0.0, 0.0)).unwrap();
            let s = solve_distance(&p, &SolveOptions::default()).unwrap();
            assert_eq!(s.status, DistanceStatus::Optimal, "eps {e}: {s:?}");
            assert!(s.value >= prev, "eps {e}: {} < {}", s.value, prev);
            prev = s.value;
        }
    }

    #[test]
    fn curved_sets_solve_cleanly() {
        let ego = SmoothLens::new(1.0, [0.3, 0.0], eps(50.0)).unwrap();
        let obs = SmoothLens::new(0.7, [0.0, 0.2], eps(50.0)).unwrap();
        let le = ParamVector::generic(vec![0.0, 0.0]).unwrap();
        let lj = ParamVector::generic(vec![4.0, 0.5]).unwrap();
        let p = DistanceProblem::new(&ego, &obs, le, lj).unwrap();
        let s = solve_distance(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, DistanceStatus::Optimal, "{s:?}");
        // Centers are √(16 + 0.25) ≈ 4.03 apart; the ego lens reaches 0.7
        // toward the obstacle (disk radius 1 minus the 0.3 offset) and the
        // obstacle lens slightly under its 0.7 radius, so the exact gap sits
        // near 2.67, and smoothing at ε = 50 carves each set a little more.
        let gap = (2.0 * s.value).sqrt();
        assert!(gap > 2.4 && gap < 2.9, "gap {gap}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        // 3-parameter pose on a 2-parameter lens.
        let ego = SmoothLens::new(1.0, [0.3, 0.0], eps(50.0)).unwrap();
        let le = ParamVector::generic(vec![0.0, 0.0]).unwrap();
        let lj = ParamVector::generic(vec![4.0]).unwrap();
        let p = DistanceProblem::new(&ego, &ego, le, lj).unwrap();
        assert!(solve_distance(&p, &SolveOptions::default()).is_err());
    }
}
