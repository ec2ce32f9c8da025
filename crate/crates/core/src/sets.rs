//! Parameterized convex sets as smooth constraint stacks.
//!
//! A set is described by a stack of functions `F^1..F^q`, each convex in the
//! state `x ∈ ℝ^N` and parameterized by `λ ∈ ℝ^M`; the exact set is
//! `S(λ) = {x : F^k(x, λ) ≤ 0 ∀k}`.  Replacing the elementwise maximum with
//! the rectified smooth maximum produces the smooth overapproximation
//!
//! ```text
//! S_ε⁺(λ) = {x : lse_eps_plus(F(x, λ); ε) ≤ ln(q)/ε}
//! ```
//!
//! whose boundary is differentiable in both `x` and `λ`.  Every exact member
//! deeper than about `ln(q/(q−1))/ε` below the constraint surface is also a
//! smooth member; right at degenerate boundary features (e.g. a triangle
//! vertex, where two entries of `F` vanish simultaneously) the rectified
//! smooth maximum can exceed the `ln(q)/ε` threshold by a sliver of width
//! `O(1/ε)`, so membership tests of near-boundary points should keep that
//! clearance in mind.
//!
//! The [`SetSpec`] trait exposes the stack and all derivative blocks the
//! distance solver and its sensitivity analysis need.  [`RigidPolytope`]
//! implements it in closed form for a 2-D polytope undergoing rigid motion,
//! the case the simulation uses; [`SmoothLens`] is a small curved example
//! showing how non-affine stacks plug into the same machinery.

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::lse::{lse_eps_plus, SmoothMaxParams};
use crate::{Error, Result};

/// Interpretation tag for a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// `(x_c1, x_c2, θ)`: planar translation plus rotation angle.
    RigidPose2d,
    /// No structure imposed; meaning is up to the owning [`SetSpec`].
    Generic,
}

/// Validated parameter vector `λ` for one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: DVector<f64>,
    kind: ParamKind,
}

impl ParamVector {
    /// Planar rigid pose `(x_c1, x_c2, θ)`.
    pub fn rigid_pose(xc1: f64, xc2: f64, theta: f64) -> Result<Self> {
        Self::checked(DVector::from_row_slice(&[xc1, xc2, theta]), ParamKind::RigidPose2d)
    }

    /// Unstructured parameter vector.
    pub fn generic(values: Vec<f64>) -> Result<Self> {
        Self::checked(DVector::from_vec(values), ParamKind::Generic)
    }

    fn checked(values: DVector<f64>, kind: ParamKind) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter vector contains nonfinite entry {bad}"
            )));
        }
        if kind == ParamKind::RigidPose2d && values.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "rigid 2-D pose needs 3 parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    /// Same kind, new values; used by finite-difference probes.
    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        Self::checked(values, self.kind)
    }

    /// Copy with entry `k` shifted by `delta`.
    pub fn nudged(&self, k: usize, delta: f64) -> Result<Self> {
        let mut v = self.values.clone();
        v[k] += delta;
        Self::checked(v, self.kind)
    }
}

/// Constraint stack values and derivative blocks at one `(x, λ)`.
#[derive(Debug, Clone)]
pub struct StackEval {
    /// `F(x, λ)` — one entry per constraint.
    pub f: DVector<f64>,
    /// `∂F/∂x`, `q×N`.
    pub jac_x: DMatrix<f64>,
    /// `∂F/∂λ`, `q×M`.
    pub jac_lambda: DMatrix<f64>,
    /// Per constraint `k`: `∂²F^k/∂x²`, `N×N` (zero for affine stacks).
    pub hess_xx: Vec<DMatrix<f64>>,
    /// Per constraint `k`: `∂²F^k/∂x∂λ`, `N×M` (rows index `x`).
    pub hess_xlambda: Vec<DMatrix<f64>>,
}

/// A parameterized convex set described by a smooth constraint stack.
///
/// Implementations must keep every `F^k(·, λ)` convex in `x`; the distance
/// solver additionally relies on the smooth-maximum composition being
/// strictly convex, which holds when `∂F/∂x` has full column rank (affine
/// stacks, see the rigid polytope) or when the constraint curvature
/// `∂²F^k/∂x²` itself is positive definite (see the lens).
pub trait SetSpec {
    /// Dimension `N` of the ambient space.
    fn ambient_dim(&self) -> usize;
    /// Dimension `M` of the parameter vector.
    fn param_dim(&self) -> usize;
    /// Number of constraints `q` in the stack.
    fn constraint_count(&self) -> usize;
    /// Smoothing sharpness for this set.
    fn smoothing(&self) -> SmoothMaxParams;

    /// Stack values and all derivative blocks at `(x, λ)`.
    fn eval_stack(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<StackEval>;

    /// Stack values only; override when the full evaluation would waste work
    /// in line searches.
    fn eval_values(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<DVector<f64>> {
        Ok(self.eval_stack(x, lambda)?.f)
    }

    /// A reasonable starting point for interior searches (need not be
    /// feasible).
    fn interior_hint(&self, lambda: &ParamVector) -> DVector<f64> {
        let _ = lambda;
        DVector::zeros(self.ambient_dim())
    }
}

/// Copies a fixed 2×2 matrix into dynamic storage so products with the
/// dynamically sized constraint stacks come out as `DMatrix`.
fn widen(m: Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
}

fn check_point_dim(set: &dyn SetSpec, x: &DVector<f64>) -> Result<()> {
    if x.len() != set.ambient_dim() {
        return Err(Error::InvalidInput(format!(
            "point has dimension {}, set lives in dimension {}",
            x.len(),
            set.ambient_dim()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "point contains nonfinite entry {bad}"
        )));
    }
    Ok(())
}

/// Signed smooth membership of `x` in `S_ε⁺(λ)`:
/// `lse_eps_plus(F(x,λ)) − ln(q)/ε`, nonpositive exactly on the smooth set.
pub fn membership_margin(set: &dyn SetSpec, x: &DVector<f64>, lambda: &ParamVector) -> Result<f64> {
    check_point_dim(set, x)?;
    let f = set.eval_values(x, lambda)?;
    let eps = set.smoothing().epsilon();
    let value = lse_eps_plus(f.as_slice(), set.smoothing())?.value;
    Ok(value - (set.constraint_count() as f64).ln() / eps)
}

/// Finds a strictly feasible point of the exact set: damped Newton descent
/// on the smooth maximum of the stack, stopping as soon as an iterate
/// clears every constraint by at least `1e-9`.
///
/// Returns [`Error::EmptyInterior`] if 200 iterations fail to produce such a
/// point.
pub fn find_interior_point(set: &dyn SetSpec, lambda: &ParamVector) -> Result<DVector<f64>> {
    let n = set.ambient_dim();
    let mut x = set.interior_hint(lambda);
    if x.len() != n {
        return Err(Error::InvalidInput(
            "interior hint has wrong dimension".into(),
        ));
    }
    let params = set.smoothing();
    let margin_of = |f: &DVector<f64>| f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut f = set.eval_values(&x, lambda)?;
    for _ in 0..200 {
        if margin_of(&f) <= -1e-9 {
            return Ok(x);
        }
        let eval = set.eval_stack(&x, lambda)?;
        let smooth = lse_eps_plus(eval.f.as_slice(), params)?;
        // Gradient and Hessian of x ↦ lse_eps_plus(F(x, λ)).
        let grad = eval.jac_x.transpose() * &smooth.gradient;
        let mut hess = eval.jac_x.transpose() * &smooth.hessian * &eval.jac_x;
        for k in 0..eval.hess_xx.len() {
            hess += &eval.hess_xx[k] * smooth.gradient[k];
        }
        let step = solve_spd_with_ridge(&mut hess, &grad)?;

        // Backtrack on the smooth max value itself.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x - &step * t;
            let fc = set.eval_values(&cand, lambda)?;
            let vc = lse_eps_plus(fc.as_slice(), params)?.value;
            if vc < smooth.value - 1e-4 * t * grad.dot(&step) {
                x = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let f = set.eval_values(&x, lambda)?;
    if margin_of(&f) <= -1e-9 {
        Ok(x)
    } else {
        Err(Error::EmptyInterior)
    }
}

/// Solves `H s = g` for a nominally SPD `H`, adding an escalating diagonal
/// ridge if the factorization fails (flat or underflowed curvature).
fn solve_spd_with_ridge(hess: &mut DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = hess.nrows();
    let scale = hess.iter().fold(0.0_f64, |a, &v| a.max(v.abs())).max(1e-30);
    let mut ridge = 0.0;
    for _ in 0..40 {
        let mut h = hess.clone();
        for i in 0..n {
            h[(i, i)] += ridge;
        }
        if let Some(ch) = nalgebra::Cholesky::new(h) {
            return Ok(ch.solve(grad));
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
    Err(Error::NumericalFailure(
        "could not regularize Newton system".into(),
    ))
}

/// Sampled verification of the structural assumptions the solvers lean on.
#[derive(Debug, Clone)]
pub struct StandardConditionsReport {
    /// Midpoint-convexity violations across sampled segment pairs.
    pub convexity_violations: usize,
    /// Largest positive excess `F((x+y)/2) − (F(x)+F(y))/2` observed.
    pub worst_convexity_gap: f64,
    /// `∂F/∂x` kept full column rank (`σ_min > 1e-10 σ_max`) at all samples.
    pub jacobian_full_rank: bool,
    /// Smallest `σ_min/σ_max` of `∂F/∂x` across samples.
    pub worst_rank_ratio: f64,
    /// No escape direction found along `±` coordinate rays.
    pub bounded: bool,
    /// An interior point with clearance `≥ 1e-9` exists.
    pub has_interior: bool,
    /// Clearance `−max_k F^k` at the interior point found (0 if none).
    pub interior_clearance: f64,
    /// Number of sample points used.
    pub samples: usize,
}

impl StandardConditionsReport {
    /// True when every sampled condition held.
    pub fn all_hold(&self) -> bool {
        self.convexity_violations == 0 && self.jacobian_full_rank && self.bounded && self.has_interior
    }
}

/// Samples convexity, Jacobian rank, boundedness, and interior nonemptiness
/// of a constraint stack at a fixed parameter vector.
///
/// The checks are necessarily sampled rather than symbolic: convexity is
/// probed on random segment midpoints, rank at random points, and
/// boundedness by marching along `±` coordinate rays from an interior point
/// looking for a direction that never exits the set.
pub fn verify_standard_conditions(
    set: &dyn SetSpec,
    lambda: &ParamVector,
    samples: usize,
    seed: u64,
) -> Result<StandardConditionsReport> {
    let n = set.ambient_dim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let interior = find_interior_point(set, lambda);
    let (has_interior, interior_clearance, center) = match interior {
        Ok(x) => {
            let f = set.eval_values(&x, lambda)?;
            let margin = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (true, -margin, x)
        }
        Err(Error::EmptyInterior) => (false, 0.0, set.interior_hint(lambda)),
        Err(e) => return Err(e),
    };

    // Boundedness: march outward along each ± coordinate ray; if the stack
    // still accepts the point at a huge radius, call the set unbounded.
    let mut bounded = true;
    let mut extent = 1.0_f64;
    for dim in 0..n {
        for sign in [-1.0, 1.0] {
            let mut dir = DVector::zeros(n);
            dir[dim] = sign;
            let mut t = 1.0;
            let mut exited = false;
            while t < 2.0_f64.powi(40) {
                let f = set.eval_values(&(&center + &dir * t), lambda)?;
                if f.iter().any(|&v| v > 0.0) {
                    exited = true;
                    extent = extent.max(t);
                    break;
                }
                t *= 2.0;
            }
            if !exited {
                bounded = false;
            }
        }
    }
    let spread = if bounded { 2.0 * extent } else { 4.0 };

    let mut convexity_violations = 0usize;
    let mut worst_convexity_gap = 0.0_f64;
    let mut jacobian_full_rank = true;
    let mut worst_rank_ratio = f64::INFINITY;

    for _ in 0..samples {
        let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
            DVector::from_iterator(n, (0..n).map(|i| center[i] + rng.gen_range(-spread..spread)))
        };
        let a = sample(&mut rng);
        let b = sample(&mut rng);
        let fa = set.eval_values(&a, lambda)?;
        let fb = set.eval_values(&b, lambda)?;
        let fm = set.eval_values(&((&a + &b) * 0.5), lambda)?;
        for k in 0..set.constraint_count() {
            let scale = fa[k].abs().max(fb[k].abs()).max(1.0);
            let gap = fm[k] - 0.5 * (fa[k] + fb[k]);
            if gap > 1e-12 * scale {
                convexity_violations += 1;
                worst_convexity_gap = worst_convexity_gap.max(gap);
            }
        }

        let jac = set.eval_stack(&a, lambda)?.jac_x;
        let svals = jac.svd(false, false).singular_values;
        let smax = svals.iter().cloned().fold(0.0_f64, f64::max);
        let smin = svals.iter().cloned().fold(f64::INFINITY, f64::min);
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        worst_rank_ratio = worst_rank_ratio.min(ratio);
        if svals.len() < n || ratio <= 1e-10 {
            jacobian_full_rank = false;
        }
    }

    Ok(StandardConditionsReport {
        convexity_violations,
        worst_convexity_gap,
        jacobian_full_rank,
        worst_rank_ratio,
        bounded,
        has_interior,
        interior_clearance,
        samples,
    })
}

/// A compact 2-D polytope under rigid motion.
///
/// The body frame holds fixed halfspaces `A₀ y ≤ b₀`; the pose parameters
/// `λ = (x_c, θ)` place it in the world via `y = R(θ)ᵀ(x − x_c)`, so the
/// stack is
///
/// ```text
/// F(x, λ) = A₀ R(θ)ᵀ (x − x_c) − b₀ .
/// ```
///
/// All derivative blocks are closed-form.  Construction validates that the
/// base set is bounded (the face normals leave no angular gap of `π` or
/// more) and has nonempty interior with clearance at least `1e-9`.
#[derive(Debug, Clone)]
pub struct RigidPolytope {
    base_a: DMatrix<f64>,
    base_b: DVector<f64>,
    base_vertices: Vec<[f64; 2]>,
    smoothing: SmoothMaxParams,
}

impl RigidPolytope {
    /// Builds a polytope from body-frame halfspace rows `A₀ y ≤ b₀`.
    pub fn new(base_a: DMatrix<f64>, base_b: DVector<f64>, smoothing: SmoothMaxParams) -> Result<Self> {
        let q = base_a.nrows();
        if base_a.ncols() != 2 {
            return Err(Error::InvalidInput(format!(
                "halfspace matrix must have 2 columns, got {}",
                base_a.ncols()
            )));
        }
        if base_b.len() != q {
            return Err(Error::InvalidInput(format!(
                "halfspace offsets have length {}, expected {q}",
                base_b.len()
            )));
        }
        if q < 3 {
            return Err(Error::InvalidInput(format!(
                "a bounded planar polytope needs at least 3 halfspaces, got {q}"
            )));
        }
        if base_a.iter().chain(base_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("halfspace data must be finite".into()));
        }
        for k in 0..q {
            let norm = base_a.row(k).norm();
            if norm < 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "halfspace row {k} has (near-)zero normal"
                )));
            }
        }

        // Bounded iff the normal directions leave no angular gap of π or
        // more (they positively span the plane).
        let mut angles: Vec<f64> = (0..q)
            .map(|k| base_a[(k, 1)].atan2(base_a[(k, 0)]))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut max_gap = 2.0 * std::f64::consts::PI + angles[0] - angles[q - 1];
        for w in angles.windows(2) {
            max_gap = max_gap.max(w[1] - w[0]);
        }
        if max_gap >= std::f64::consts::PI - 1e-12 {
            return Err(Error::InvalidInput(
                "halfspace normals leave an angular gap of π or more; the polytope is unbounded"
                    .into(),
            ));
        }

        let base_vertices = enumerate_vertices(&base_a, &base_b)?;
        let poly = Self {
            base_a,
            base_b,
            base_vertices,
            smoothing,
        };
        // Nonempty interior with the standard clearance.
        let identity = ParamVector::rigid_pose(0.0, 0.0, 0.0)?;
        find_interior_point(&poly, &identity)?;
        Ok(poly)
    }

    /// Regular `sides`-gon with the given circumradius, centered at the body
    /// origin with one face normal along `+x`.
    pub fn regular_polygon(sides: usize, circumradius: f64, smoothing: SmoothMaxParams) -> Result<Self> {
        if sides < 3 {
            return Err(Error::InvalidInput(format!(
                "regular polygon needs at least 3 sides, got {sides}"
            )));
        }
        if !circumradius.is_finite() || circumradius <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "circumradius must be finite and > 0, got {circumradius}"
            )));
        }
        let inradius = circumradius * (std::f64::consts::PI / sides as f64).cos();
        let mut a = DMatrix::zeros(sides, 2);
        let b = DVector::from_element(sides, inradius);
        for k in 0..sides {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
            a[(k, 0)] = phi.cos();
            a[(k, 1)] = phi.sin();
        }
        Self::new(a, b, smoothing)
    }

    /// Axis-aligned box `|y_1| ≤ hw[0], |y_2| ≤ hw[1]` in the body frame.
    pub fn axis_aligned_box(half_widths: [f64; 2], smoothing: SmoothMaxParams) -> Result<Self> {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_row_slice(&[
            half_widths[0],
            half_widths[0],
            half_widths[1],
            half_widths[1],
        ]);
        Self::new(a, b, smoothing)
    }

    /// The unit box `[−1, 1]²`.
    pub fn unit_box(smoothing: SmoothMaxParams) -> Result<Self> {
        Self::axis_aligned_box([1.0, 1.0], smoothing)
    }

    pub fn base_halfspaces(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.base_a, &self.base_b)
    }

    /// World-frame halfspace rows `A x ≤ b` at the given pose.
    pub fn world_halfspaces(&self, lambda: &ParamVector) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (xc, rot) = self.pose(lambda)?;
        let a = &self.base_a * widen(rot.transpose());
        let b = &self.base_b + &a * xc;
        Ok((a, b))
    }

    /// World-frame vertices at the given pose, in counterclockwise order.
    pub fn world_vertices(&self, lambda: &ParamVector) -> Result<Vec<[f64; 2]>> {
        let (xc, rot) = self.pose(lambda)?;
        Ok(self
            .base_vertices
            .iter()
            .map(|v| {
                let w = rot * nalgebra::Vector2::new(v[0], v[1]) + xc;
                [w.x, w.y]
            })
            .collect())
    }

    /// Largest distance from the body origin to a vertex.
    pub fn circumradius(&self) -> f64 {
        self.base_vertices
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .fold(0.0, f64::max)
    }

    fn pose(&self, lambda: &ParamVector) -> Result<(nalgebra::Vector2<f64>, Matrix2<f64>)> {
        if lambda.kind() != ParamKind::RigidPose2d {
            return Err(Error::InvalidInput(
                "rigid polytope expects a rigid-pose-2d parameter vector".into(),
            ));
        }
        let v = lambda.values();
        let (s, c) = v[2].sin_cos();
        Ok((
            nalgebra::Vector2::new(v[0], v[1]),
            Matrix2::new(c, -s, s, c),
        ))
    }
}

impl SetSpec for RigidPolytope {
    fn ambient_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn constraint_count(&self) -> usize {
        self.base_a.nrows()
    }

    fn smoothing(&self) -> SmoothMaxParams {
        self.smoothing
    }

    fn eval_stack(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<StackEval> {
        check_point_dim(self, x)?;
        let (xc, rot) = self.pose(lambda)?;
        let v = lambda.values();
        let (s, c) = v[2].sin_cos();
        // dR/dθ and its transpose.
        let drot_t = Matrix2::new(-s, c, -c, -s);

        let rel = nalgebra::Vector2::new(x[0] - xc.x, x[1] - xc.y);
        let jac_x = &self.base_a * widen(rot.transpose());
        let f = &jac_x * rel - &self.base_b;

        // ∂F/∂λ: translation block is −∂F/∂x, rotation column is
        // A₀ (dR/dθ)ᵀ (x − x_c).
        let dtheta = &self.base_a * (drot_t * rel);
        let q = self.constraint_count();
        let mut jac_lambda = DMatrix::zeros(q, 3);
        jac_lambda.view_mut((0, 0), (q, 2)).copy_from(&(-&jac_x));
        jac_lambda.set_column(2, &dtheta);

        // Affine in x: no state curvature.  The mixed block ∂²F^k/∂x∂θ is
        // row k of A₀ (dR/dθ)ᵀ; the translation components don't enter
        // ∂F/∂x at all.
        let mixed = &self.base_a * drot_t;
        let mut hess_xx = Vec::with_capacity(q);
        let mut hess_xlambda = Vec::with_capacity(q);
        for k in 0..q {
            hess_xx.push(DMatrix::zeros(2, 2));
            let mut hx = DMatrix::zeros(2, 3);
            hx[(0, 2)] = mixed[(k, 0)];
            hx[(1, 2)] = mixed[(k, 1)];
            hess_xlambda.push(hx);
        }

        Ok(StackEval {
            f: DVector::from_iterator(q, f.iter().cloned()),
            jac_x,
            jac_lambda,
            hess_xx,
            hess_xlambda,
        })
    }

    fn eval_values(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<DVector<f64>> {
        check_point_dim(self, x)?;
        let (xc, rot) = self.pose(lambda)?;
        let rel = nalgebra::Vector2::new(x[0] - xc.x, x[1] - xc.y);
        let body = rot.transpose() * rel;
        let f = &self.base_a * body - &self.base_b;
        Ok(DVector::from_iterator(f.len(), f.iter().cloned()))
    }

    fn interior_hint(&self, lambda: &ParamVector) -> DVector<f64> {
        match self.pose(lambda) {
            Ok((xc, _)) => DVector::from_row_slice(&[xc.x, xc.y]),
            Err(_) => DVector::zeros(2),
        }
    }
}

/// Intersects adjacent halfspace boundaries and keeps the feasible corners,
/// sorted counterclockwise around their centroid.
fn enumerate_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<[f64; 2]>> {
    let q = a.nrows();
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for i in 0..q {
        for j in (i + 1)..q {
            let m = Matrix2::new(a[(i, 0)], a[(i, 1)], a[(j, 0)], a[(j, 1)]);
            let det = m.determinant();
            if det.abs() < 1e-12 {
                continue;
            }
            let rhs = nalgebra::Vector2::new(b[i], b[j]);
            let p = m.try_inverse().unwrap() * rhs;
            let feasible = (0..q).all(|k| a[(k, 0)] * p.x + a[(k, 1)] * p.y - b[k] <= 1e-9);
            if feasible && !pts.iter().any(|v| (v[0] - p.x).abs() + (v[1] - p.y).abs() < 1e-9) {
                pts.push([p.x, p.y]);
            }
        }
    }
    if pts.len() < 3 {
        return Err(Error::InvalidInput(
            "halfspaces do not bound a full-dimensional polytope".into(),
        ));
    }
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
    pts.sort_by(|p, r| {
        let pa = (p[1] - cy).atan2(p[0] - cx);
        let ra = (r[1] - cy).atan2(r[0] - cx);
        pa.partial_cmp(&ra).unwrap()
    });
    Ok(pts)
}

/// Intersection of two congruent balls with translating centers: a small
/// curved two-constraint stack exercising the non-affine derivative paths.
///
/// With parameters `λ ∈ ℝ²` (the lens center) the constraints are
///
/// ```text
/// F^k(x, λ) = ½ (‖x − (λ ± o)‖² − r²),   k = 1, 2,
/// ```
///
/// where `±o` is a fixed half-offset between the ball centers.  Both
/// constraints carry identity state curvature, which is what makes the
/// smooth distance machinery work even though `∂F/∂x` is only rank 1 at
/// isolated points.
#[derive(Debug, Clone)]
pub struct SmoothLens {
    radius: f64,
    half_offset: [f64; 2],
    smoothing: SmoothMaxParams,
}

impl SmoothLens {
    pub fn new(radius: f64, half_offset: [f64; 2], smoothing: SmoothMaxParams) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "lens radius must be finite and > 0, got {radius}"
            )));
        }
        let off = (half_offset[0] * half_offset[0] + half_offset[1] * half_offset[1]).sqrt();
        if !off.is_finite() || off >= radius {
            return Err(Error::InvalidInput(
                "lens half-offset must be smaller than the radius (nonempty interior)".into(),
            ));
        }
        Ok(Self {
            radius,
            half_offset,
            smoothing,
        })
    }
}

impl SetSpec for SmoothLens {
    fn ambient_dim(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn constraint_count(&self) -> usize {
        2
    }

    fn smoothing(&self) -> SmoothMaxParams {
        self.smoothing
    }

    fn eval_stack(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<StackEval> {
        check_point_dim(self, x)?;
        if lambda.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "lens expects 2 parameters, got {}",
                lambda.len()
            )));
        }
        let l = lambda.values();
        let r2 = self.radius * self.radius;
        let mut f = DVector::zeros(2);
        let mut jac_x = DMatrix::zeros(2, 2);
        let mut jac_lambda = DMatrix::zeros(2, 2);
        let mut hess_xx = Vec::with_capacity(2);
        let mut hess_xlambda = Vec::with_capacity(2);
        for (k, sign) in [1.0, -1.0].iter().enumerate() {
            let cx = l[0] + sign * self.half_offset[0];
            let cy = l[1] + sign * self.half_offset[1];
            let dx = x[0] - cx;
            let dy = x[1] - cy;
            f[k] = 0.5 * (dx * dx + dy * dy - r2);
            jac_x[(k, 0)] = dx;
            jac_x[(k, 1)] = dy;
            jac_lambda[(k, 0)] = -dx;
            jac_lambda[(k, 1)] = -dy;
            hess_xx.push(DMatrix::identity(2, 2));
            hess_xlambda.push(-DMatrix::identity(2, 2));
        }
        Ok(StackEval {
            f,
            jac_x,
            jac_lambda,
            hess_xx,
            hess_xlambda,
        })
    }

    fn interior_hint(&self, lambda: &ParamVector) -> DVector<f64> {
        if lambda.len() == 2 {
            lambda.values().clone()
        } else {
            DVector::zeros(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn eps(v: f64) -> SmoothMaxParams {
        SmoothMaxParams::new(v).unwrap()
    }

    fn pose(x: f64, y: f64, th: f64) -> ParamVector {
        ParamVector::rigid_pose(x, y, th).unwrap()
    }

    #[test]
    fn param_vector_validation() {
        assert!(ParamVector::rigid_pose(0.0, 0.0, f64::NAN).is_err());
        assert!(ParamVector::generic(vec![1.0, f64::INFINITY]).is_err());
        let p = pose(1.0, 2.0, 0.5);
        assert_eq!(p.len(), 3);
        assert_eq!(p.kind(), ParamKind::RigidPose2d);
        let n = p.nudged(2, 0.1).unwrap();
        assert_relative_eq!(n.values()[2], 0.6);
    }

    #[test]
    fn unit_box_membership_margin_example() {
        // Origin inside the unit box at ε = 1: ln(1 + 4 e⁻¹) − ln 4,
        // computed with 40-digit arithmetic.
        let poly = RigidPolytope::unit_box(eps(1.0)).unwrap();
        let m = membership_margin(&poly, &DVector::from_row_slice(&[0.0, 0.0]), &pose(0.0, 0.0, 0.0))
            .unwrap();
        assert_relative_eq!(m, -0.4814619195654426, max_relative = 1e-14);

        // A point far outside has a large positive margin: ≈ 9 − ln 4.
        let far = membership_margin(&poly, &DVector::from_row_slice(&[10.0, 0.0]), &pose(0.0, 0.0, 0.0))
            .unwrap();
        assert_relative_eq!(far, 9.0 - 4.0_f64.ln(), epsilon = 1e-3);
    }

    #[test]
    fn rigid_motion_consistency() {
        let poly = RigidPolytope::regular_polygon(5, 0.8, eps(10.0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let identity = pose(0.0, 0.0, 0.0);
        for _ in 0..50 {
            let y = DVector::from_row_slice(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let (xc1, xc2, th) = (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let lam = pose(xc1, xc2, th);
            // World point R(θ) y + x_c must evaluate like body point y.
            let (s, c) = th.sin_cos();
            let world = DVector::from_row_slice(&[
                c * y[0] - s * y[1] + xc1,
                s * y[0] + c * y[1] + xc2,
            ]);
            let fw = poly.eval_values(&world, &lam).unwrap();
            let fb = poly.eval_values(&y, &identity).unwrap();
            for k in 0..poly.constraint_count() {
                assert_relative_eq!(fw[k], fb[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn derivative_blocks_match_finite_differences() {
        let poly = RigidPolytope::regular_polygon(6, 1.1, eps(5.0)).unwrap();
        let lens = SmoothLens::new(1.0, [0.4, 0.1], eps(5.0)).unwrap();
        let sets: [(&dyn SetSpec, ParamVector); 2] = [
            (&poly, pose(0.4, -0.2, 0.7)),
            (&lens, ParamVector::generic(vec![0.3, -0.5]).unwrap()),
        ];
        let x = DVector::from_row_slice(&[0.9, 0.6]);
        let h = 1e-6;
        for (set, lam) in sets {
            let ev = set.eval_stack(&x, &lam).unwrap();
            // ∂F/∂x and ∂²F/∂x² (per constraint).
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fp = set.eval_values(&xp, &lam).unwrap();
                let fm = set.eval_values(&xm, &lam).unwrap();
                let jp = set.eval_stack(&xp, &lam).unwrap().jac_x;
                let jm = set.eval_stack(&xm, &lam).unwrap().jac_x;
                for k in 0..set.constraint_count() {
                    let fd = (fp[k] - fm[k]) / (2.0 * h);
                    assert_relative_eq!(ev.jac_x[(k, i)], fd, max_relative = 1e-5, epsilon = 1e-9);
                    for r in 0..2 {
                        let fd2 = (jp[(k, r)] - jm[(k, r)]) / (2.0 * h);
                        assert_relative_eq!(
                            ev.hess_xx[k][(r, i)],
                            fd2,
                            max_relative = 1e-5,
                            epsilon = 1e-7
                        );
                    }
                }
            }
            // ∂F/∂λ and ∂²F/∂x∂λ.
            for m in 0..set.param_dim() {
                let lp = lam.nudged(m, h).unwrap();
                let lm = lam.nudged(m, -h).unwrap();
                let fp = set.eval_values(&x, &lp).unwrap();
                let fm = set.eval_values(&x, &lm).unwrap();
                let jp = set.eval_stack(&x, &lp).unwrap().jac_x;
                let jm = set.eval_stack(&x, &lm).unwrap().jac_x;
                for k in 0..set.constraint_count() {
                    let fd = (fp[k] - fm[k]) / (2.0 * h);
                    assert_relative_eq!(
                        ev.jac_lambda[(k, m)],
                        fd,
                        max_relative = 1e-5,
                        epsilon = 1e-9
                    );
                    for r in 0..2 {
                        let fd2 = (jp[(k, r)] - jm[(k, r)]) / (2.0 * h);
                        assert_relative_eq!(
                            ev.hess_xlambda[k][(r, m)],
                            fd2,
                            max_relative = 1e-5,
                            epsilon = 1e-7
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn interior_point_has_clearance() {
        let poly = RigidPolytope::regular_polygon(4, 0.9, eps(20.0)).unwrap();
        let lam = pose(3.0, -2.0, 1.2);
        let x = find_interior_point(&poly, &lam).unwrap();
        let f = poly.eval_values(&x, &lam).unwrap();
        assert!(f.iter().all(|&v| v <= -1e-9));
        // The hint (pose center) is deep inside, so the search should land
        // right on it.
        assert_relative_eq!(x[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(x[1], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn interior_point_from_bad_hint() {
        // A lens whose hint (its parameter point) is the natural center;
        // shift the parameters so the Newton descent has real work to do
        // from the generic zero hint of a wrapper set.
        struct Shifted(SmoothLens);
        impl SetSpec for Shifted {
            fn ambient_dim(&self) -> usize {
                2
            }
            fn param_dim(&self) -> usize {
                2
            }
            fn constraint_count(&self) -> usize {
                2
            }
            fn smoothing(&self) -> SmoothMaxParams {
                self.0.smoothing()
            }
            fn eval_stack(&self, x: &DVector<f64>, lambda: &ParamVector) -> Result<StackEval> {
                self.0.eval_stack(x, lambda)
            }
            // Deliberately poor hint far outside the set.
        }
        let lens = Shifted(SmoothLens::new(0.8, [0.2, 0.0], eps(10.0)).unwrap());
        let lam = ParamVector::generic(vec![6.0, 5.0]).unwrap();
        let x = find_interior_point(&lens, &lam).unwrap();
        let f = lens.eval_values(&x, &lam).unwrap();
        assert!(f.iter().all(|&v| v <= -1e-9));
    }

    #[test]
    fn degenerate_strip_is_rejected() {
        // Two parallel halfspaces only: unbounded strip.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let b = DVector::from_row_slice(&[1.0, 1.0]);
        let err = RigidPolytope::new(a, b, eps(1.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));

        // Three halfspaces whose normals still leave a half-plane open.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.1, 1.0, -0.1]);
        let b = DVector::from_row_slice(&[1.0, 1.0, 1.0]);
        assert!(RigidPolytope::new(a, b, eps(1.0)).is_err());
    }

    #[test]
    fn empty_interior_is_rejected() {
        // Bounded but empty: x ≤ −1, −x ≤ −1 is infeasible; add vertical
        // caps to pass the angle test.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DVector::from_row_slice(&[-1.0, -1.0, 1.0, 1.0]);
        let err = RigidPolytope::new(a, b, eps(1.0)).unwrap_err();
        // Vertex enumeration finds no corners, or the interior search fails;
        // either way construction must not succeed.
        assert!(matches!(err, Error::InvalidInput(_) | Error::EmptyInterior));
    }

    #[test]
    fn regular_polygon_geometry() {
        let sq = RigidPolytope::regular_polygon(4, std::f64::consts::SQRT_2, eps(1.0)).unwrap();
        // Circumradius √2 gives the unit box rotated 45°... with face
        // normals on the axes, i.e. exactly the unit box.
        let f = sq
            .eval_values(&DVector::from_row_slice(&[1.0, 0.0]), &pose(0.0, 0.0, 0.0))
            .unwrap();
        assert_relative_eq!(f.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 0.0, epsilon = 1e-12);
        assert_eq!(sq.world_vertices(&pose(0.0, 0.0, 0.0)).unwrap().len(), 4);
        assert_relative_eq!(sq.circumradius(), std::f64::consts::SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn vertices_follow_the_pose() {
        let poly = RigidPolytope::regular_polygon(3, 1.0, eps(1.0)).unwrap();
        let vs = poly
            .world_vertices(&pose(5.0, 1.0, std::f64::consts::FRAC_PI_2))
            .unwrap();
        assert_eq!(vs.len(), 3);
        for v in &vs {
            let d = ((v[0] - 5.0).powi(2) + (v[1] - 1.0).powi(2)).sqrt();
            assert_relative_eq!(d, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn standard_conditions_hold_for_polytopes() {
        let poly = RigidPolytope::regular_polygon(5, 1.0, eps(20.0)).unwrap();
        let report = verify_standard_conditions(&poly, &pose(1.0, 2.0, 0.3), 64, 42).unwrap();
        assert!(report.all_hold(), "{report:?}");
        assert_eq!(report.convexity_violations, 0);
        assert!(report.interior_clearance > 0.1);
    }

    #[test]
    fn standard_conditions_flag_the_lens_rank() {
        // The lens is convex, bounded, and solid, but its 2×2 Jacobian
        // drops rank on a curve; sampled rank checking is expected to
        // notice at some draw or report a poor ratio without breaking
        // convexity/boundedness.
        let lens = SmoothLens::new(1.0, [0.3, 0.0], eps(10.0)).unwrap();
        let lam = ParamVector::generic(vec![0.0, 0.0]).unwrap();
        let report = verify_standard_conditions(&lens, &lam, 64, 3).unwrap();
        assert_eq!(report.convexity_violations, 0);
        assert!(report.bounded);
        assert!(report.has_interior);
    }

    #[test]
    fn smooth_boundary_encloses_polytope_face_points() {
        // Points just inside the face midpoints of the exact polytope are
        // always smooth members (triangle vertices are the known exception).
        let poly = RigidPolytope::regular_polygon(4, 1.0, eps(20.0)).unwrap();
        let lam = pose(0.7, -0.4, 0.9);
        let verts = poly.world_vertices(&lam).unwrap();
        for i in 0..verts.len() {
            let j = (i + 1) % verts.len();
            let mid = DVector::from_row_slice(&[
                0.5 * (verts[i][0] + verts[j][0]) * 0.999 + 0.001 * lam.values()[0],
                0.5 * (verts[i][1] + verts[j][1]) * 0.999 + 0.001 * lam.values()[1],
            ]);
            let m = membership_margin(&poly, &mid, &lam).unwrap();
            assert!(m <= 0.0, "face midpoint margin {m} should be nonpositive");
        }
    }

    proptest! {
        #[test]
        fn interior_points_of_shrunk_polytope_are_members(
            seed in 0u64..500,
        ) {
            // Containment of the exact set in the smooth set, probed on
            // points with a small clearance from the boundary.
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sides = rng.gen_range(3usize..=7);
            let radius = rng.gen_range(0.6..1.6);
            let e = [50.0, 100.0, 200.0, 400.0][rng.gen_range(0usize..4)];
            let poly = RigidPolytope::regular_polygon(sides, radius, eps(e)).unwrap();
            let lam = pose(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.2..3.2),
            );
            let center = find_interior_point(&poly, &lam).unwrap();
            let verts = poly.world_vertices(&lam).unwrap();
            for _ in 0..4 {
                // Random convex combination shrunk 20% toward the center.
                let mut wsum = 0.0;
                let mut p = [0.0, 0.0];
                for v in &verts {
                    let w: f64 = rng.gen_range(0.0..1.0);
                    wsum += w;
                    p[0] += w * v[0];
                    p[1] += w * v[1];
                }
                let x = DVector::from_row_slice(&[
                    0.8 * p[0] / wsum + 0.2 * center[0],
                    0.8 * p[1] / wsum + 0.2 * center[1],
                ]);
                let m = membership_margin(&poly, &x, &lam).unwrap();
                prop_assert!(m <= 0.0, "margin {} at clearance point", m);
            }
        }
    }
}
