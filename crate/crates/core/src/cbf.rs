//! Barrier functions over the smoothed distance and the safety-filter QP.
//!
//! For each obstacle `j` the barrier is `h_j = d_ε⁺(λ_E, λ_j) − R`; safety
//! asks that along the closed loop `ḣ_j ≥ −α(h_j)` for a class-K `α`.
//! With control-affine parameter dynamics `λ̇_E = f + g u` and known
//! obstacle motion `λ̇_j`, the condition is affine in the input:
//!
//! ```text
//! (∂h_j/∂λ_E)·g · u  +  (∂h_j/∂λ_E)·f + (∂h_j/∂λ_j)·λ̇_j + α(h_j)  ≥  0 .
//! ```
//!
//! [`assemble_rows`] builds one such row per obstacle and
//! [`solve_filter_qp`] projects a nominal input onto the feasible set,
//! returning the closest safe input in the Euclidean sense.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distance::{DistanceSolution, DistanceStatus};
use crate::sensitivity::DistanceGradient;
use crate::{Error, Result};

/// Class-K rate shaping for the barrier inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlphaSpec {
    /// `α(h) = γ·h`.
    Linear { gamma: f64 },
    /// `α(h) = γ·h³`; flatter near the boundary, more permissive far away.
    Cubic { gamma: f64 },
}

impl AlphaSpec {
    pub fn validate(&self) -> Result<()> {
        let gamma = match self {
            AlphaSpec::Linear { gamma } | AlphaSpec::Cubic { gamma } => *gamma,
        };
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "class-K rate gamma must be positive and finite, got {gamma}"
            )));
        }
        Ok(())
    }

    pub fn eval(&self, h: f64) -> f64 {
        match self {
            AlphaSpec::Linear { gamma } => gamma * h,
            AlphaSpec::Cubic { gamma } => gamma * h * h * h,
        }
    }
}

impl Default for AlphaSpec {
    fn default() -> Self {
        AlphaSpec::Linear { gamma: 1.0 }
    }
}

/// Safety margin and rate shaping shared by all obstacles of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    /// Margin subtracted from the squared-length distance value.  Note the
    /// units: the barrier compares against `½‖·‖²`, so a clearance of `r`
    /// meters corresponds to `R = ½r²` (see [`BarrierConfig::from_margin_distance`]).
    pub r: f64,
    pub alpha: AlphaSpec,
}

impl BarrierConfig {
    pub fn new(r: f64, alpha: AlphaSpec) -> Result<Self> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "safety margin R must be nonnegative and finite, got {r}"
            )));
        }
        alpha.validate()?;
        Ok(Self { r, alpha })
    }

    /// Convenience: specify the margin as a plain distance `r` (meters);
    /// sets `R = ½r²` to match the squared-length units of the distance
    /// value.
    pub fn from_margin_distance(r: f64, alpha: AlphaSpec) -> Result<Self> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "margin distance must be nonnegative and finite, got {r}"
            )));
        }
        Self::new(0.5 * r * r, alpha)
    }
}

/// One affine-in-`u` safety constraint: `coeff·u + offset ≥ 0`.
#[derive(Debug, Clone)]
pub struct SafetyConstraintRow {
    pub coeff: DVector<f64>,
    pub offset: f64,
    pub obstacle_id: usize,
    pub h_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// The rows admit no input; the caller should fall back to a safe
    /// default (the simulation brakes with `u = 0`).
    Infeasible,
}

/// Result of the safety-filter projection.
#[derive(Debug, Clone)]
pub struct FilteredInput {
    pub u: DVector<f64>,
    pub status: QpStatus,
    /// Obstacle ids whose rows are tight at the solution.
    pub active_rows: Vec<usize>,
}

/// Barrier value for one ego/obstacle pair.
///
/// `Optimal` solutions map to `d − R`; `Intersecting` maps to `−R`, the
/// most pessimistic value with zero separation.  Other statuses should be
/// handled by the caller before getting here (the simulation records them
/// as failed ticks); they fall through to `d − R` on whatever value the
/// solver last had.
pub fn barrier_value(d: &DistanceSolution, cfg: &BarrierConfig) -> f64 {
    match d.status {
        DistanceStatus::Intersecting => -cfg.r,
        _ => d.value - cfg.r,
    }
}

/// Everything the row assembly needs about one obstacle.
#[derive(Debug, Clone)]
pub struct ObstacleTerm {
    pub obstacle_id: usize,
    /// Distance gradient for this ego/obstacle pair.
    pub gradient: DistanceGradient,
    /// Barrier value `h_j` for this pair.
    pub h: f64,
    /// Parameter velocity of the obstacle, length matching
    /// `gradient.d_dlambda_j`.
    pub lambda_j_dot: DVector<f64>,
}

/// Builds one [`SafetyConstraintRow`] per obstacle from the pair gradients
/// and the ego dynamics evaluated at the current parameters.
///
/// `f` is the drift (length `M_E`) and `g` the input matrix
/// (`M_E × P_E`) of the ego's control-affine dynamics.
pub fn assemble_rows(
    terms: &[ObstacleTerm],
    f: &DVector<f64>,
    g: &DMatrix<f64>,
    cfg: &BarrierConfig,
) -> Result<Vec<SafetyConstraintRow>> {
    if g.nrows() != f.len() {
        return Err(Error::InvalidInput(format!(
            "drift has length {} but input matrix has {} rows",
            f.len(),
            g.nrows()
        )));
    }
    let mut rows = Vec::with_capacity(terms.len());
    for term in terms {
        let dh_de = &term.gradient.d_dlambda_e;
        let dh_dj = &term.gradient.d_dlambda_j;
        if dh_de.len() != f.len() {
            return Err(Error::InvalidInput(format!(
                "obstacle {}: ego gradient length {} does not match dynamics dimension {}",
                term.obstacle_id,
                dh_de.len(),
                f.len()
            )));
        }
        if dh_dj.len() != term.lambda_j_dot.len() {
            return Err(Error::InvalidInput(format!(
                "obstacle {}: gradient length {} does not match velocity length {}",
                term.obstacle_id,
                dh_dj.len(),
                term.lambda_j_dot.len()
            )));
        }
        let coeff = g.transpose() * dh_de;
        let offset = dh_de.dot(f) + dh_dj.dot(&term.lambda_j_dot) + cfg.alpha.eval(term.h);
        rows.push(SafetyConstraintRow {
            coeff,
            offset,
            obstacle_id: term.obstacle_id,
            h_value: term.h,
        });
    }
    Ok(rows)
}

/// Feasibility slack below which a row counts as violated.
const FEAS_TOL: f64 = 1e-9;
/// Activity threshold for reporting a row as tight.
const ACTIVE_TOL: f64 = 1e-8;

/// Projects `u_nom` onto the rows' feasible set (minimum `‖u − u_nom‖²`).
///
/// Small problems (J ≤ 8) are solved by enumerating active subsets and
/// keeping the best KKT-consistent candidate; larger ones by projected
/// coordinate ascent on the dual.  `Infeasible` means the rows admit no
/// input at all; the returned `u` is then the zero (braking) input.
pub fn solve_filter_qp(u_nom: &DVector<f64>, rows: &[SafetyConstraintRow]) -> Result<FilteredInput> {
    let p = u_nom.len();
    for row in rows {
        if row.coeff.len() != p {
            return Err(Error::InvalidInput(format!(
                "row for obstacle {} has {} coefficients, input has length {}",
                row.obstacle_id,
                row.coeff.len(),
                p
            )));
        }
        if !(row.coeff.iter().all(|v| v.is_finite()) && row.offset.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "row for obstacle {} has nonfinite entries",
                row.obstacle_id
            )));
        }
    }

    // Degenerate rows with no input authority are constant truths or
    // constant contradictions.
    let mut live: Vec<&SafetyConstraintRow> = Vec::with_capacity(rows.len());
    for row in rows {
        if row.coeff.norm() <= 1e-14 {
            if row.offset < -FEAS_TOL {
                return Ok(infeasible(p));
            }
        } else {
            live.push(row);
        }
    }

    // Nominal input already safe: return it bit-for-bit.
    if live
        .iter()
        .all(|r| r.coeff.dot(u_nom) + r.offset >= 0.0)
    {
        return Ok(FilteredInput {
            u: u_nom.clone(),
            status: QpStatus::Optimal,
            active_rows: active_ids(u_nom, &live),
        });
    }

    let sol = if live.len() <= 8 {
        enumerate_subsets(u_nom, &live)
    } else {
        dual_ascent(u_nom, &live)
    };
    match sol {
        Some(u) => Ok(FilteredInput {
            active_rows: active_ids(&u, &live),
            u,
            status: QpStatus::Optimal,
        }),
        None => Ok(infeasible(p)),
    }
}

fn infeasible(p: usize) -> FilteredInput {
    FilteredInput {
        u: DVector::zeros(p),
        status: QpStatus::Infeasible,
        active_rows: Vec::new(),
    }
}

fn active_ids(u: &DVector<f64>, rows: &[&SafetyConstraintRow]) -> Vec<usize> {
    rows.iter()
        .filter(|r| {
            let scale = 1.0 + r.offset.abs() + r.coeff.norm() * u.norm();
            (r.coeff.dot(u) + r.offset).abs() <= ACTIVE_TOL * scale
        })
        .map(|r| r.obstacle_id)
        .collect()
}

fn feasible(u: &DVector<f64>, rows: &[&SafetyConstraintRow]) -> bool {
    rows.iter().all(|r| {
        let scale = 1.0 + r.offset.abs() + r.coeff.norm() * u.norm();
        r.coeff.dot(u) + r.offset >= -FEAS_TOL * scale
    })
}

/// Exhaustive active-set search: for each subset, solve the
/// equality-constrained projection in closed form and keep the best
/// candidate whose multipliers are nonnegative and which satisfies all
/// rows.
fn enumerate_subsets(u_nom: &DVector<f64>, rows: &[&SafetyConstraintRow]) -> Option<DVector<f64>> {
    let j = rows.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << j) {
        let members: Vec<usize> = (0..j).filter(|i| mask & (1 << i) != 0).collect();
        if let Some((u, nu)) = project_onto_subset(u_nom, rows, &members) {
            if nu.iter().all(|&v| v >= -1e-9) && feasible(&u, rows) {
                let obj = (&u - u_nom).norm_squared();
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    best = Some((obj, u));
                }
            }
        }
    }
    best.map(|(_, u)| u)
}

/// Equality-constrained projection onto `coeffᵢ·u + offsetᵢ = 0` for
/// `i ∈ members`; returns the point and its multipliers.
fn project_onto_subset(
    u_nom: &DVector<f64>,
    rows: &[&SafetyConstraintRow],
    members: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = members.len();
    if m == 0 {
        return Some((u_nom.clone(), DVector::zeros(0)));
    }
    let p = u_nom.len();
    if m > p {
        return None; // more equalities than dimensions: always rank-deficient here
    }
    let mut cmat = DMatrix::zeros(m, p);
    let mut rhs = DVector::zeros(m);
    for (r, &i) in members.iter().enumerate() {
        cmat.row_mut(r).copy_from(&rows[i].coeff.transpose());
        rhs[r] = -(rows[i].offset + rows[i].coeff.dot(u_nom));
    }
    // Thin QR of Cᵀ: with C Cᵀ = RᵀR, the displacement is `u − u_nom = Q w`
    // where `Rᵀ w = rhs`.  Going through `w` keeps the forward error of `u`
    // at one power of the constraint conditioning; forming the Gram matrix
    // squares it, which is visible at nearly parallel corners far from the
    // nominal input.
    let qr = cmat.transpose().qr();
    let (qmat, rmat) = (qr.q(), qr.r());
    let max_diag = (0..m).map(|k| rmat[(k, k)].abs()).fold(0.0_f64, f64::max);
    if (0..m).any(|k| rmat[(k, k)].abs() <= 1e-12 * max_diag) {
        return None; // rank-deficient subset; a neighboring subset covers it
    }
    let w = rmat.transpose().solve_lower_triangular(&rhs)?;
    let u = u_nom + &qmat * &w;
    let nu = rmat.solve_upper_triangular(&w)?;
    Some((u, nu))
}

/// Projected coordinate ascent on the dual
/// `max_{ν ≥ 0} −½ νᵀGν − νᵀq`, `G = CCᵀ`, `q = C·u_nom + offset`.
fn dual_ascent(u_nom: &DVector<f64>, rows: &[&SafetyConstraintRow]) -> Option<DVector<f64>> {
    let j = rows.len();
    let mut gram = DMatrix::zeros(j, j);
    let mut q = DVector::zeros(j);
    for a in 0..j {
        for b in 0..j {
            gram[(a, b)] = rows[a].coeff.dot(&rows[b].coeff);
        }
        q[a] = rows[a].coeff.dot(u_nom) + rows[a].offset;
    }
    let mut nu = DVector::zeros(j);
    for _ in 0..20_000 {
        let mut delta = 0.0_f64;
        for i in 0..j {
            if gram[(i, i)] <= 1e-16 {
                continue;
            }
            let grad_i = gram.row(i).transpose().dot(&nu) + q[i];
            let new = (nu[i] - grad_i / gram[(i, i)]).max(0.0);
            delta = delta.max((new - nu[i]).abs());
            nu[i] = new;
        }
        if nu.iter().any(|v| *v > 1e12) {
            return None; // unbounded dual: empty feasible set
        }
        if delta <= 1e-13 * (1.0 + nu.amax()) {
            break;
        }
    }
    let mut u = u_nom.clone();
    for i in 0..j {
        u += &rows[i].coeff * nu[i];
    }
    feasible(&u, rows).then_some(u)
}
