//! Brute-force reference implementations used only by tests and the
//! `grad-check` CLI.
//!
//! Everything here trades speed for independence: the exact polytope
//! distance never touches the smooth solver, the finite-difference
//! gradient never touches the KKT sensitivity system, and the exhaustive
//! QP re-derives every candidate active set from scratch.  Production code
//! must not call into this module.

use nalgebra::{DMatrix, DVector};

use crate::cbf::{FilteredInput, QpStatus, SafetyConstraintRow};
use crate::sets::ParamVector;
use crate::{Error, Result};

/// Reference/production comparison used in validation reports.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub reference: f64,
    pub produced: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Compares with a relative tolerance and an absolute floor; `pass`
    /// reflects exactly the stated tolerance.
    pub fn compare(
        name: impl Into<String>,
        reference: f64,
        produced: f64,
        rel_tol: f64,
        abs_floor: f64,
    ) -> Self {
        let abs_err = (reference - produced).abs();
        let rel_err = abs_err / reference.abs().max(f64::MIN_POSITIVE);
        let tolerance = (rel_tol * reference.abs()).max(abs_floor);
        Self {
            name: name.into(),
            reference,
            produced,
            abs_err,
            rel_err,
            tolerance,
            pass: abs_err <= tolerance,
        }
    }
}

/// World-frame halfspaces of a posed polytope: `{x : A' x ≤ b'}` with
/// `A' = A·R(θ)ᵀ` and `b' = b + A'·x_c`.
fn world_form(a: &DMatrix<f64>, b: &DVector<f64>, pose: &ParamVector) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if a.ncols() != 2 {
        return Err(Error::InvalidInput(
            "exact distance oracle handles planar polytopes only".into(),
        ));
    }
    if a.nrows() != b.len() {
        return Err(Error::InvalidInput(format!(
            "halfspace count mismatch: {} rows vs {} offsets",
            a.nrows(),
            b.len()
        )));
    }
    let v = pose.values();
    if v.len() != 3 {
        return Err(Error::InvalidInput(
            "polytope pose must be (x_c1, x_c2, theta)".into(),
        ));
    }
    let (c, s) = (v[2].cos(), v[2].sin());
    let mut aw = DMatrix::zeros(a.nrows(), 2);
    let mut bw = DVector::zeros(b.len());
    for k in 0..a.nrows() {
        // Row times R(θ)ᵀ.
        aw[(k, 0)] = a[(k, 0)] * c - a[(k, 1)] * s;
        aw[(k, 1)] = a[(k, 0)] * s + a[(k, 1)] * c;
        bw[k] = b[k] + aw[(k, 0)] * v[0] + aw[(k, 1)] * v[1];
    }
    Ok((aw, bw))
}

fn compactness_check(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() < 3 {
        return Err(Error::InvalidInput(
            "a planar polytope needs at least 3 halfspaces to be compact".into(),
        ));
    }
    let mut angles: Vec<f64> = (0..a.nrows())
        .map(|k| {
            let n = (a[(k, 0)], a[(k, 1)]);
            f64::atan2(n.1, n.0)
        })
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut max_gap: f64 = 0.0;
    for i in 0..angles.len() {
        let next = if i + 1 == angles.len() {
            angles[0] + std::f64::consts::TAU
        } else {
            angles[i + 1]
        };
        max_gap = max_gap.max(next - angles[i]);
    }
    if max_gap >= std::f64::consts::PI - 1e-12 {
        return Err(Error::InvalidInput(
            "unbounded polytope: outward normals leave a halfplane uncovered".into(),
        ));
    }
    Ok(())
}

fn inside(a: &DMatrix<f64>, b: &DVector<f64>, p: &DVector<f64>, tol: f64) -> bool {
    (0..a.nrows()).all(|k| a.row(k).transpose().dot(p) - b[k] <= tol)
}

/// Vertices of `{x : Ax ≤ b}` in counterclockwise order: facet-pair
/// intersections filtered by feasibility, deduplicated, sorted around the
/// vertex centroid.
fn hull_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let q = a.nrows();
    let mut verts: Vec<DVector<f64>> = Vec::new();
    for i in 0..q {
        for j in (i + 1)..q {
            let det = a[(i, 0)] * a[(j, 1)] - a[(i, 1)] * a[(j, 0)];
            if det.abs() <= 1e-14 {
                continue;
            }
            let x = (b[i] * a[(j, 1)] - b[j] * a[(i, 1)]) / det;
            let y = (a[(i, 0)] * b[j] - a[(j, 0)] * b[i]) / det;
            let v = DVector::from_row_slice(&[x, y]);
            if inside(a, b, &v, 1e-9)
                && verts.iter().all(|w| (w - &v).norm() > 1e-9 * (1.0 + v.norm()))
            {
                verts.push(v);
            }
        }
    }
    if verts.is_empty() {
        return Err(Error::InvalidInput(
            "polytope has no vertices: empty or degenerate".into(),
        ));
    }
    let n = verts.len() as f64;
    let centroid = verts.iter().fold(DVector::zeros(2), |acc, v| acc + v) / n;
    verts.sort_by(|u, v| {
        let au = f64::atan2(u[1] - centroid[1], u[0] - centroid[0]);
        let av = f64::atan2(v[1] - centroid[1], v[0] - centroid[0]);
        au.partial_cmp(&av).unwrap()
    });
    Ok(verts)
}

/// Distance between segments `[p1, q1]` and `[p2, q2]`; zero when they
/// cross.  Zero-length segments degenerate to points and are handled.
fn segment_distance(p1: &DVector<f64>, q1: &DVector<f64>, p2: &DVector<f64>, q2: &DVector<f64>) -> f64 {
    let orient = |a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>| {
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    };
    let (o1, o2) = (orient(p1, q1, p2), orient(p1, q1, q2));
    let (o3, o4) = (orient(p2, q2, p1), orient(p2, q2, q1));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return 0.0; // proper crossing
    }
    let point_seg = |p: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| {
        let ab = b - a;
        let nn = ab.norm_squared();
        let t = if nn > 0.0 {
            ((p - a).dot(&ab) / nn).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - a - ab * t).norm()
    };
    point_seg(p2, p1, q1)
        .min(point_seg(q2, p1, q1))
        .min(point_seg(p1, p2, q2))
        .min(point_seg(q1, p2, q2))
}

/// Minimum Euclidean distance between two exact (unsmoothed) posed
/// polytopes: the minimum over boundary edge pairs, which is exact for
/// compact planar polytopes.  Returns 0 when they overlap.
pub fn exact_polytope_distance(
    a1: &DMatrix<f64>,
    b1: &DVector<f64>,
    pose1: &ParamVector,
    a2: &DMatrix<f64>,
    b2: &DVector<f64>,
    pose2: &ParamVector,
) -> Result<f64> {
    let (aw1, bw1) = world_form(a1, b1, pose1)?;
    let (aw2, bw2) = world_form(a2, b2, pose2)?;
    compactness_check(&aw1)?;
    compactness_check(&aw2)?;
    let v1 = hull_vertices(&aw1, &bw1)?;
    let v2 = hull_vertices(&aw2, &bw2)?;

    // Convex bodies overlap exactly when some vertex lands inside the other
    // body or some boundary edges cross; the latter falls out of the edge
    // sweep below as a zero distance.
    if v1.iter().any(|v| inside(&aw2, &bw2, v, 1e-12))
        || v2.iter().any(|v| inside(&aw1, &bw1, v, 1e-12))
    {
        return Ok(0.0);
    }

    let mut best = f64::INFINITY;
    for i in 0..v1.len() {
        let p1 = &v1[i];
        let q1 = &v1[(i + 1) % v1.len()];
        for j in 0..v2.len() {
            let p2 = &v2[j];
            let q2 = &v2[(j + 1) % v2.len()];
            best = best.min(segment_distance(p1, q1, p2, q2));
        }
    }
    Ok(best)
}

/// Central finite differences of a scalar function, one coordinate at a
/// time.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<f64>,
    theta: &DVector<f64>,
    step: f64,
) -> Result<DVector<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut grad = DVector::zeros(theta.len());
    for k in 0..theta.len() {
        let mut plus = theta.clone();
        plus[k] += step;
        let mut minus = theta.clone();
        minus[k] -= step;
        grad[k] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Reference QP solver: enumerate all `2^J` active subsets, solve each
/// equality-constrained projection, and keep the best candidate whose
/// multipliers and feasibility check out.
pub fn exhaustive_qp(u_nom: &DVector<f64>, rows: &[SafetyConstraintRow]) -> Result<FilteredInput> {
    let j = rows.len();
    if j > 12 {
        return Err(Error::InvalidInput(format!(
            "exhaustive QP oracle caps at 12 rows, got {j}"
        )));
    }
    let p = u_nom.len();
    for row in rows {
        if row.coeff.len() != p {
            return Err(Error::InvalidInput(
                "row dimension does not match input dimension".into(),
            ));
        }
    }

    let value = |u: &DVector<f64>, k: usize| rows[k].coeff.dot(u) + rows[k].offset;
    let all_feasible = |u: &DVector<f64>| {
        (0..j).all(|k| {
            let scale = 1.0 + rows[k].offset.abs() + rows[k].coeff.norm() * u.norm();
            value(u, k) >= -1e-9 * scale
        })
    };

    let mut best: Option<(f64, DVector<f64>, Vec<usize>)> = None;
    for mask in 0u32..(1_u32 << j) {
        let members: Vec<usize> = (0..j).filter(|i| mask & (1 << i) != 0).collect();
        if members.len() > p {
            continue;
        }
        let (cand, nus) = if members.is_empty() {
            (u_nom.clone(), DVector::zeros(0))
        } else {
            let m = members.len();
            let mut cmat = DMatrix::zeros(m, p);
            let mut rhs = DVector::zeros(m);
            for (r, &i) in members.iter().enumerate() {
                cmat.row_mut(r).copy_from(&rows[i].coeff.transpose());
                rhs[r] = -(rows[i].offset + rows[i].coeff.dot(u_nom));
            }
            // Solve through a thin QR of Cᵀ rather than the Gram matrix so
            // the candidate point carries one power of the conditioning,
            // not two; otherwise nearly parallel corners far from `u_nom`
            // cannot be compared against the production solver tightly.
            let qr = cmat.transpose().qr();
            let (qmat, rmat) = (qr.q(), qr.r());
            let max_diag = (0..m).map(|k| rmat[(k, k)].abs()).fold(0.0_f64, f64::max);
            if (0..m).any(|k| rmat[(k, k)].abs() <= 1e-12 * max_diag) {
                continue;
            }
            let w = match rmat.transpose().solve_lower_triangular(&rhs) {
                Some(w) => w,
                None => continue,
            };
            let nu = match rmat.solve_upper_triangular(&w) {
                Some(nu) if nu.iter().all(|v| v.is_finite()) => nu,
                _ => continue,
            };
            (u_nom + &qmat * &w, nu)
        };
        if nus.iter().any(|&v| v < -1e-10) || !all_feasible(&cand) {
            continue;
        }
        let obj = (&cand - u_nom).norm_squared();
        if best.as_ref().map_or(true, |(b, _, _)| obj < *b) {
            best = Some((obj, cand, members));
        }
    }

    Ok(match best {
        Some((_, u, members)) => FilteredInput {
            active_rows: members.iter().map(|&i| rows[i].obstacle_id).collect(),
            u,
            status: QpStatus::Optimal,
        },
        None => FilteredInput {
            u: DVector::zeros(p),
            status: QpStatus::Infeasible,
            active_rows: Vec::new(),
        },
    })
}
