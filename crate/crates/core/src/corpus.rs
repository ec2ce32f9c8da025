//! Seeded random problem generators shared by the test suites, the
//! benchmark harness, and the `grad-check` CLI.
//!
//! All generators take a caller-owned RNG so corpora are reproducible from
//! a seed; nothing here draws from global randomness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::lse::SmoothMaxParams;
use crate::sets::{ParamVector, RigidPolytope};
use crate::Result;

/// A random compact polytope with 3–8 faces.
///
/// Construction guarantees: outward normals cover the circle with maximum
/// angular gap well below π (compactness), every normal has norm in
/// `[0.5, 1.5]`, and the local origin sits at least 0.4 deep (normalized by
/// the normal norm), so interior sampling near the origin is always safe.
pub fn random_polytope(rng: &mut impl Rng, smoothing: SmoothMaxParams) -> RigidPolytope {
    loop {
        let q = rng.gen_range(3..=8usize);
        let mut angles: Vec<f64> = (0..q)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut max_gap: f64 = 0.0;
        for i in 0..q {
            let next = if i + 1 == q {
                angles[0] + std::f64::consts::TAU
            } else {
                angles[i + 1]
            };
            max_gap = max_gap.max(next - angles[i]);
        }
        // Compactness needs the normals to cover more than a halfplane.
        // The tighter cap for q ≥ 4 keeps every vertex cone wide enough
        // that the smoothed boundary's corner bulge ~ln((q−1)/2)/(ε·‖a‖·
        // cos(gap/2)) stays within the face-offset bound ln(q+1)/(ε·‖a‖);
        // triangle corners are exempt because their bulge vanishes.
        let gap_cap = if q == 3 {
            std::f64::consts::PI - 0.2
        } else {
            105_f64.to_radians()
        };
        if max_gap >= gap_cap {
            continue;
        }
        let mut a = DMatrix::zeros(q, 2);
        let mut b = DVector::zeros(q);
        for (k, phi) in angles.iter().enumerate() {
            let scale = rng.gen_range(0.5..1.5);
            a[(k, 0)] = scale * phi.cos();
            a[(k, 1)] = scale * phi.sin();
            // Plane distance from the local origin in [0.4, 1.2].
            b[k] = scale * rng.gen_range(0.4..1.2);
        }
        if let Ok(poly) = RigidPolytope::new(a, b, smoothing) {
            return poly;
        }
    }
}

/// Uniform-ish pose with translation in `center ± spread` and a free angle.
pub fn random_pose_near(rng: &mut impl Rng, center: [f64; 2], spread: f64) -> ParamVector {
    ParamVector::rigid_pose(
        center[0] + rng.gen_range(-spread..spread),
        center[1] + rng.gen_range(-spread..spread),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("finite pose components")
}

/// One random ego/obstacle instance with a certified exact separation.
#[derive(Debug, Clone)]
pub struct DisjointPair {
    pub ego: RigidPolytope,
    pub obstacle: RigidPolytope,
    pub lambda_e: ParamVector,
    pub lambda_j: ParamVector,
    /// Lower bound on the exact Euclidean gap between the bodies.
    pub gap_floor: f64,
}

/// Random pair placed so the centers are `r_E + r_j + gap` apart, which
/// bounds the exact body gap below by `gap ∈ [0.3, 2.5]`.
///
/// The smoothed sets bulge past the exact ones by at most
/// `ln(q+1)/(ε·min‖a_k‖)` per set; with the corpus construction
/// (`‖a‖ ≥ 0.5`, `q ≤ 8`) that is below 0.09 per set for ε ≥ 50, so the
/// smoothed sets are disjoint too for any ε used by the test suites.
pub fn random_disjoint_pair(rng: &mut impl Rng, smoothing: SmoothMaxParams) -> DisjointPair {
    let ego = random_polytope(rng, smoothing);
    let obstacle = random_polytope(rng, smoothing);
    let gap = rng.gen_range(0.3..2.5);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let ce = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let dist = ego.circumradius() + obstacle.circumradius() + gap;
    let lambda_e = ParamVector::rigid_pose(
        ce[0],
        ce[1],
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("finite pose");
    let lambda_j = ParamVector::rigid_pose(
        ce[0] + dist * dir.cos(),
        ce[1] + dist * dir.sin(),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("finite pose");
    DisjointPair {
        ego,
        obstacle,
        lambda_e,
        lambda_j,
        gap_floor: gap,
    }
}

/// Smallest normal norm of the base halfspace description; appears in the
/// smoothing-error bound `ln(q+1)/(ε·min‖a_k‖)`.
pub fn min_normal_norm(poly: &RigidPolytope) -> f64 {
    let (a, _) = poly.base_halfspaces();
    (0..a.nrows())
        .map(|k| a.row(k).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Random point inside the exact body with normalized depth at least
/// `min_depth` (each constraint satisfies `F_k(x) ≤ −min_depth·‖a_k‖`).
///
/// Sampling: convex combination of the world vertices pulled toward their
/// centroid, rejection-checked against the depth requirement.
pub fn random_deep_point(
    rng: &mut impl Rng,
    poly: &RigidPolytope,
    lambda: &ParamVector,
    min_depth: f64,
) -> Result<DVector<f64>> {
    let verts = poly.world_vertices(lambda)?;
    let n = verts.len() as f64;
    let centroid = verts.iter().fold([0.0, 0.0], |acc, v| {
        [acc[0] + v[0] / n, acc[1] + v[1] / n]
    });
    let (a, b) = poly.world_halfspaces(lambda)?;
    for attempt in 0..1000 {
        // Random convex combination, shrunk toward the centroid; shrink
        // harder as attempts fail.
        let shrink = 0.8 * (0.97_f64).powi(attempt);
        let mut weights: Vec<f64> = (0..verts.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mix = verts
            .iter()
            .zip(&weights)
            .fold([0.0, 0.0], |acc, (v, w)| {
                [acc[0] + v[0] * w, acc[1] + v[1] * w]
            });
        let x = DVector::from_row_slice(&[
            centroid[0] + shrink * (mix[0] - centroid[0]),
            centroid[1] + shrink * (mix[1] - centroid[1]),
        ]);
        let deep = (0..a.nrows()).all(|k| {
            let margin = a.row(k).transpose().dot(&x) - b[k];
            margin <= -min_depth * a.row(k).norm()
        });
        if deep {
            return Ok(x);
        }
    }
    Err(crate::Error::NumericalFailure(format!(
        "could not sample a point {min_depth} deep; body too thin"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sets::membership_margin;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eps(v: f64) -> SmoothMaxParams {
        SmoothMaxParams::new(v).unwrap()
    }

    #[test]
    fn polytopes_are_valid_and_origin_deep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_polytope(&mut rng, eps(100.0));
            let (a, b) = p.base_halfspaces();
            assert!(a.nrows() >= 3 && a.nrows() <= 8);
            for k in 0..a.nrows() {
                let norm = a.row(k).norm();
                assert!((0.5..=1.5).contains(&norm));
                // Origin depth ≥ 0.4 normalized.
                assert!(b[k] / norm >= 0.4 - 1e-12);
            }
        }
    }

    #[test]
    fn pairs_have_certified_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let pair = random_disjoint_pair(&mut rng, eps(400.0));
            let d = crate::oracles::exact_polytope_distance(
                pair.ego.base_halfspaces().0,
                pair.ego.base_halfspaces().1,
                &pair.lambda_e,
                pair.obstacle.base_halfspaces().0,
                pair.obstacle.base_halfspaces().1,
                &pair.lambda_j,
            )
            .unwrap();
            assert!(
                d >= pair.gap_floor - 1e-9,
                "gap {d} below floor {}",
                pair.gap_floor
            );
        }
    }

    #[test]
    fn deep_points_are_inside_the_smoothed_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let p = random_polytope(&mut rng, eps(100.0));
            let lambda = random_pose_near(&mut rng, [0.5, -0.5], 1.0);
            let x = random_deep_point(&mut rng, &p, &lambda, 0.05).unwrap();
            let m = membership_margin(&p, &x, &lambda).unwrap();
            assert!(m <= 0.0, "margin {m} positive for a deep point");
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let pair = random_disjoint_pair(&mut rng, eps(200.0));
            (
                pair.lambda_e.values().clone(),
                pair.lambda_j.values().clone(),
                pair.ego.base_halfspaces().0.clone(),
            )
        };
        let (a1, b1, m1) = mk();
        let (a2, b2, m2) = mk();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(m1, m2);
    }
}
