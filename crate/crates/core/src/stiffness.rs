//! Constraint sensitivity at an RGP and the induced stiffness metric.

use nalgebra::{Matrix2x3, Vector2};

use crate::model::{Mat3, Vec3};
use crate::solver::cofactor;

pub type Jacobian = Matrix2x3<f64>;

/// Relative eigenvalue gap below which two eigenvalues count as equal.
pub const DEGENERACY_GAP: f64 = 1e-9;
/// Components with magnitude below this are skipped by the sign convention.
pub const SIGN_EPS: f64 = 1e-12;

/// Sensitivity of `[C_hydro, C_devia]` to the RGP position, neighbors and rest
/// state held fixed.
pub fn rgp_constraint_jacobian(rest: &[Vec3], weights: &[f64], f: &Mat3, a_inv: &Mat3) -> Jacobian {
    let s = rest
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (q, w)| acc + q * *w);
    let g = a_inv * s;
    let r1 = -(cofactor(f) * g);
    let r2 = -(f * g) * 2.0;
    Jacobian::from_rows(&[r1.transpose(), r2.transpose()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessMetric {
    pub j: Jacobian,
    pub k: Mat3,
    /// Ascending.
    pub eigenvalues: Vec3,
    /// Columns matched to `eigenvalues`, sign convention applied.
    pub eigenvectors: Mat3,
    /// Number of eigenvalues tied with the smallest (1 when it is simple).
    pub min_multiplicity: usize,
}

/// Flips `v` so its first component of magnitude above [`SIGN_EPS`] is positive.
pub fn apply_sign_convention(v: Vec3) -> Vec3 {
    match v.iter().find(|x| x.abs() > SIGN_EPS) {
        Some(x) if *x < 0.0 => -v,
        _ => v,
    }
}

/// Projection of the world axis that keeps the largest share of its length
/// under the projector `p` (ties to the lowest axis index), normalized.
fn canonical_in_subspace(p: &Mat3) -> Vec3 {
    let mut best = 0;
    let mut best_len = f64::NEG_INFINITY;
    for k in 0..3 {
        let len = p.column(k).norm();
        if len > best_len + 1e-12 {
            best = k;
            best_len = len;
        }
    }
    p.column(best).normalize()
}

/// `K = JᵀJ + εI` with its eigen-structure.
///
/// The decomposition is read off `J` directly: `JᵀJ` has rank at most two, so
/// the smallest eigenvalue of `K` is `ε` along `row1 × row2` and the other two
/// come from the 2×2 Gram matrix `JJᵀ`.
pub fn stiffness_metric(j: &Jacobian, eps: f64) -> StiffnessMetric {
    let k = j.transpose() * j + Mat3::identity() * eps;
    let r1: Vec3 = j.row(0).transpose();
    let r2: Vec3 = j.row(1).transpose();
    let (a, b, c) = (r1.norm_squared(), r1.dot(&r2), r2.norm_squared());
    let half_gap = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let mu1 = 0.5 * (a + c) + half_gap;
    let cross = r1.cross(&r2);
    let mu2 = if mu1 > 0.0 { cross.norm_squared() / mu1 } else { 0.0 };

    let eigenvalues = Vec3::new(eps, eps + mu2, eps + mu1);
    let top = eigenvalues[2];

    let v1 = if mu1 > 0.0 {
        let cand_a = Vector2::new(b, mu1 - a);
        let cand_b = Vector2::new(mu1 - c, b);
        let u = if cand_a.norm_squared() >= cand_b.norm_squared() { cand_a } else { cand_b };
        let u = if u.norm_squared() > 0.0 {
            u.normalize()
        } else if a >= c {
            Vector2::new(1.0, 0.0)
        } else {
            Vector2::new(0.0, 1.0)
        };
        Some((r1 * u[0] + r2 * u[1]).normalize())
    } else {
        None
    };

    let low_tie = mu2 < DEGENERACY_GAP * top;
    let all_tie = mu1 < DEGENERACY_GAP * top;
    let (e0, e1, e2, min_multiplicity) = match v1 {
        Some(v1) if !low_tie => {
            let n = cross.normalize();
            (n, n.cross(&v1), v1, 1)
        }
        Some(v1) if !all_tie => {
            let n = canonical_in_subspace(&(Mat3::identity() - v1 * v1.transpose()));
            (n, v1.cross(&n), v1, 2)
        }
        _ => {
            let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
            (x, y, z, 3)
        }
    };
    let eigenvectors = Mat3::from_columns(&[
        apply_sign_convention(e0),
        apply_sign_convention(e1),
        apply_sign_convention(e2),
    ]);
    StiffnessMetric {
        j: *j,
        k,
        eigenvalues,
        eigenvectors,
        min_multiplicity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompliantDirection {
    pub direction: Vec3,
    pub degenerate: bool,
}

/// Eigenvector of the smallest eigenvalue. When that eigenvalue is repeated
/// the canonical vector of its eigenspace is returned and flagged.
pub fn compliant_direction(metric: &StiffnessMetric) -> CompliantDirection {
    let m = metric.min_multiplicity;
    if m == 1 {
        return CompliantDirection {
            direction: metric.eigenvectors.column(0).into(),
            degenerate: false,
        };
    }
    let p = (0..m).fold(Mat3::zeros(), |acc, k| {
        let v: Vec3 = metric.eigenvectors.column(k).into();
        acc + v * v.transpose()
    });
    CompliantDirection {
        direction: apply_sign_convention(canonical_in_subspace(&p)),
        degenerate: true,
    }
}

impl StiffnessMetric {
    pub fn compliant(&self) -> CompliantDirection {
        compliant_direction(self)
    }

    pub fn eig_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn eig_max(&self) -> f64 {
        self.eigenvalues[2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::kernel_weight;
    use crate::solver::{deformation_from_offsets, deviatoric_constraint, hydrostatic_constraint, MomentMatrix};
    use nalgebra::{Rotation3, SymmetricEigen, Unit, SVD};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const R: f64 = 0.004;
    const EPS: f64 = 1e-6;

    fn random_j(rng: &mut ChaCha8Rng, scale: f64) -> Jacobian {
        Jacobian::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = Unit::new_normalize(Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).into_inner()
    }

    fn null_vector(j: &Jacobian) -> Vec3 {
        // Independent route: last right-singular vector of the padded 3x3 matrix.
        let padded = Mat3::from_rows(&[j.row(0).into_owned(), j.row(1).into_owned(), Vec3::zeros().transpose()]);
        let svd = SVD::new(padded, false, true);
        let vt = svd.v_t.unwrap();
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        vt.row(k).transpose().normalize()
    }

    #[test]
    fn zero_jacobian_is_isotropic_and_degenerate() {
        let m = stiffness_metric(&Jacobian::zeros(), EPS);
        assert_eq!(m.k, Mat3::identity() * EPS);
        assert_eq!(m.eigenvalues, Vec3::repeat(EPS));
        let c = m.compliant();
        assert!(c.degenerate);
        assert_eq!(c.direction, Vec3::x());
    }

    #[test]
    fn orthonormal_rows_leave_z_compliant() {
        let j = Jacobian::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let m = stiffness_metric(&j, EPS);
        assert_eq!(m.k, Mat3::from_diagonal(&Vec3::new(1.0 + EPS, 1.0 + EPS, EPS)));
        assert!((m.eigenvalues - Vec3::new(EPS, 1.0 + EPS, 1.0 + EPS)).norm() < 1e-15);
        let c = m.compliant();
        assert!(!c.degenerate);
        assert_eq!(c.direction, Vec3::z());
    }

    #[test]
    fn rank_one_jacobian_flags_two_dimensional_tie() {
        let j = Jacobian::new(0.0, 0.0, 3.0, 0.0, 0.0, 6.0);
        let m = stiffness_metric(&j, EPS);
        assert_eq!(m.min_multiplicity, 2);
        let c = m.compliant();
        assert!(c.degenerate);
        assert!((c.direction - Vec3::x()).norm() < 1e-15);
    }

    #[test]
    fn eigen_structure_matches_general_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for i in 0..200 {
            let scale = 10f64.powi(i % 7 - 2);
            let j = random_j(&mut rng, scale);
            let m = stiffness_metric(&j, EPS);
            let oracle = SymmetricEigen::new(m.k);
            let mut ev: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let top = ev[2];
            for k in 0..3 {
                assert!((ev[k] - m.eigenvalues[k]).abs() <= 1e-12 * top.max(1.0), "{ev:?} vs {}", m.eigenvalues);
            }
            assert!((m.eigenvectors.transpose() * m.eigenvectors - Mat3::identity()).norm() < 1e-9);
            for k in 0..3 {
                let v: Vec3 = m.eigenvectors.column(k).into();
                let resid = m.k * v - v * m.eigenvalues[k];
                assert!(resid.norm() <= 1e-9 * top.max(1.0), "column {k}: {resid}");
                let first = v.iter().find(|x| x.abs() > SIGN_EPS).unwrap();
                assert!(*first > 0.0);
            }
            assert!(m.eig_min() >= EPS);
            assert!((m.k - m.k.transpose()).norm() == 0.0);
        }
    }

    #[test]
    fn null_space_carries_epsilon_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let j = random_j(&mut rng, 5.0);
            let n = null_vector(&j);
            let m = stiffness_metric(&j, EPS);
            let quad = n.dot(&(m.k * n));
            assert!((quad - EPS).abs() < 1e-10);
            let c = m.compliant();
            assert!(!c.degenerate);
            let angle = c.direction.dot(&n).abs().min(1.0).acos();
            assert!(angle < 1e-6, "angle {angle}");
        }
    }

    #[test]
    fn quadratic_form_splits_into_null_and_row_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let j = random_j(&mut rng, 3.0);
            let m = stiffness_metric(&j, EPS);
            let n = null_vector(&j);
            let dp = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let dp_null = n * n.dot(&dp);
            let dp_row = dp - dp_null;
            let lhs = dp.dot(&(m.k * dp));
            let rhs = EPS * dp_null.norm_squared() + ((j * dp).norm_squared() + EPS * dp_row.norm_squared());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.max(1.0));
        }
    }

    fn scene_offsets(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec3>, Vec<Vec3>, Vec<f64>) {
        let rest: Vec<Vec3> = (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.6 * R..0.6 * R)))
            .collect();
        let m = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.2..0.2));
        let current = rest
            .iter()
            .map(|q| m * q + Vec3::from_fn(|_, _| rng.random_range(-5e-5..5e-5)))
            .collect();
        let w = rest.iter().map(|q| kernel_weight(q, R / 2.0)).collect();
        (rest, current, w)
    }

    #[test]
    fn symmetric_neighborhood_has_zero_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut rest = Vec::new();
        for _ in 0..5 {
            let q = Vec3::from_fn(|_, _| rng.random_range(-R..R));
            rest.push(q);
            rest.push(-q);
        }
        let w: Vec<f64> = rest.iter().map(|q| kernel_weight(q, R / 2.0)).collect();
        let mm = MomentMatrix::from_rest(&rest, &w).unwrap();
        let j = rgp_constraint_jacobian(&rest, &w, &Mat3::identity(), &mm.a_inv);
        assert_eq!(j, Jacobian::zeros());
    }

    #[test]
    fn identity_deformation_rows_differ_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (rest, _, w) = scene_offsets(&mut rng, 9);
        let mm = MomentMatrix::from_rest(&rest, &w).unwrap();
        let j = rgp_constraint_jacobian(&rest, &w, &Mat3::identity(), &mm.a_inv);
        for k in 0..3 {
            assert_eq!(j[(1, k)], 2.0 * j[(0, k)]);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let h = 1e-6 * R;
        for _ in 0..100 {
            let n = rng.random_range(6..14);
            let (rest, current, w) = scene_offsets(&mut rng, n);
            let mm = MomentMatrix::from_rest(&rest, &w).unwrap();
            let f = deformation_from_offsets(&current, &rest, &w, &mm.a_inv);
            let j = rgp_constraint_jacobian(&rest, &w, &f, &mm.a_inv);
            // Absolute member positions with the anchor at the origin; moving
            // the anchor by d shifts every current offset by -d.
            for k in 0..3 {
                let eval = |sign: f64| {
                    let mut d = Vec3::zeros();
                    d[k] = sign * h;
                    let q: Vec<Vec3> = current.iter().map(|p| p - d).collect();
                    let f = deformation_from_offsets(&q, &rest, &w, &mm.a_inv);
                    Vector2::new(hydrostatic_constraint(&f), deviatoric_constraint(&f))
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                for row in 0..2 {
                    let scale = j.row(row).norm().max(1e-300);
                    assert!((fd[row] - j[(row, k)]).abs() / scale < 1e-4, "row {row} k {k}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn rotating_the_scene_conjugates_the_metric(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rest, current, w) = scene_offsets(&mut rng, 10);
            let r0 = random_rotation(&mut rng);
            let rot = |v: &[Vec3]| v.iter().map(|q| r0 * q).collect::<Vec<_>>();
            let build = |rest: &[Vec3], current: &[Vec3]| {
                let mm = MomentMatrix::from_rest(rest, &w).unwrap();
                let f = deformation_from_offsets(current, rest, &w, &mm.a_inv);
                stiffness_metric(&rgp_constraint_jacobian(rest, &w, &f, &mm.a_inv), EPS)
            };
            let a = build(&rest, &current);
            let b = build(&rot(&rest), &rot(&current));
            let top = a.eig_max().max(1.0);
            prop_assert!((b.j - a.j * r0.transpose()).norm() <= 1e-9 * a.j.norm().max(1.0));
            prop_assert!((b.k - r0 * a.k * r0.transpose()).norm() <= 1e-9 * top);
            prop_assert!((b.eigenvalues - a.eigenvalues).norm() <= 1e-9 * top);
            let (ca, cb) = (a.compliant(), b.compliant());
            prop_assume!(!ca.degenerate);
            prop_assert!((r0 * ca.direction).dot(&cb.direction).abs() > 1.0 - 1e-9);
        }

        #[test]
        fn smallest_eigenvalue_is_epsilon(entries in proptest::array::uniform6(-1e4f64..1e4), eps in 1e-9f64..1.0) {
            let j = Jacobian::from_row_slice(&entries);
            let m = stiffness_metric(&j, eps);
            prop_assert!(m.eigenvalues[0] >= eps);
            prop_assert!(m.eigenvalues[0] <= m.eigenvalues[1] && m.eigenvalues[1] <= m.eigenvalues[2]);
            prop_assert!((m.k - (j.transpose() * j + Mat3::identity() * eps)).norm() == 0.0);
        }
    }
}
