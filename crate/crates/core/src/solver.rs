//! Weighted least-squares deformation gradients, volume/shape constraints and
//! the quasi-static Gauss–Seidel XPBD corrector with adaptive clamping.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::geometry::Neighborhood;
use crate::model::{Mat3, RunConfig, Vec3};

/// Moment matrices whose eigenvalue ratio falls below this are regularized.
pub const DEGENERACY_RATIO: f64 = 1e-12;
/// Tikhonov strength relative to `tr(A)/3`.
pub const TIKHONOV_ETA: f64 = 1e-6;
/// A constraint whose squared gradient norm is below this fraction of its
/// rest-configuration value carries no usable direction and is skipped.
pub const GRADIENT_FLOOR: f64 = 1e-12;

/// Weighted second moment `A = Σ w Q Qᵀ` of the rest offsets and its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentMatrix {
    pub a: Mat3,
    pub a_inv: Mat3,
    /// `λmax/λmin` of the matrix actually inverted.
    pub condition: f64,
    pub regularized: bool,
}

impl MomentMatrix {
    /// `None` when the weighted offsets carry no spread at all.
    pub fn from_rest(rest: &[Vec3], weights: &[f64]) -> Option<Self> {
        let a = rest
            .iter()
            .zip(weights)
            .fold(Mat3::zeros(), |acc, (q, w)| acc + q * q.transpose() * *w);
        let trace = a.trace();
        if !trace.is_finite() || trace <= 0.0 {
            return None;
        }
        let eig = SymmetricEigen::new(a).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let regularized = lo < DEGENERACY_RATIO * hi;
        let used = if regularized {
            a + Mat3::identity() * (TIKHONOV_ETA * trace / 3.0)
        } else {
            a
        };
        let a_inv = used.try_inverse()?;
        let eig = SymmetricEigen::new(used).eigenvalues;
        let condition = (eig.max() / eig.min()).max(1.0);
        Some(Self {
            a,
            a_inv,
            condition,
            regularized,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationGradient {
    pub f: Mat3,
    pub moment: MomentMatrix,
}

impl DeformationGradient {
    pub fn residuals(&self) -> ConstraintResiduals {
        ConstraintResiduals {
            c_hydro: hydrostatic_constraint(&self.f),
            c_devia: deviatoric_constraint(&self.f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintResiduals {
    pub c_hydro: f64,
    pub c_devia: f64,
}

impl ConstraintResiduals {
    pub fn total_abs(&self) -> f64 {
        self.c_hydro.abs() + self.c_devia.abs()
    }
}

/// `B A⁻¹` with `B = Σ w q Qᵀ`.
pub fn deformation_from_offsets(current: &[Vec3], rest: &[Vec3], weights: &[f64], a_inv: &Mat3) -> Mat3 {
    let b = current
        .iter()
        .zip(rest)
        .zip(weights)
        .fold(Mat3::zeros(), |acc, ((q, r), w)| acc + q * r.transpose() * *w);
    b * a_inv
}

/// Least-squares deformation gradient of a neighborhood, `None` when its rest
/// offsets have no spread.
pub fn estimate_deformation_gradient(nbh: &Neighborhood) -> Option<DeformationGradient> {
    let moment = MomentMatrix::from_rest(&nbh.offsets_rest, &nbh.weights)?;
    let f = deformation_from_offsets(&nbh.offsets_current, &nbh.offsets_rest, &nbh.weights, &moment.a_inv);
    Some(DeformationGradient { f, moment })
}

pub fn hydrostatic_constraint(f: &Mat3) -> f64 {
    f.determinant() - 1.0
}

pub fn deviatoric_constraint(f: &Mat3) -> f64 {
    (f.transpose() * f).trace() - 3.0
}

/// `det(F) F⁻ᵀ` in adjugate form; finite for singular `F`.
pub fn cofactor(f: &Mat3) -> Mat3 {
    let (c0, c1, c2) = (f.column(0), f.column(1), f.column(2));
    Mat3::from_columns(&[c1.cross(&c2), c2.cross(&c0), c0.cross(&c1)])
}

/// Per-member gradients of the two constraints with respect to the member
/// positions, the anchor held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintGradients {
    pub hydro: Vec<Vec3>,
    pub devia: Vec<Vec3>,
}

pub fn constraint_gradients(rest: &[Vec3], weights: &[f64], f: &Mat3, a_inv: &Mat3) -> ConstraintGradients {
    let cof = cofactor(f);
    let (hydro, devia) = rest
        .iter()
        .zip(weights)
        .map(|(q, w)| {
            let g = a_inv * q * *w;
            (cof * g, f * g * 2.0)
        })
        .unzip();
    ConstraintGradients { hydro, devia }
}

/// Nearest-rank quantile: the smallest value `m` such that at least
/// `ceil(p·n)` of the values are `<= m`.
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Rescales every correction longer than the `percentile` nearest-rank
/// quantile of the magnitudes down to that quantile, keeping its direction.
pub fn adaptive_clamp(corrections: &[Vec3], percentile: f64) -> Vec<Vec3> {
    if corrections.is_empty() {
        return Vec::new();
    }
    let mags: Vec<f64> = corrections.iter().map(|c| c.norm()).collect();
    let limit = nearest_rank(&mags, percentile);
    corrections
        .iter()
        .zip(&mags)
        .map(|(c, &m)| if m > limit { c * (limit / m) } else { *c })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Ok,
    /// A correction became non-finite; positions are the pre-solve ones.
    NonFinite,
}

/// Outcome of one RGP's quasi-static solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RgpSolve {
    /// Corrected member offsets relative to the anchor.
    pub offsets: Vec<Vec3>,
    pub lambda_hydro: f64,
    pub lambda_devia: f64,
    pub passes: usize,
    /// Largest clamped correction magnitude of each pass.
    pub correction_history: Vec<f64>,
    /// `|C_hydro| + |C_devia|` before the first pass and after each pass.
    pub residual_history: Vec<f64>,
    pub status: SolveStatus,
}

fn project(
    q: &mut [Vec3],
    grads: &[Vec3],
    c: f64,
    alpha: f64,
    lambda: &mut f64,
    floor: f64,
) -> Option<()> {
    let norm2: f64 = grads.iter().map(|g| g.norm_squared()).sum();
    if norm2 <= floor && alpha == 0.0 {
        return Some(());
    }
    let dl = (-c - alpha * *lambda) / (norm2 + alpha);
    if !dl.is_finite() {
        return None;
    }
    *lambda += dl;
    for (p, g) in q.iter_mut().zip(grads) {
        *p += g * dl;
    }
    Some(())
}

/// Runs `cfg.solver_iterations` Gauss–Seidel passes on one neighborhood.
///
/// Each pass projects the hydrostatic then the deviatoric constraint with the
/// XPBD multiplier update (unit masses, unit step), then clamps the pass's net
/// per-member corrections. Multipliers start at zero.
pub fn solve_rgp(nbh: &Neighborhood, moment: &MomentMatrix, cfg: &RunConfig) -> RgpSolve {
    let rest = &nbh.offsets_rest;
    let w = &nbh.weights;
    let residual = |q: &[Vec3]| {
        let f = deformation_from_offsets(q, rest, w, &moment.a_inv);
        hydrostatic_constraint(&f).abs() + deviatoric_constraint(&f).abs()
    };
    let reference: f64 = rest
        .iter()
        .zip(w)
        .map(|(q, w)| (moment.a_inv * q * *w).norm_squared())
        .sum();
    let floor = GRADIENT_FLOOR * reference;

    let mut q = nbh.offsets_current.clone();
    let (mut lh, mut ld) = (0.0, 0.0);
    let mut correction_history = Vec::with_capacity(cfg.solver_iterations);
    let mut residual_history = vec![residual(&q)];
    let failed = |passes| RgpSolve {
        offsets: nbh.offsets_current.clone(),
        lambda_hydro: 0.0,
        lambda_devia: 0.0,
        passes,
        correction_history: Vec::new(),
        residual_history: Vec::new(),
        status: SolveStatus::NonFinite,
    };

    for pass in 0..cfg.solver_iterations {
        let start = q.clone();

        let f = deformation_from_offsets(&q, rest, w, &moment.a_inv);
        let g = constraint_gradients(rest, w, &f, &moment.a_inv);
        if project(&mut q, &g.hydro, hydrostatic_constraint(&f), cfg.alpha_hydro, &mut lh, floor).is_none() {
            return failed(pass);
        }

        let f = deformation_from_offsets(&q, rest, w, &moment.a_inv);
        let g = constraint_gradients(rest, w, &f, &moment.a_inv);
        if project(&mut q, &g.devia, deviatoric_constraint(&f), cfg.alpha_devia, &mut ld, floor).is_none() {
            return failed(pass);
        }

        let deltas: Vec<Vec3> = q.iter().zip(&start).map(|(a, b)| a - b).collect();
        let clamped = adaptive_clamp(&deltas, cfg.clamp_percentile);
        for ((p, s), d) in q.iter_mut().zip(&start).zip(&clamped) {
            *p = s + d;
        }
        if q.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return failed(pass);
        }
        correction_history.push(clamped.iter().map(|d| d.norm()).fold(0.0, f64::max));
        residual_history.push(residual(&q));
    }

    RgpSolve {
        offsets: q,
        lambda_hydro: lh,
        lambda_devia: ld,
        passes: cfg.solver_iterations,
        correction_history,
        residual_history,
        status: SolveStatus::Ok,
    }
}

/// Solves every active neighborhood of one frame. Entries are independent and
/// run in parallel; output order matches input order.
pub fn solve_quasistatic(
    neighborhoods: &[Option<(Neighborhood, MomentMatrix)>],
    cfg: &RunConfig,
) -> Vec<Option<RgpSolve>> {
    neighborhoods
        .par_iter()
        .map(|entry| entry.as_ref().map(|(nbh, m)| solve_rgp(nbh, m, cfg)))
        .collect()
}
