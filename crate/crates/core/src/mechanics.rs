//! Per-frame, per-RGP mechanical state: neighborhood, deformation gradient,
//! quasi-static solve and stiffness metric.

use std::fmt;

use log::info;
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{
    build_neighborhood_indexed, compute_rest_states, filter_by_segmentation, select_rgps, RestStates, Rgp, RgpSet,
    Segmentation, SpatialGrid,
};
use crate::model::{JacobianAt, Mat3, RunConfig, TrackedScene, Vec3};
use crate::solver::{deformation_from_offsets, solve_rgp, MomentMatrix, SolveStatus};
use crate::stiffness::{rgp_constraint_jacobian, stiffness_metric, CompliantDirection, StiffnessMetric};

/// Minimum neighborhood size for a deformation gradient.
pub const MIN_MEMBERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgpStatus {
    Active,
    AnchorAbsent,
    InsufficientNeighbors,
    SolverNonFinite,
}

impl RgpStatus {
    pub fn code(&self) -> &'static str {
        match self {
            RgpStatus::Active => "ok",
            RgpStatus::AnchorAbsent => "anchor_absent",
            RgpStatus::InsufficientNeighbors => "insufficient_neighbors",
            RgpStatus::SolverNonFinite => "solver_nonfinite",
        }
    }
}

impl fmt::Display for RgpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Mechanical quantities of an active RGP at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RgpMechanics {
    pub members: usize,
    pub segmentation: Segmentation,
    pub moment: MomentMatrix,
    pub f_raw: Mat3,
    pub f_solved: Mat3,
    pub passes: usize,
    pub stiffness: StiffnessMetric,
    pub compliant: CompliantDirection,
}

impl RgpMechanics {
    /// Deformation gradient the stiffness metric was evaluated at.
    pub fn f_used(&self, at: JacobianAt) -> &Mat3 {
        match at {
            JacobianAt::Raw => &self.f_raw,
            JacobianAt::Solved => &self.f_solved,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgpFrameState {
    pub rgp: usize,
    pub frame: usize,
    pub position: Option<Vec3>,
    pub status: RgpStatus,
    pub mechanics: Option<RgpMechanics>,
}

/// Mechanical state of every RGP at every frame, frame-major.
#[derive(Debug, Clone)]
pub struct MechanicsRun {
    pub config: RunConfig,
    pub rgps: RgpSet,
    pub rest: RestStates,
    pub frames: Vec<Vec<RgpFrameState>>,
    pub warnings: Vec<String>,
}

impl MechanicsRun {
    pub fn state(&self, frame: usize, rgp: usize) -> &RgpFrameState {
        &self.frames[frame][rgp]
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn rgp_count(&self) -> usize {
        self.rgps.len()
    }
}

/// Evaluates one RGP at one frame.
pub fn rgp_frame_state(
    scene: &TrackedScene,
    grid: &SpatialGrid,
    rgp: &Rgp,
    frame: usize,
    cfg: &RunConfig,
    rest: &RestStates,
) -> RgpFrameState {
    let position = scene.position(frame, rgp.anchor_slot);
    let state = |status, mechanics| RgpFrameState {
        rgp: rgp.id,
        frame,
        position,
        status,
        mechanics,
    };
    let Some(mut nbh) = build_neighborhood_indexed(scene, grid, rgp, frame, cfg, rest) else {
        return state(RgpStatus::AnchorAbsent, None);
    };
    if cfg.segmentation_filter {
        nbh = filter_by_segmentation(&nbh, scene, frame);
    }
    if nbh.len() < MIN_MEMBERS {
        return state(RgpStatus::InsufficientNeighbors, None);
    }
    let Some(moment) = MomentMatrix::from_rest(&nbh.offsets_rest, &nbh.weights) else {
        return state(RgpStatus::InsufficientNeighbors, None);
    };
    let f_raw = deformation_from_offsets(&nbh.offsets_current, &nbh.offsets_rest, &nbh.weights, &moment.a_inv);
    let solve = solve_rgp(&nbh, &moment, cfg);
    if solve.status == SolveStatus::NonFinite {
        return state(RgpStatus::SolverNonFinite, None);
    }
    let f_solved = deformation_from_offsets(&solve.offsets, &nbh.offsets_rest, &nbh.weights, &moment.a_inv);
    let f_at = match cfg.jacobian_at {
        JacobianAt::Raw => &f_raw,
        JacobianAt::Solved => &f_solved,
    };
    let j = rgp_constraint_jacobian(&nbh.offsets_rest, &nbh.weights, f_at, &moment.a_inv);
    if !j.iter().all(|x| x.is_finite()) {
        return state(RgpStatus::SolverNonFinite, None);
    }
    let stiffness = stiffness_metric(&j, cfg.eps_stiffness);
    let compliant = stiffness.compliant();
    state(
        RgpStatus::Active,
        Some(RgpMechanics {
            members: nbh.len(),
            segmentation: nbh.segmentation,
            moment,
            f_raw,
            f_solved,
            passes: solve.passes,
            stiffness,
            compliant,
        }),
    )
}

/// Selects RGPs and evaluates their mechanics on every frame. `cfg` must
/// already be validated and resolved against the scene.
pub fn run_mechanics(scene: &TrackedScene, cfg: &RunConfig) -> Result<MechanicsRun> {
    let selection = select_rgps(scene, cfg)?;
    let rest = compute_rest_states(scene, cfg);
    info!(
        "{} RGPs over {} frames, {} points",
        selection.rgps.len(),
        scene.frame_count(),
        scene.point_count()
    );
    let frames = (0..scene.frame_count())
        .into_par_iter()
        .map(|t| {
            let grid = SpatialGrid::build(scene, t, cfg.r_cluster);
            selection
                .rgps
                .rgps
                .par_iter()
                .map(|rgp| rgp_frame_state(scene, &grid, rgp, t, cfg, &rest))
                .collect()
        })
        .collect();
    Ok(MechanicsRun {
        config: cfg.clone(),
        rgps: selection.rgps,
        rest,
        frames,
        warnings: selection.warnings,
    })
}
