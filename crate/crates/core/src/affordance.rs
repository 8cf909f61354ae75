//! Compliance energy (PACE/PACS) per RGP and frame, its temporal smoothing,
//! and the kinematic positional-agreement baseline (PAE/PAS).

use std::fmt;

use rayon::prelude::*;

use crate::kinematics::{induced_displacement, ToolTrajectory};
use crate::mechanics::{MechanicsRun, RgpStatus};
use crate::model::{Mat3, RunConfig, TrackedScene, Twist, Vec3};
use crate::stiffness::StiffnessMetric;

/// `½ Δpᵀ K Δp`, evaluated as `½ (‖J Δp‖² + ε ‖Δp‖²)` so that it never drops
/// below the `ε` floor through cancellation.
pub fn compliance_energy(dp: &Vec3, metric: &StiffnessMetric) -> f64 {
    0.5 * ((metric.j * dp).norm_squared() + metric.eig_min() * dp.norm_squared())
}

pub fn pacs(energy: f64) -> f64 {
    -energy
}

pub fn ema_update(prev: f64, cur: f64, lambda: f64) -> f64 {
    lambda * prev + (1.0 - lambda) * cur
}

/// Running exponential moving average seeded with its first sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ema {
    value: Option<f64>,
}

impl Ema {
    pub fn push(&mut self, x: f64, lambda: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => ema_update(prev, x, lambda),
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Mean and population covariance of one point's frame-to-frame
/// displacements over a forward window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryWindowStats {
    pub mean: Vec3,
    pub covariance: Mat3,
    pub count: usize,
}

/// Statistics of `x(k+1) - x(k)` for `k` in `[frame, frame + window - 1]`,
/// using only transitions where both ends are present. `None` with fewer than
/// two transitions.
pub fn trajectory_covariance(
    scene: &TrackedScene,
    slot: usize,
    frame: usize,
    window: usize,
) -> Option<TrajectoryWindowStats> {
    let end = (frame + window).min(scene.frame_count().saturating_sub(1));
    let u: Vec<Vec3> = (frame..end)
        .filter_map(|k| Some(scene.position(k + 1, slot)? - scene.position(k, slot)?))
        .collect();
    if u.len() < 2 {
        return None;
    }
    let n = u.len() as f64;
    let mean = u.iter().sum::<Vec3>() / n;
    let covariance = u
        .iter()
        .map(|x| x - mean)
        .fold(Mat3::zeros(), |acc, d| acc + d * d.transpose())
        / n;
    Some(TrajectoryWindowStats {
        mean,
        covariance,
        count: u.len(),
    })
}

/// `(d_aᵀ Σ d_a, -d_aᵀ Σ d_a)`
pub fn positional_agreement(stats: &TrajectoryWindowStats, d_a: &Vec3) -> (f64, f64) {
    let pae = d_a.dot(&(stats.covariance * d_a));
    (pae, -pae)
}

/// Unit tool translation direction, absent below `eps_motion`.
pub fn action_direction(twist: &Twist, eps_motion: f64) -> Option<Vec3> {
    let n = twist.v.norm();
    (n >= eps_motion && n > 0.0).then(|| twist.v / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reason {
    Ok,
    Rgp(RgpStatus),
    NoToolPose,
    UndefinedActionDirection,
    InsufficientWindow,
}

impl Reason {
    pub fn code(&self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::Rgp(s) => s.code(),
            Reason::NoToolPose => "no_tool_pose",
            Reason::UndefinedActionDirection => "undefined_action_direction",
            Reason::InsufficientWindow => "insufficient_window",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One (frame, RGP) entry. `valid` refers to the compliance score; the
/// positional-agreement pair may be absent on its own, in which case
/// `reason` names why.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceRow {
    pub frame: usize,
    pub rgp: usize,
    pub position: Option<Vec3>,
    pub displacement: Option<Vec3>,
    pub pace: Option<f64>,
    pub pacs: Option<f64>,
    pub pace_smooth: Option<f64>,
    pub pacs_smooth: Option<f64>,
    pub pae: Option<f64>,
    pub pas: Option<f64>,
    pub eig_min: Option<f64>,
    pub eig_max: Option<f64>,
    pub compliant: Option<Vec3>,
    pub pacs_norm: Option<f64>,
    pub valid: bool,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceField {
    pub frame_count: usize,
    pub rgp_count: usize,
    /// Frame-major, then RGP id.
    pub rows: Vec<AffordanceRow>,
}

impl AffordanceField {
    pub fn row(&self, frame: usize, rgp: usize) -> &AffordanceRow {
        &self.rows[frame * self.rgp_count + rgp]
    }

    pub fn frame(&self, frame: usize) -> &[AffordanceRow] {
        &self.rows[frame * self.rgp_count..(frame + 1) * self.rgp_count]
    }
}

/// Tool action direction per frame transition. With `hold`, a transition
/// whose translation is below threshold reuses the last defined direction.
pub fn action_directions(tool: &ToolTrajectory, cfg: &RunConfig) -> Vec<Option<Vec3>> {
    let mut last = None;
    tool.twists
        .iter()
        .map(|tw| {
            let d = tw.as_ref().and_then(|t| action_direction(t, cfg.eps_motion));
            if d.is_some() {
                last = d;
            }
            if cfg.hold_action_direction {
                d.or(last)
            } else {
                d
            }
        })
        .collect()
}

/// Scores every (frame, RGP) pair of a mechanics run against a tool motion.
///
/// At frame `t` the tool twist from `t` to `t + 1` displaces the RGP at its
/// tracked position; the energy uses the frame-`t` stiffness metric. Frames
/// without a twist (including the last) are invalid.
pub fn compute_affordance_field(
    scene: &TrackedScene,
    mech: &MechanicsRun,
    tool: &ToolTrajectory,
    cfg: &RunConfig,
) -> AffordanceField {
    let frames = mech.frame_count();
    let n_rgp = mech.rgp_count();
    let directions = action_directions(tool, cfg);

    let columns: Vec<Vec<AffordanceRow>> = mech
        .rgps
        .rgps
        .par_iter()
        .map(|rgp| {
            let mut ema = Ema::default();
            let mut ema_pas = Ema::default();
            (0..frames)
                .map(|t| {
                    let state = mech.state(t, rgp.id);
                    let mut row = AffordanceRow {
                        frame: t,
                        rgp: rgp.id,
                        position: state.position,
                        displacement: None,
                        pace: None,
                        pacs: None,
                        pace_smooth: None,
                        pacs_smooth: None,
                        pae: None,
                        pas: None,
                        eig_min: None,
                        eig_max: None,
                        compliant: None,
                        pacs_norm: None,
                        valid: false,
                        reason: Reason::Ok,
                    };
                    let Some(m) = &state.mechanics else {
                        row.reason = Reason::Rgp(state.status);
                        return row;
                    };
                    row.eig_min = Some(m.stiffness.eig_min());
                    row.eig_max = Some(m.stiffness.eig_max());
                    row.compliant = Some(m.compliant.direction);
                    let (Some(twist), Some(pose), Some(p)) = (tool.twist(t), tool.pose(t), state.position) else {
                        row.reason = Reason::NoToolPose;
                        return row;
                    };
                    let dp = induced_displacement(twist, &p, pose.origin());
                    let e = compliance_energy(&dp, &m.stiffness);
                    let smooth = ema.push(e, cfg.lambda_ema);
                    row.displacement = Some(dp);
                    row.pace = Some(e);
                    row.pacs = Some(pacs(e));
                    row.pace_smooth = Some(smooth);
                    row.pacs_smooth = Some(pacs(smooth));
                    row.valid = true;

                    match (directions[t], trajectory_covariance(scene, rgp.anchor_slot, t, cfg.pae_window)) {
                        (None, _) => row.reason = Reason::UndefinedActionDirection,
                        (_, None) => row.reason = Reason::InsufficientWindow,
                        (Some(d), Some(stats)) => {
                            let (pae, pas) = positional_agreement(&stats, &d);
                            row.pae = Some(pae);
                            row.pas = Some(if cfg.smooth_pas {
                                -ema_pas.push(pae, cfg.lambda_ema)
                            } else {
                                pas
                            });
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(frames * n_rgp);
    for t in 0..frames {
        let start = rows.len();
        rows.extend(columns.iter().map(|c| c[t].clone()));
        if cfg.normalized_column {
            normalize_frame(&mut rows[start..]);
        }
    }
    AffordanceField {
        frame_count: frames,
        rgp_count: n_rgp,
        rows,
    }
}

/// Per-frame min-max normalization of PACS into `[0, 1]`; a constant frame maps to 0.
fn normalize_frame(rows: &mut [AffordanceRow]) {
    let vals = rows.iter().filter_map(|r| r.pacs);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    for r in rows.iter_mut() {
        r.pacs_norm = r.pacs.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 });
    }
}
