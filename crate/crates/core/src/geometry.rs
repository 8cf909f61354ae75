//! Representative geometry points (RGPs), their time-varying neighborhoods,
//! segmentation-aware filtering and the smoothed rest configuration.

use std::collections::HashMap;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{Label, PointId, RunConfig, TrackedScene, Vec3};

/// Index of an RGP inside its [`RgpSet`]; RGPs are numbered in acceptance order.
pub type RgpId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Rgp {
    pub id: RgpId,
    pub anchor: PointId,
    pub anchor_slot: usize,
    pub label_at_selection: Option<Label>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RgpSet {
    pub rgps: Vec<Rgp>,
}

impl RgpSet {
    pub fn len(&self) -> usize {
        self.rgps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgps.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Rgp> {
        self.rgps.iter()
    }
}

/// Smoothed rest position per point slot; `None` for points never observed.
#[derive(Debug, Clone, PartialEq)]
pub struct RestStates {
    positions: Vec<Option<Vec3>>,
}

impl RestStates {
    pub fn get(&self, slot: usize) -> Option<Vec3> {
        self.positions.get(slot).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.positions.iter().filter(|p| p.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Temporal mean of each point over the `tau` frames starting at its first
/// frame of presence; frames where the point is absent are skipped.
pub fn compute_rest_states(scene: &TrackedScene, cfg: &RunConfig) -> RestStates {
    let tau = cfg.rest_window_tau.max(1);
    let positions = (0..scene.point_count())
        .map(|slot| {
            let first = (0..scene.frame_count()).find(|&t| scene.is_present(t, slot))?;
            let end = (first + tau).min(scene.frame_count());
            let (sum, n) = (first..end)
                .filter_map(|t| scene.position(t, slot))
                .fold((Vec3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
            (n > 0).then(|| sum / n as f64)
        })
        .collect();
    RestStates { positions }
}

/// Uniform hash grid over the present points of one frame. Lookups return
/// exactly the points satisfying the radius predicate, in ascending slot order.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    positions: Vec<Option<Vec3>>,
}

impl SpatialGrid {
    pub fn build(scene: &TrackedScene, frame: usize, cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut positions = vec![None; scene.point_count()];
        for (slot, s) in scene.present(frame) {
            positions[slot] = Some(s.position);
            cells.entry(Self::key(&s.position, cell)).or_default().push(slot);
        }
        Self {
            cell,
            cells,
            positions,
        }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    pub fn position(&self, slot: usize) -> Option<Vec3> {
        self.positions.get(slot).copied().flatten()
    }

    /// Slots with `|p - center| <= radius`, ascending.
    pub fn within(&self, center: &Vec3, radius: f64) -> Vec<usize> {
        let lo = Self::key(&(center - Vec3::repeat(radius)), self.cell);
        let hi = Self::key(&(center + Vec3::repeat(radius)), self.cell);
        let mut out = Vec::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(bucket) = self.cells.get(&[x, y, z]) {
                        out.extend(bucket.iter().copied().filter(|&s| {
                            self.positions[s].is_some_and(|p| (p - center).norm() <= radius)
                        }));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct RgpSelection {
    pub rgps: RgpSet,
    pub warnings: Vec<String>,
}

/// Selects RGPs on frame 0.
///
/// Present frame-0 points are put in farthest-point order starting from the
/// lowest point id; walking that order, a point becomes an RGP when it has at
/// least `n_min` present neighbors within `r_cluster` and lies farther than
/// `r_cluster` from every RGP accepted so far.
pub fn select_rgps(scene: &TrackedScene, cfg: &RunConfig) -> Result<RgpSelection> {
    if scene.frame_count() == 0 {
        return Err(Error::Scene("scene has no frames".into()));
    }
    let candidates: Vec<(usize, Vec3)> = scene.present(0).map(|(slot, s)| (slot, s.position)).collect();
    if candidates.is_empty() {
        return Err(Error::Scene("frame 0 has no present points".into()));
    }
    let r = cfg.r_cluster;
    let grid = SpatialGrid::build(scene, 0, r);

    let order = farthest_point_order(&candidates);
    let mut accepted: Vec<Vec3> = Vec::new();
    let mut rgps = Vec::new();
    for idx in order {
        let (slot, p) = candidates[idx];
        if accepted.iter().any(|a| (a - p).norm() <= r) {
            continue;
        }
        let neighbors = grid.within(&p, r).len() - 1;
        if neighbors < cfg.n_min {
            continue;
        }
        accepted.push(p);
        rgps.push(Rgp {
            id: rgps.len(),
            anchor: scene.id(slot),
            anchor_slot: slot,
            label_at_selection: scene.label(0, slot),
        });
    }

    let mut warnings = Vec::new();
    if rgps.is_empty() {
        let msg = format!(
            "no frame-0 point has {} neighbors within r_cluster = {}; RGP set is empty",
            cfg.n_min, r
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(RgpSelection {
        rgps: RgpSet { rgps },
        warnings,
    })
}

/// Farthest-point ordering of `points` (indices into the slice). The first
/// element is index 0; ties go to the lower index.
pub fn farthest_point_order(points: &[(usize, Vec3)]) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order = Vec::with_capacity(n);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0;
    loop {
        order.push(current);
        taken[current] = true;
        if order.len() == n {
            break;
        }
        let c = points[current].1;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = (points[j].1 - c).norm_squared();
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > best_d {
                best_d = min_dist[j];
                best = j;
            }
        }
        current = best;
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segmentation {
    /// Filtering has not been attempted.
    NotApplied,
    /// Members restricted to the anchor's label.
    Filtered,
    /// The anchor has no label at this frame; members left untouched.
    Unfiltered,
}

/// Time-varying neighborhood of one RGP at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub rgp: RgpId,
    pub frame: usize,
    pub anchor_slot: usize,
    pub anchor_position: Vec3,
    pub member_slots: Vec<usize>,
    pub member_ids: Vec<PointId>,
    /// `p_j(t) - p_anchor(t)`
    pub offsets_current: Vec<Vec3>,
    /// `rest_j - rest_anchor`
    pub offsets_rest: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub segmentation: Segmentation,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.member_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_slots.is_empty()
    }

    /// Weighted sum of rest offsets.
    pub fn rest_moment_sum(&self) -> Vec3 {
        self.offsets_rest
            .iter()
            .zip(&self.weights)
            .fold(Vec3::zeros(), |acc, (q, w)| acc + q * *w)
    }

    fn retain(&mut self, keep: impl Fn(usize) -> bool) {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| keep(k)).collect();
        self.member_slots = idx.iter().map(|&k| self.member_slots[k]).collect();
        self.member_ids = idx.iter().map(|&k| self.member_ids[k]).collect();
        self.offsets_current = idx.iter().map(|&k| self.offsets_current[k]).collect();
        self.offsets_rest = idx.iter().map(|&k| self.offsets_rest[k]).collect();
        self.weights = idx.iter().map(|&k| self.weights[k]).collect();
    }
}

/// Gaussian kernel weight of a rest offset.
pub fn kernel_weight(rest_offset: &Vec3, sigma: f64) -> f64 {
    (-rest_offset.norm_squared() / (sigma * sigma)).exp()
}

/// Builds the neighborhood of `rgp` at `frame` by exhaustive search.
/// Returns `None` when the anchor (or its rest state) is missing.
pub fn build_neighborhood(
    scene: &TrackedScene,
    rgp: &Rgp,
    frame: usize,
    cfg: &RunConfig,
    rest: &RestStates,
) -> Option<Neighborhood> {
    let anchor = scene.position(frame, rgp.anchor_slot)?;
    let r = cfg.r_cluster;
    let candidates: Vec<usize> = scene
        .present(frame)
        .filter(|(_, s)| (s.position - anchor).norm() <= r)
        .map(|(slot, _)| slot)
        .collect();
    assemble(scene, rgp, frame, anchor, candidates, cfg, rest)
}

/// Same contract as [`build_neighborhood`], using a prebuilt grid of `frame`.
pub fn build_neighborhood_indexed(
    scene: &TrackedScene,
    grid: &SpatialGrid,
    rgp: &Rgp,
    frame: usize,
    cfg: &RunConfig,
    rest: &RestStates,
) -> Option<Neighborhood> {
    let anchor = grid.position(rgp.anchor_slot)?;
    let candidates = grid.within(&anchor, cfg.r_cluster);
    assemble(scene, rgp, frame, anchor, candidates, cfg, rest)
}

fn assemble(
    scene: &TrackedScene,
    rgp: &Rgp,
    frame: usize,
    anchor: Vec3,
    candidates: Vec<usize>,
    cfg: &RunConfig,
    rest: &RestStates,
) -> Option<Neighborhood> {
    let anchor_rest = rest.get(rgp.anchor_slot)?;
    let mut nbh = Neighborhood {
        rgp: rgp.id,
        frame,
        anchor_slot: rgp.anchor_slot,
        anchor_position: anchor,
        member_slots: Vec::new(),
        member_ids: Vec::new(),
        offsets_current: Vec::new(),
        offsets_rest: Vec::new(),
        weights: Vec::new(),
        segmentation: Segmentation::NotApplied,
    };
    for slot in candidates {
        if slot == rgp.anchor_slot {
            continue;
        }
        let (Some(p), Some(rp)) = (scene.position(frame, slot), rest.get(slot)) else {
            continue;
        };
        let q_rest = rp - anchor_rest;
        nbh.member_slots.push(slot);
        nbh.member_ids.push(scene.id(slot));
        nbh.offsets_current.push(p - anchor);
        nbh.offsets_rest.push(q_rest);
        nbh.weights.push(kernel_weight(&q_rest, cfg.sigma));
    }
    Some(nbh)
}

/// Keeps only members sharing the anchor's segmentation label at `frame`.
/// Weights are not renormalized. Without an anchor label the neighborhood is
/// returned unchanged and marked [`Segmentation::Unfiltered`].
pub fn filter_by_segmentation(nbh: &Neighborhood, scene: &TrackedScene, frame: usize) -> Neighborhood {
    let mut out = nbh.clone();
    match scene.label(frame, nbh.anchor_slot) {
        None => out.segmentation = Segmentation::Unfiltered,
        Some(label) => {
            let slots = nbh.member_slots.clone();
            out.retain(|k| scene.label(frame, slots[k]) == Some(label));
            out.segmentation = Segmentation::Filtered;
        }
    }
    out
}
