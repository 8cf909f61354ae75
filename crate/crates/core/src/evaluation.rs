//! Stiffness validation against observed motion, the velocity-persistence
//! baseline, solver-iteration sweeps, and deterministic synthetic scenes.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::ToolTrajectory;
use crate::mechanics::{run_mechanics, MechanicsRun};
use crate::model::{PointId, RigidPose, RunConfig, TrackedScene, Vec3};

/// Displacement of a point from `frame` to `frame + 1`.
pub fn displacement(scene: &TrackedScene, slot: usize, frame: usize) -> Option<Vec3> {
    Some(scene.position(frame + 1, slot)? - scene.position(frame, slot)?)
}

/// `v / (|v| + δ)` renormalized, for `|v| >= eps_motion`.
pub fn normalized_motion(v: &Vec3, eps_motion: f64, delta: f64) -> Option<Vec3> {
    let n = v.norm();
    if n < eps_motion || n == 0.0 {
        return None;
    }
    Some((v / (n + delta)).normalize())
}

pub fn observed_direction(scene: &TrackedScene, slot: usize, frame: usize, eps_motion: f64, delta: f64) -> Option<Vec3> {
    normalized_motion(&displacement(scene, slot, frame)?, eps_motion, delta)
}

/// `|e · u|`; the eigenvector sign carries no meaning.
pub fn compliant_alignment(e_min: &Vec3, u: &Vec3) -> f64 {
    e_min.dot(u).abs()
}

/// Signed cosine between the previous and the current motion direction.
pub fn velocity_persistence_baseline(
    scene: &TrackedScene,
    slot: usize,
    frame: usize,
    eps_motion: f64,
    delta: f64,
) -> Option<f64> {
    if frame == 0 {
        return None;
    }
    let prev = displacement(scene, slot, frame - 1)?;
    if prev.norm() < eps_motion {
        return None;
    }
    let u = observed_direction(scene, slot, frame, eps_motion, delta)?;
    let base = prev / (prev.norm() + delta);
    Some(base.dot(&u) / base.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    RgpInactive,
    DegenerateCompliant,
    NoNextFrame,
    BelowMotionThreshold,
}

impl Exclusion {
    pub fn code(&self) -> &'static str {
        match self {
            Exclusion::RgpInactive => "rgp_inactive",
            Exclusion::DegenerateCompliant => "degenerate_compliant",
            Exclusion::NoNextFrame => "no_next_frame",
            Exclusion::BelowMotionThreshold => "below_motion_threshold",
        }
    }
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One (frame, RGP) validation outcome. Excluded samples carry no cosines; the
/// baseline is absent when the previous step is missing or below threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSample {
    pub frame: usize,
    pub rgp: usize,
    pub cos_compliant: Option<f64>,
    pub cos_baseline: Option<f64>,
    pub excluded: Option<Exclusion>,
}

pub fn validation_samples(scene: &TrackedScene, mech: &MechanicsRun) -> Vec<ValidationSample> {
    let cfg = &mech.config;
    let mut out = Vec::with_capacity(mech.frame_count() * mech.rgp_count());
    for t in 0..mech.frame_count() {
        for rgp in &mech.rgps.rgps {
            let state = mech.state(t, rgp.id);
            let slot = rgp.anchor_slot;
            let excluded = |e| ValidationSample {
                frame: t,
                rgp: rgp.id,
                cos_compliant: None,
                cos_baseline: None,
                excluded: Some(e),
            };
            let sample = match &state.mechanics {
                None => excluded(Exclusion::RgpInactive),
                Some(m) if m.compliant.degenerate => excluded(Exclusion::DegenerateCompliant),
                Some(m) => match displacement(scene, slot, t) {
                    None => excluded(Exclusion::NoNextFrame),
                    Some(v) => match normalized_motion(&v, cfg.eps_motion, cfg.delta_norm) {
                        None => excluded(Exclusion::BelowMotionThreshold),
                        Some(u) => ValidationSample {
                            frame: t,
                            rgp: rgp.id,
                            cos_compliant: Some(compliant_alignment(&m.compliant.direction, &u)),
                            cos_baseline: velocity_persistence_baseline(scene, slot, t, cfg.eps_motion, cfg.delta_norm),
                            excluded: None,
                        },
                    },
                },
            };
            out.push(sample);
        }
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationSummary {
    pub median_cos_compliant: f64,
    /// Median over the non-excluded samples that have a baseline value.
    pub median_cos_baseline: Option<f64>,
    pub n_samples: usize,
    pub n_baseline: usize,
}

pub fn summarize(samples: &[ValidationSample]) -> Result<ValidationSummary> {
    let c: Vec<f64> = samples.iter().filter_map(|s| s.cos_compliant).collect();
    let b: Vec<f64> = samples.iter().filter_map(|s| s.cos_baseline).collect();
    let mc = median(&c).ok_or(Error::NoValidSamples)?;
    Ok(ValidationSummary {
        median_cos_compliant: mc,
        median_cos_baseline: median(&b),
        n_samples: c.len(),
        n_baseline: b.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub iterations: usize,
    pub summary: ValidationSummary,
}

/// Reruns the mechanics for each iteration count with everything else fixed.
pub fn iteration_sweep(scene: &TrackedScene, iterations: &[usize], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if iterations.is_empty() {
        return Err(Error::Config(vec!["iteration list must be nonempty".into()]));
    }
    if iterations.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(vec!["iteration list must be ascending".into()]));
    }
    iterations
        .par_iter()
        .map(|&it| {
            let cfg = RunConfig {
                solver_iterations: it,
                ..cfg.clone()
            };
            let mech = run_mechanics(scene, &cfg)?;
            let summary = summarize(&validation_samples(scene, &mech))?;
            Ok(SweepRow {
                iterations: it,
                summary,
            })
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side has no rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// A generated scene with a ground-truth compliant direction per point.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: TrackedScene,
    pub ground_truth: Vec<(PointId, Vec3)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetParams {
    pub n: usize,
    pub spacing: f64,
    pub frames: usize,
    /// Stretch axis; the ground-truth compliant direction.
    pub axis: Vec3,
    pub amplitude: f64,
    /// Stretch period in frames.
    pub period: f64,
    /// Standard deviation of i.i.d. per-coordinate tracking noise.
    pub noise: f64,
}

impl Default for SheetParams {
    fn default() -> Self {
        Self {
            n: 24,
            spacing: 0.001,
            frames: 100,
            axis: Vec3::x(),
            amplitude: 0.05,
            period: 20.0,
            noise: 0.0,
        }
    }
}

fn grid(n: usize, spacing: f64) -> Vec<Vec3> {
    let half = (n - 1) as f64 * spacing / 2.0;
    (0..n * n)
        .map(|k| Vec3::new((k % n) as f64 * spacing - half, (k / n) as f64 * spacing - half, 0.0))
        .collect()
}

/// Planar `n × n` grid in the xy plane under a volume-preserving stretch: scale
/// `s(t) = 1 + amplitude·sin(2πt/period)` along `axis` and `1/√s(t)` across it.
/// The stretch is centered three sheet widths behind the grid along `-axis`, so
/// every point's motion is dominated by its `axis` component and stays above
/// 1e-4 per frame at the default parameters.
pub fn generate_anisotropic_sheet(params: &SheetParams, seed: u64) -> Result<SyntheticScene> {
    if params.n < 4 {
        return Err(Error::GridTooSmall);
    }
    let a = params.axis.try_normalize(0.0).ok_or_else(|| Error::Config(vec!["sheet axis must be nonzero".into()]))?;
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::Config(vec![format!("sheet noise: {e}")]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = grid(params.n, params.spacing);
    let width = (params.n - 1) as f64 * params.spacing;
    let center = -a * (3.0 * width);
    let frames: Vec<Vec<Vec3>> = (0..params.frames)
        .map(|t| {
            let s = 1.0 + params.amplitude * (2.0 * PI * t as f64 / params.period).sin();
            let across = 1.0 / s.sqrt();
            base.iter()
                .map(|p| {
                    let r = p - center;
                    let along = a.dot(&r);
                    let clean = center + a * (s * along) + (r - a * along) * across;
                    if params.noise > 0.0 {
                        clean + Vec3::from_fn(|_, _| noise.sample(&mut rng))
                    } else {
                        clean
                    }
                })
                .collect()
        })
        .collect();
    let scene = TrackedScene::from_dense(30.0, &frames, None)?;
    let ground_truth = (0..base.len()).map(|k| (PointId(k as u32), a)).collect();
    Ok(SyntheticScene {
        scene,
        ground_truth,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolSceneParams {
    pub n: usize,
    pub spacing: f64,
    /// Tool tip descends toward the contact point; tissue is untouched.
    pub approach_frames: usize,
    /// Tool and contact region at rest.
    pub hold_frames: usize,
    /// Tool turns about the sheet normal through its tip.
    pub rotate_frames: usize,
    /// Tool and contact region translate along `pull_direction`.
    pub pull_frames: usize,
    pub contact_radius: f64,
    pub approach_speed: f64,
    pub rotate_rate: f64,
    pub pull_speed: f64,
    pub pull_direction: Vec3,
    /// Amplitude and period (frames) of the per-point out-of-plane background motion.
    pub physio_amplitude: f64,
    pub physio_period: f64,
    pub noise: f64,
}

impl Default for ToolSceneParams {
    fn default() -> Self {
        Self {
            n: 48,
            spacing: 0.001,
            approach_frames: 10,
            hold_frames: 15,
            rotate_frames: 10,
            pull_frames: 15,
            contact_radius: 0.006,
            approach_speed: 5e-4,
            rotate_rate: 0.02,
            pull_speed: 3e-4,
            pull_direction: Vec3::z(),
            physio_amplitude: 5e-5,
            physio_period: 12.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolSegment {
    Approach,
    Hold,
    Rotate,
    Pull,
}

impl ToolSceneParams {
    pub fn frames(&self) -> usize {
        self.approach_frames + self.hold_frames + self.rotate_frames + self.pull_frames
    }

    /// Segment of the transition from `frame` to `frame + 1`.
    pub fn segment(&self, frame: usize) -> ToolSegment {
        let a = self.approach_frames;
        let h = a + self.hold_frames;
        let r = h + self.rotate_frames;
        match frame {
            f if f < a => ToolSegment::Approach,
            f if f < h => ToolSegment::Hold,
            f if f < r => ToolSegment::Rotate,
            _ => ToolSegment::Pull,
        }
    }

    /// Weight with which tissue at in-plane distance `d` from the contact
    /// point follows the tool: 1 inside the contact radius, smoothstep to 0 at
    /// twice the radius.
    pub fn follow_weight(&self, d: f64) -> f64 {
        1.0 - smoothstep((d - self.contact_radius) / self.contact_radius)
    }

    /// Weight of the background motion: 0 up to twice the contact radius,
    /// smoothstep to 1 at 2.5 times the radius.
    pub fn physio_weight(&self, d: f64) -> f64 {
        smoothstep((d - 2.0 * self.contact_radius) / (0.5 * self.contact_radius))
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Sheet plus a tool that approaches, holds, rotates about the sheet normal,
/// then pulls. Tissue near the contact point follows the tool rigidly with a
/// smooth falloff; the sheet beyond the falloff carries incoherent periodic
/// out-of-plane motion. The ground-truth compliant direction is the pull
/// direction.
pub fn generate_tool_interaction_scene(params: &ToolSceneParams, seed: u64) -> Result<(SyntheticScene, ToolTrajectory)> {
    if params.n < 4 {
        return Err(Error::GridTooSmall);
    }
    let pull = params
        .pull_direction
        .try_normalize(0.0)
        .ok_or_else(|| Error::Config(vec!["pull direction must be nonzero".into()]))?;
    let noise = Normal::new(0.0, params.noise).map_err(|e| Error::Config(vec![format!("tool scene noise: {e}")]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = grid(params.n, params.spacing);
    let phases: Vec<f64> = base.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let contact = Vec3::zeros();
    let axis = Unit::new_unchecked(Vec3::z());
    let frames = params.frames();

    // Tool state per frame: tip position, rotation angle about the normal.
    let mut tips = Vec::with_capacity(frames);
    let mut angles = Vec::with_capacity(frames);
    let start = contact + Vec3::z() * params.approach_speed * params.approach_frames as f64;
    let (mut tip, mut angle) = (start, 0.0);
    for t in 0..frames {
        tips.push(tip);
        angles.push(angle);
        match params.segment(t) {
            ToolSegment::Approach => tip -= Vec3::z() * params.approach_speed,
            ToolSegment::Hold => {}
            ToolSegment::Rotate => angle += params.rotate_rate,
            ToolSegment::Pull => tip += pull * params.pull_speed,
        }
    }
    let contact_frame = params.approach_frames;

    let positions: Vec<Vec<Vec3>> = (0..frames)
        .map(|t| {
            let (lift, turn) = if t >= contact_frame {
                (tips[t] - tips[contact_frame], angles[t])
            } else {
                (Vec3::zeros(), 0.0)
            };
            base.iter()
                .zip(&phases)
                .map(|(p, phase)| {
                    let d = (p - contact).norm();
                    let w = params.follow_weight(d);
                    let rot = Rotation3::from_axis_angle(&axis, w * turn);
                    let followed = contact + rot * (p - contact) + lift * w;
                    let physio = params.physio_weight(d)
                        * params.physio_amplitude
                        * (2.0 * PI * t as f64 / params.physio_period + phase).sin();
                    let mut q = followed + Vec3::z() * physio;
                    if params.noise > 0.0 {
                        q += Vec3::from_fn(|_, _| noise.sample(&mut rng));
                    }
                    q
                })
                .collect()
        })
        .collect();
    let scene = TrackedScene::from_dense(30.0, &positions, None)?;
    let poses = (0..frames)
        .map(|t| {
            let r = Rotation3::from_axis_angle(&axis, angles[t]).into_inner();
            RigidPose::new(r, tips[t]).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let tool = ToolTrajectory::from_poses(poses)?;
    let ground_truth = (0..base.len()).map(|k| (PointId(k as u32), pull)).collect();
    Ok((
        SyntheticScene {
            scene,
            ground_truth,
            seed,
        },
        tool,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(points: &[Vec3]) -> TrackedScene {
        let frames: Vec<Vec<Vec3>> = points.iter().map(|p| vec![*p]).collect();
        TrackedScene::from_dense(30.0, &frames, None).unwrap()
    }

    #[test]
    fn observed_direction_examples() {
        let s = track(&[Vec3::zeros(), Vec3::new(0.002, 0.0, 0.0)]);
        let u = observed_direction(&s, 0, 0, 1e-4, 1e-9).unwrap();
        assert!((u - Vec3::x()).norm() < 1e-15);
        let s = track(&[Vec3::zeros(), Vec3::new(1e-6, 0.0, 0.0)]);
        assert!(observed_direction(&s, 0, 0, 1e-4, 1e-9).is_none());
    }

    #[test]
    fn delta_does_not_change_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..200 {
            let v = Vec3::from_fn(|_, _| rng.random_range(-1e-2..1e-2));
            if v.norm() < 1e-4 {
                continue;
            }
            let a = normalized_motion(&v, 1e-4, 1e-8).unwrap();
            let b = normalized_motion(&v, 1e-4, 1e-10).unwrap();
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn alignment_examples() {
        let u = Vec3::new(0.6, 0.8, 0.0);
        assert!((compliant_alignment(&u, &u) - 1.0).abs() < 1e-15);
        assert_eq!(compliant_alignment(&Vec3::z(), &u), 0.0);
        assert_eq!(compliant_alignment(&-u, &Vec3::x()), compliant_alignment(&u, &Vec3::x()));
    }

    #[test]
    fn baseline_examples() {
        let d = 1e-3;
        let straight = track(&[Vec3::zeros(), Vec3::x() * d, Vec3::x() * 2.0 * d]);
        assert!((velocity_persistence_baseline(&straight, 0, 1, 1e-4, 1e-9).unwrap() - 1.0).abs() < 1e-12);
        let back = track(&[Vec3::zeros(), Vec3::x() * d, Vec3::zeros()]);
        assert!((velocity_persistence_baseline(&back, 0, 1, 1e-4, 1e-9).unwrap() + 1.0).abs() < 1e-12);
        let turn = track(&[Vec3::zeros(), Vec3::x() * d, Vec3::new(d, d, 0.0)]);
        assert!(velocity_persistence_baseline(&turn, 0, 1, 1e-4, 1e-9).unwrap().abs() < 1e-12);
        assert!(velocity_persistence_baseline(&turn, 0, 0, 1e-4, 1e-9).is_none());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn still_sheet_has_no_samples() {
        let p = SheetParams {
            amplitude: 0.0,
            frames: 12,
            ..Default::default()
        };
        let s = generate_anisotropic_sheet(&p, 1).unwrap();
        let err = iteration_sweep(&s.scene, &[1, 5], &RunConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoValidSamples));
    }

    #[test]
    fn sheet_motion_is_dominated_by_the_axis() {
        let p = SheetParams {
            frames: 40,
            ..Default::default()
        };
        let s = generate_anisotropic_sheet(&p, 2).unwrap();
        let (a, b, c) = (Vec3::x(), Vec3::y(), Vec3::z());
        for t in 0..39 {
            for slot in 0..s.scene.point_count() {
                let v = displacement(&s.scene, slot, t).unwrap();
                if v.norm() == 0.0 {
                    continue;
                }
                assert!(v.dot(&a).abs() > v.dot(&b).abs() && v.dot(&a).abs() > v.dot(&c).abs());
            }
        }
        assert!(s.ground_truth.iter().all(|(_, g)| (g.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let p = SheetParams {
            noise: 1e-5,
            frames: 5,
            ..Default::default()
        };
        let a = generate_anisotropic_sheet(&p, 7).unwrap();
        let b = generate_anisotropic_sheet(&p, 7).unwrap();
        let c = generate_anisotropic_sheet(&p, 8).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_ne!(a.scene, c.scene);
        assert_eq!(a.scene.ids(), c.scene.ids());
    }

    #[test]
    fn small_grids_are_rejected() {
        let p = SheetParams {
            n: 3,
            ..Default::default()
        };
        assert!(matches!(generate_anisotropic_sheet(&p, 0), Err(Error::GridTooSmall)));
    }

    #[test]
    fn tool_scene_segments() {
        let p = ToolSceneParams::default();
        let (s, tool) = generate_tool_interaction_scene(&p, 3).unwrap();
        assert_eq!(s.scene.frame_count(), p.frames());
        assert_eq!(tool.frame_count(), p.frames());
        for t in 0..p.frames() - 1 {
            let tw = tool.twist(t).unwrap();
            match p.segment(t) {
                ToolSegment::Hold => {
                    assert_eq!(tw.v, Vec3::zeros());
                    assert_eq!(tw.omega, Vec3::zeros());
                }
                ToolSegment::Approach => assert!(tw.v.z < 0.0),
                ToolSegment::Rotate => assert!(tw.omega.z > 0.0),
                ToolSegment::Pull => assert!(tw.v.dot(&p.pull_direction) > 0.0),
            }
        }
    }
}
