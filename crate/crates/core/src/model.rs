//! Shared domain types: the tracked scene, rigid poses, twists and the run
//! configuration. Nothing in here runs an algorithm.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on orthonormality and determinant of a rotation matrix.
pub const ROTATION_TOL: f64 = 1e-9;

/// Tolerance on the norm of a quaternion read from a poses file.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Stable identity of a tracked point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointId(pub u32);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Segmentation class attached to a point in one frame.
pub type Label = u16;

/// One observation of a tracked point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub position: Vec3,
    pub label: Option<Label>,
}

/// Per-frame positions of a fixed set of tracked points.
///
/// Points are addressed by a dense slot index (`0..point_count()`), ordered by
/// ascending [`PointId`]. A slot holding `None` in some frame means the point
/// is absent (occluded) there; absent points take part in no geometric query.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedScene {
    pub fps: f64,
    ids: Vec<PointId>,
    slots: HashMap<PointId, usize>,
    frames: Vec<Vec<Option<PointSample>>>,
}

impl TrackedScene {
    /// Builds a scene from `(frame, id, sample)` observations. The id universe
    /// is every id that appears anywhere; `frame_count` may exceed the last
    /// observed frame (trailing frames are then empty).
    pub fn from_observations(
        frame_count: usize,
        fps: f64,
        observations: impl IntoIterator<Item = (usize, PointId, PointSample)>,
    ) -> Result<Self> {
        let observations: Vec<_> = observations.into_iter().collect();
        let mut ids: Vec<PointId> = observations.iter().map(|o| o.1).collect();
        ids.sort_unstable();
        ids.dedup();
        let slots: HashMap<PointId, usize> =
            ids.iter().enumerate().map(|(slot, id)| (*id, slot)).collect();

        let mut frames = vec![vec![None; ids.len()]; frame_count];
        for (frame, id, sample) in observations {
            if frame >= frame_count {
                return Err(Error::Scene(format!(
                    "frame {frame} out of range (frame_count = {frame_count})"
                )));
            }
            if !sample.position.iter().all(|c| c.is_finite()) {
                return Err(Error::Scene(format!(
                    "non-finite position for point {id} at frame {frame}"
                )));
            }
            let cell = &mut frames[frame][slots[&id]];
            if cell.is_some() {
                return Err(Error::Scene(format!(
                    "duplicate observation of point {id} at frame {frame}"
                )));
            }
            *cell = Some(sample);
        }
        Ok(Self {
            fps,
            ids,
            slots,
            frames,
        })
    }

    /// Builds a fully-present scene from per-frame position arrays that all
    /// share the same point ordering; point ids are `0..n`.
    pub fn from_dense(fps: f64, positions: &[Vec<Vec3>], labels: Option<&[Vec<Label>]>) -> Result<Self> {
        let obs = positions.iter().enumerate().flat_map(|(t, frame)| {
            frame.iter().enumerate().map(move |(i, p)| {
                let label = labels.map(|l| l[t][i]);
                (
                    t,
                    PointId(i as u32),
                    PointSample {
                        position: *p,
                        label,
                    },
                )
            })
        });
        Self::from_observations(positions.len(), fps, obs)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn point_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn id(&self, slot: usize) -> PointId {
        self.ids[slot]
    }

    pub fn slot(&self, id: PointId) -> Option<usize> {
        self.slots.get(&id).copied()
    }

    pub fn sample(&self, frame: usize, slot: usize) -> Option<&PointSample> {
        self.frames.get(frame)?.get(slot)?.as_ref()
    }

    pub fn position(&self, frame: usize, slot: usize) -> Option<Vec3> {
        self.sample(frame, slot).map(|s| s.position)
    }

    pub fn label(&self, frame: usize, slot: usize) -> Option<Label> {
        self.sample(frame, slot).and_then(|s| s.label)
    }

    pub fn is_present(&self, frame: usize, slot: usize) -> bool {
        self.sample(frame, slot).is_some()
    }

    /// Present points of one frame as `(slot, sample)`.
    pub fn present(&self, frame: usize) -> impl Iterator<Item = (usize, &PointSample)> + '_ {
        self.frames[frame]
            .iter()
            .enumerate()
            .filter_map(|(slot, s)| s.as_ref().map(|s| (slot, s)))
    }

    pub fn has_labels(&self) -> bool {
        self.frames
            .iter()
            .flatten()
            .flatten()
            .any(|s| s.label.is_some())
    }

    /// Diagonal of the axis-aligned bounding box of the present points of a frame.
    pub fn bbox_diagonal(&self, frame: usize) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for (_, s) in self.present(frame) {
            lo = lo.inf(&s.position);
            hi = hi.sup(&s.position);
            any = true;
        }
        if any {
            (hi - lo).norm()
        } else {
            0.0
        }
    }

    /// Returns a copy with every position mapped through `f`.
    pub fn map_positions(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        let mut out = self.clone();
        for s in out.frames.iter_mut().flatten().flatten() {
            s.position = f(&s.position);
        }
        out
    }
}

/// Rigid pose `[R | o]` of the tool.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Mat3,
    origin: Vec3,
}

impl RigidPose {
    pub fn new(rotation: Mat3, origin: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidRotation("non-finite origin".into()));
        }
        Ok(Self { rotation, origin })
    }

    pub fn identity_at(origin: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            origin,
        }
    }

    /// Scalar-first unit quaternion; norms off by more than
    /// [`QUATERNION_NORM_TOL`] are rejected, smaller deviations are normalized.
    pub fn from_quaternion(origin: Vec3, qw: f64, qx: f64, qy: f64, qz: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::InvalidRotation(format!(
                "quaternion norm {norm} is not 1 within {QUATERNION_NORM_TOL}"
            )));
        }
        let unit = UnitQuaternion::from_quaternion(q);
        Self::new(unit.to_rotation_matrix().into_inner(), origin)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn origin(&self) -> &Vec3 {
        &self.origin
    }

    /// Scalar-first quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    }

    /// Applies a global rigid transform `x -> R0 x + t0` to this pose.
    pub fn transformed(&self, r0: &Mat3, t0: &Vec3) -> Self {
        Self {
            rotation: r0 * self.rotation,
            origin: r0 * self.origin + t0,
        }
    }
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidRotation("non-finite entries".into()));
    }
    let ortho = (r.transpose() * r - Mat3::identity()).norm();
    if ortho > ROTATION_TOL {
        return Err(Error::InvalidRotation(format!(
            "|R^T R - I|_F = {ortho:e} exceeds {ROTATION_TOL:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::InvalidRotation(format!("det(R) = {det}")));
    }
    Ok(())
}

/// Finite per-step rigid increment `(v, omega)`: meters and radians per frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub v: Vec3,
    pub omega: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// Configuration point at which the constraint Jacobian is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianAt {
    Raw,
    Solved,
}

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Neighborhood radius in meters.
    pub r_cluster: f64,
    /// When set, `r_cluster` is replaced by 2% of the frame-0 bounding-box
    /// diagonal and `sigma` by half of that.
    pub auto_radius: bool,
    pub n_min: usize,
    /// Gaussian weight kernel width in meters.
    pub sigma: f64,
    pub rest_window_tau: usize,
    pub solver_iterations: usize,
    pub alpha_hydro: f64,
    pub alpha_devia: f64,
    pub clamp_percentile: f64,
    pub eps_stiffness: f64,
    pub lambda_ema: f64,
    pub pae_window: usize,
    pub eps_motion: f64,
    pub delta_norm: f64,
    pub seed: u64,
    pub jacobian_at: JacobianAt,
    pub segmentation_filter: bool,
    /// Apply the EMA to PAE as well (off by default).
    pub smooth_pas: bool,
    /// Keep the last valid action direction while the tool is not translating.
    pub hold_action_direction: bool,
    /// Append a per-frame min-max normalized PACS column to the affordance CSV.
    pub normalized_column: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            r_cluster: 0.004,
            auto_radius: false,
            n_min: 8,
            sigma: 0.002,
            rest_window_tau: 10,
            solver_iterations: 10,
            alpha_hydro: 0.0,
            alpha_devia: 1e-4,
            clamp_percentile: 0.98,
            eps_stiffness: 1e-6,
            lambda_ema: 0.8,
            pae_window: 5,
            eps_motion: 1e-4,
            delta_norm: 1e-9,
            seed: 0,
            jacobian_at: JacobianAt::Solved,
            segmentation_filter: true,
            smooth_pas: false,
            hold_action_direction: true,
            normalized_column: false,
        }
    }
}

/// Keys accepted in a config file, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "r_cluster",
    "n_min",
    "sigma",
    "rest_window_tau",
    "solver_iterations",
    "alpha_hydro",
    "alpha_devia",
    "clamp_percentile",
    "eps_stiffness",
    "lambda_ema",
    "pae_window",
    "eps_motion",
    "delta_norm",
    "seed",
    "jacobian_at",
    "segmentation_filter",
    "smooth_pas",
    "hold_action_direction",
    "normalized_column",
];

impl RunConfig {
    /// Checks every bound and reports all violations at once.
    pub fn validate(self) -> Result<Self> {
        let mut errs = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive"));
            }
        };
        positive("r_cluster", self.r_cluster);
        positive("sigma", self.sigma);
        positive("eps_stiffness", self.eps_stiffness);
        positive("eps_motion", self.eps_motion);
        positive("delta_norm", self.delta_norm);
        if self.n_min == 0 {
            errs.push("n_min must be positive".into());
        }
        if self.rest_window_tau == 0 {
            errs.push("rest_window_tau must be positive".into());
        }
        if self.pae_window < 2 {
            errs.push("pae_window must be at least 2".into());
        }
        for (name, v) in [("alpha_hydro", self.alpha_hydro), ("alpha_devia", self.alpha_devia)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be non-negative"));
            }
        }
        if !(self.clamp_percentile > 0.0 && self.clamp_percentile <= 1.0) {
            errs.push("clamp_percentile must lie in (0,1]".into());
        }
        if !(self.lambda_ema > 0.0 && self.lambda_ema < 1.0) {
            errs.push("lambda_ema must lie in open interval (0,1)".into());
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Sets one field from its textual config-file form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse '{value}'"))
        }
        fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
            match value {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(format!("{key}: expected a boolean, got '{value}'")),
            }
        }
        match key {
            "r_cluster" if value == "auto" => self.auto_radius = true,
            "r_cluster" => {
                self.r_cluster = num(key, value)?;
                self.auto_radius = false;
            }
            "n_min" => self.n_min = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "rest_window_tau" => self.rest_window_tau = num(key, value)?,
            "solver_iterations" => self.solver_iterations = num(key, value)?,
            "alpha_hydro" => self.alpha_hydro = num(key, value)?,
            "alpha_devia" => self.alpha_devia = num(key, value)?,
            "clamp_percentile" => self.clamp_percentile = num(key, value)?,
            "eps_stiffness" => self.eps_stiffness = num(key, value)?,
            "lambda_ema" => self.lambda_ema = num(key, value)?,
            "pae_window" => self.pae_window = num(key, value)?,
            "eps_motion" => self.eps_motion = num(key, value)?,
            "delta_norm" => self.delta_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "jacobian_at" => {
                self.jacobian_at = match value {
                    "raw" => JacobianAt::Raw,
                    "solved" => JacobianAt::Solved,
                    _ => return Err(format!("jacobian_at: expected raw|solved, got '{value}'")),
                }
            }
            "segmentation_filter" => self.segmentation_filter = flag(key, value)?,
            "smooth_pas" => self.smooth_pas = flag(key, value)?,
            "hold_action_direction" => self.hold_action_direction = flag(key, value)?,
            "normalized_column" => self.normalized_column = flag(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Textual value of a key, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "r_cluster" if self.auto_radius => "auto".to_string(),
            "r_cluster" => fmt_f64(self.r_cluster),
            "n_min" => self.n_min.to_string(),
            "sigma" => fmt_f64(self.sigma),
            "rest_window_tau" => self.rest_window_tau.to_string(),
            "solver_iterations" => self.solver_iterations.to_string(),
            "alpha_hydro" => fmt_f64(self.alpha_hydro),
            "alpha_devia" => fmt_f64(self.alpha_devia),
            "clamp_percentile" => fmt_f64(self.clamp_percentile),
            "eps_stiffness" => fmt_f64(self.eps_stiffness),
            "lambda_ema" => fmt_f64(self.lambda_ema),
            "pae_window" => self.pae_window.to_string(),
            "eps_motion" => fmt_f64(self.eps_motion),
            "delta_norm" => fmt_f64(self.delta_norm),
            "seed" => self.seed.to_string(),
            "jacobian_at" => match self.jacobian_at {
                JacobianAt::Raw => "raw".into(),
                JacobianAt::Solved => "solved".into(),
            },
            "segmentation_filter" => self.segmentation_filter.to_string(),
            "smooth_pas" => self.smooth_pas.to_string(),
            "hold_action_direction" => self.hold_action_direction.to_string(),
            "normalized_column" => self.normalized_column.to_string(),
            _ => return None,
        })
    }

    /// Resolves `auto_radius` against a scene.
    pub fn resolved_for(&self, scene: &TrackedScene) -> Self {
        let mut cfg = self.clone();
        if cfg.auto_radius && scene.frame_count() > 0 {
            let diag = scene.bbox_diagonal(0);
            if diag > 0.0 {
                cfg.r_cluster = 0.02 * diag;
                cfg.sigma = 0.5 * cfg.r_cluster;
            }
            cfg.auto_radius = false;
        }
        cfg
    }
}

/// Round-trip exact float formatting used in every output file
/// (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
