//! Rigid tool kinematics: SO(3) exp/log, finite twists, induced displacements
//! and tool poses from 3-D keypoints.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{Matrix3x6, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{check_rotation, Mat3, RigidPose, Twist, Vec3};

pub const SMALL_ANGLE: f64 = 1e-7;
pub const NEAR_PI: f64 = 1e-5;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_antisymmetric(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Mat3::identity() + k * a + k * k * b
}

/// Principal logarithm of a rotation matrix as an axis-angle vector.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    check_rotation(r)?;
    let s = vee_antisymmetric(r);
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.norm().atan2(c);
    if theta < SMALL_ANGLE {
        return Ok(s);
    }
    if theta > PI - NEAR_PI {
        // r = cosθ I + sinθ [a]x + (1 - cosθ) a aᵀ
        let sym = (r + r.transpose()) * 0.5;
        let aat = (sym - Mat3::identity() * c) / (1.0 - c);
        let k = (0..3).max_by(|&i, &j| aat[(i, i)].total_cmp(&aat[(j, j)])).unwrap_or(0);
        let ak = aat[(k, k)].max(0.0).sqrt();
        let mut axis = Vec3::from_fn(|i, _| if i == k { ak } else { aat[(i, k)] / ak });
        axis.normalize_mut();
        let m = (0..3).max_by(|&i, &j| s[i].abs().total_cmp(&s[j].abs())).unwrap_or(0);
        if s[m] * axis[m] < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    Ok(s * (theta / theta.sin()))
}

/// Finite pose increment between consecutive frames.
pub fn incremental_twist(from: &RigidPose, to: &RigidPose) -> Result<Twist> {
    let dr = to.rotation() * from.rotation().transpose();
    Ok(Twist {
        v: to.origin() - from.origin(),
        omega: so3_log(&dr)?,
    })
}

/// Displacement a rigid tool step imposes at `p`.
pub fn induced_displacement(xi: &Twist, p: &Vec3, o: &Vec3) -> Vec3 {
    xi.v + xi.omega.cross(&(p - o))
}

/// `[I | -[p - o]x]`, mapping a twist `(v, ω)` to the displacement at `p`.
pub fn point_jacobian(p: &Vec3, o: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&(p - o))));
    j
}

/// Tool pose from keypoints: origin at the centroid, first rotation column
/// along the principal axis of the keypoint spread.
///
/// The axis sign follows `prev_axis` when given; otherwise the axis is made to
/// have a nonnegative z component, then x, then y. The remaining columns come
/// from Gram–Schmidt against the world axis least parallel to the principal one.
pub fn pose_from_keypoints(kps: &[Vec3], prev_axis: Option<&Vec3>) -> Result<RigidPose> {
    if kps.len() < 2 {
        return Err(Error::DegenerateKeypoints);
    }
    let n = kps.len() as f64;
    let centroid = kps.iter().sum::<Vec3>() / n;
    let cov = kps
        .iter()
        .map(|p| p - centroid)
        .fold(Mat3::zeros(), |acc, d| acc + d * d.transpose())
        / n;
    let spread = kps.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if spread.is_nan() || spread <= 1e-12 * centroid.norm().max(1.0) {
        return Err(Error::DegenerateKeypoints);
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imax();
    let mut axis: Vec3 = eig.eigenvectors.column(k).normalize();

    let flip = match prev_axis {
        Some(prev) => axis.dot(prev) < 0.0,
        None => [2, 0, 1]
            .iter()
            .map(|&i| axis[i])
            .find(|c| c.abs() > 1e-12)
            .is_some_and(|c| c < 0.0),
    };
    if flip {
        axis = -axis;
    }

    let world = (0..3)
        .min_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs()))
        .map(|i| Vec3::ith(i, 1.0))
        .unwrap_or_else(Vec3::x);
    let second = (world - axis * axis.dot(&world)).normalize();
    let third = axis.cross(&second);
    RigidPose::new(Mat3::from_columns(&[axis, second, third]), centroid)
}

/// Per-frame tool poses and the twists between consecutive frames. A twist is
/// present only when both of its poses are.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolTrajectory {
    pub poses: Vec<Option<RigidPose>>,
    pub twists: Vec<Option<Twist>>,
}

impl ToolTrajectory {
    pub fn from_poses(poses: Vec<Option<RigidPose>>) -> Result<Self> {
        let twists = poses
            .windows(2)
            .map(|w| match (&w[0], &w[1]) {
                (Some(a), Some(b)) => incremental_twist(a, b).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { poses, twists })
    }

    /// Poses estimated frame by frame from keypoints, with the principal-axis
    /// sign carried forward from the last estimated frame.
    pub fn from_keypoints(frames: &[Vec<Vec3>]) -> Result<Self> {
        let mut prev: Option<Vec3> = None;
        let mut poses = Vec::with_capacity(frames.len());
        for (t, kps) in frames.iter().enumerate() {
            if kps.is_empty() {
                poses.push(None);
                continue;
            }
            match pose_from_keypoints(kps, prev.as_ref()) {
                Ok(pose) => {
                    prev = Some(pose.rotation().column(0).into());
                    poses.push(Some(pose));
                }
                Err(Error::DegenerateKeypoints) => {
                    warn!("frame {t}: degenerate keypoint set, tool pose unavailable");
                    poses.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        Self::from_poses(poses)
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn twist(&self, frame: usize) -> Option<&Twist> {
        self.twists.get(frame).and_then(Option::as_ref)
    }

    pub fn pose(&self, frame: usize) -> Option<&RigidPose> {
        self.poses.get(frame).and_then(Option::as_ref)
    }

    /// Applies `x -> r0 x + t0` to every pose and recomputes the twists.
    pub fn transformed(&self, r0: &Mat3, t0: &Vec3) -> Result<Self> {
        Self::from_poses(self.poses.iter().map(|p| p.as_ref().map(|p| p.transformed(r0, t0))).collect())
    }
}
