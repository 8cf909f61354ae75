#![allow(dead_code)]

use nalgebra::{Rotation3, Unit};
use pacs::kinematics::ToolTrajectory;
use pacs::model::{RigidPose, TrackedScene, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Jittered `nx × ny` grid on a gently curved surface. Each frame applies a
/// smooth non-rigid deformation (travelling bump plus shear and stretch) and
/// small i.i.d. noise, so neighborhoods are full-rank and deform over time.
pub fn wavy_sheet(nx: usize, ny: usize, spacing: f64, frames: usize, seed: u64) -> TrackedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec3> = (0..nx * ny)
        .map(|k| {
            let x = (k % nx) as f64 * spacing + rng.random_range(-0.3..0.3) * spacing;
            let y = (k / nx) as f64 * spacing + rng.random_range(-0.3..0.3) * spacing;
            let z = 2.0 * spacing * (x / (8.0 * spacing)).sin() * (y / (11.0 * spacing)).cos()
                + rng.random_range(-0.2..0.2) * spacing;
            Vec3::new(x, y, z)
        })
        .collect();
    let positions = (0..frames)
        .map(|t| {
            let ph = t as f64 * 0.21;
            let s = 1.0 + 0.03 * ph.sin();
            base.iter()
                .map(|p| {
                    let bump = 0.5 * spacing * (p.x / (6.0 * spacing) - ph).sin();
                    let q = Vec3::new(s * p.x + 0.02 * ph.cos() * p.y, p.y / s.sqrt(), p.z / s.sqrt() + bump);
                    q + Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02) * spacing)
                })
                .collect()
        })
        .collect::<Vec<Vec<Vec3>>>();
    TrackedScene::from_dense(30.0, &positions, None).unwrap()
}

/// Random points in a box, deformed by a time-varying volume-preserving
/// stretch plus a shear.
pub fn blob(n: usize, frames: usize, half: f64, seed: u64) -> TrackedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-half..half))).collect();
    let positions = (0..frames)
        .map(|t| {
            let ph = t as f64 * 0.37;
            let s = 1.0 + 0.04 * ph.sin();
            let g = 0.03 * (0.5 * ph).cos();
            base.iter()
                .map(|p| {
                    let q = Vec3::new(s * p.x + g * p.y, p.y / s.sqrt(), p.z / s.sqrt());
                    q + Vec3::from_fn(|_, _| rng.random_range(-1e-5..1e-5))
                })
                .collect()
        })
        .collect::<Vec<Vec<Vec3>>>();
    TrackedScene::from_dense(30.0, &positions, None).unwrap()
}

/// Tool sweeping over the scene while turning about a slowly precessing axis.
pub fn tool_path(frames: usize, center: Vec3, radius: f64) -> ToolTrajectory {
    let poses = (0..frames)
        .map(|t| {
            let a = t as f64 * 0.13;
            let axis = Unit::new_normalize(Vec3::new(a.cos(), a.sin(), 2.0));
            let r = Rotation3::from_axis_angle(&axis, 0.05 * t as f64).into_inner();
            let o = center + Vec3::new(radius * a.cos(), radius * a.sin(), radius * (1.0 + 0.2 * (0.7 * a).sin()));
            Some(RigidPose::new(r, o).unwrap())
        })
        .collect();
    ToolTrajectory::from_poses(poses).unwrap()
}

/// Random proper rotation.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Unit::new_normalize(Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI))
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
