//! Physics-aware affordance estimation for tracked deformable scenes.

pub mod affordance;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod mechanics;
pub mod model;
pub mod pipeline;
pub mod solver;
pub mod stiffness;

pub use error::{Error, Result};
