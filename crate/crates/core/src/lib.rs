//! Reachability-aware trajectory optimization for legged manipulators.
//!
//! The planning model is a floating base box carrying a serial arm. Leg
//! kinematic limits enter the path optimizer through the *reachability
//! margin*: the distance from the base's ground projection to the boundary of
//! the region of base positions for which every leg has an in-limits
//! inverse-kinematics solution. The margin is computed numerically by
//! [`reachability`], approximated by a small MLP in [`surrogate`], and used
//! as a cost and a constraint by the k-order Markov optimizer in [`komo`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collision;
pub mod config;
pub mod kinemodel;
pub mod komo;
pub mod reachability;
pub mod scenario;
pub mod surrogate;

use thiserror::Error;

pub use collision::{ConvexShape, Primitive, ProximityResult};
pub use config::RobotConfig;
pub use kinemodel::{Configuration, KinematicModel, LinkId};
pub use komo::{KktReport, SolverParams, Trajectory};
pub use reachability::{ReachableRegion, RegionParams, RegionQuery};
pub use scenario::{Mode, RunArtifacts, Scenario};
pub use surrogate::{MlpModel, TrainConfig};

/// Crate-level error wrapping each subsystem's failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kinematics(#[from] kinemodel::KinematicsError),
    #[error(transparent)]
    Collision(#[from] collision::CollisionError),
    #[error(transparent)]
    Reachability(#[from] reachability::ReachabilityError),
    #[error(transparent)]
    Surrogate(#[from] surrogate::SurrogateError),
    #[error(transparent)]
    Solver(#[from] komo::SolverError),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
