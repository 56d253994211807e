//! Declarative robot description (TOML).

use std::path::Path;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::collision::Primitive;
use crate::surrogate::SamplingRanges;
use crate::Error;

pub const ROBOT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    #[serde(default)]
    pub xyz: [f64; 3],
    /// Extrinsic roll-pitch-yaw, radians.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl PoseConfig {
    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(crate::kinemodel::rotation_from_euler(&Vector3::from(
                self.rpy,
            )))),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    Sphere { radius: f64 },
    Capsule { radius: f64, half_length: f64 },
    Box { half_extents: [f64; 3] },
    Hull { vertices: Vec<[f64; 3]> },
}

impl ShapeConfig {
    pub fn to_primitive(&self) -> Primitive {
        match self {
            ShapeConfig::Sphere { radius } => Primitive::Sphere { radius: *radius },
            ShapeConfig::Capsule { radius, half_length } => Primitive::Capsule { radius: *radius, half_length: *half_length },
            ShapeConfig::Box { half_extents } => Primitive::Box { half_extents: Vector3::from(*half_extents) },
            ShapeConfig::Hull { vertices } => Primitive::ConvexHull { vertices: vertices.iter().map(|v| Vector3::from(*v)).collect() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub half_extents: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmJointConfig {
    pub name: String,
    pub origin: PoseConfig,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub joints: Vec<ArmJointConfig>,
    #[serde(default)]
    pub ee_offset: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegConfig {
    pub name: String,
    pub hip_offset: [f64; 3],
    /// HAA-to-HFE lateral offset, upper link, lower link.
    pub link_lengths: [f64; 3],
    /// (lower, upper) for HAA, HFE, KFE.
    pub limits: [[f64; 2]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StanceConfig {
    pub nominal_height: f64,
    /// World-frame foot positions with the base at the origin, one per leg.
    pub feet: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub name: String,
    pub link: String,
    #[serde(default)]
    pub pose: PoseConfig,
    #[serde(default)]
    pub swept_radius: f64,
    pub shape: ShapeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub schema_version: u32,
    pub name: String,
    /// Link pairs never checked for self-collision.
    #[serde(default)]
    pub self_collision_exclude: Vec<[String; 2]>,
    pub base: BaseConfig,
    pub arm: ArmConfig,
    pub legs: Vec<LegConfig>,
    pub stance: StanceConfig,
    #[serde(default)]
    pub bodies: Vec<BodyConfig>,
    #[serde(default)]
    pub sampling: SamplingRanges,
}

impl RobotConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, Error> {
        let cfg: RobotConfig = toml::from_str(text).map_err(|e| Error::Config { path: origin.to_string(), message: e.to_string() })?;
        if cfg.schema_version != ROBOT_SCHEMA_VERSION {
            return Err(Error::Config {
                path: origin.to_string(),
                message: format!("schema_version {} unsupported (expected {ROBOT_SCHEMA_VERSION})", cfg.schema_version),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}
