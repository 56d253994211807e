//! Scenario files, waypoint interpolation, planning runs and artifact export.

mod interp;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

pub use interp::{interpolate, segment_sample_count, DenseTrajectory};
pub use run::{export, run, world_region, RegionSnapshot, RunArtifacts, TargetResidual};

use crate::config::{PoseConfig, RobotConfig, ShapeConfig};
use crate::kinemodel::KinematicModel;
use crate::kinemodel::{rotation_from_euler, Configuration};
use crate::komo::{ProblemWeights, SolverParams};
use crate::reachability::RegionParams;
use crate::surrogate::{sample_dataset, train, MlpModel, SurrogateError, TrainConfig};
use crate::Error;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Path optimization without reachability terms.
    Baseline,
    /// Adds the margin cost and the margin floor.
    Rakomo,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Rakomo => "rakomo",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "rakomo" => Ok(Mode::Rakomo),
            other => Err(format!("unknown mode `{other}` (expected baseline or rakomo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub n_slices: usize,
    pub eps_star: f64,
    pub eps_lower: f64,
    /// Clearance required by every collision pair, meters.
    pub collision_margin: f64,
    /// Bound on base displacement used to reject obviously unreachable targets.
    pub max_base_travel: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { n_slices: 15, eps_star: 0.15, eps_lower: 0.05, collision_margin: 0.02, max_base_travel: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolationConfig {
    pub rate_hz: f64,
    pub v_max_base_linear: f64,
    pub v_max_base_angular: f64,
    pub v_max_arm: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self { rate_hz: 250.0, v_max_base_linear: 0.25, v_max_base_angular: 0.5, v_max_arm: 1.0 }
    }
}

impl InterpolationConfig {
    pub fn v_max(&self, n_arm: usize) -> DVector<f64> {
        let mut v = DVector::from_element(6 + n_arm, self.v_max_arm);
        v.rows_mut(0, 3).fill(self.v_max_base_linear);
        v.rows_mut(3, 3).fill(self.v_max_base_angular);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub base_pos: [f64; 3],
    #[serde(default)]
    pub base_euler: [f64; 3],
    pub arm_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub name: String,
    #[serde(default)]
    pub pose: PoseConfig,
    #[serde(default)]
    pub swept_radius: f64,
    pub shape: ShapeConfig,
}

/// Graspable object; it joins the robot's collision model while held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub name: String,
    #[serde(default)]
    pub swept_radius: f64,
    pub shape: ShapeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub slice: usize,
    #[serde(default = "default_link")]
    pub link: String,
    pub position: [f64; 3],
    /// Object picked up at this slice; held from the next slice on.
    #[serde(default)]
    pub grasp: Option<String>,
    /// Pose of the grasped object in the link frame.
    #[serde(default)]
    pub grasp_pose: PoseConfig,
    /// Object released at this slice.
    #[serde(default)]
    pub release: Option<String>,
}

fn default_link() -> String {
    "ee".to_string()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Pre-trained model file, relative to the scenario file.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Used when no model file is given.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    /// Robot description, relative to the scenario file.
    pub robot: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub weights: ProblemWeights,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub interpolation: InterpolationConfig,
    pub initial: InitialState,
    /// World foot positions; defaults to the nominal stance under the initial base.
    #[serde(default)]
    pub feet: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub targets: Vec<TargetConfig>,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    /// Reference solve times per mode (ms), copied into the report for comparison.
    #[serde(default)]
    pub reference_solve_time_ms: BTreeMap<String, f64>,
}

fn default_mode() -> Mode {
    Mode::Rakomo
}

/// A validated scenario with its robot description resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub robot: RobotConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn mode(&self) -> Mode {
        self.file.mode
    }

    pub fn initial_configuration(&self) -> Configuration {
        let i = &self.file.initial;
        Configuration::new(Vector3::from(i.base_pos), Vector3::from(i.base_euler), DVector::from_column_slice(&i.arm_q))
    }

    /// World foot positions: explicit, or the nominal stance carried by the initial base's xy and yaw.
    pub fn feet_world(&self) -> Vec<Vector3<f64>> {
        if let Some(f) = &self.file.feet {
            return f.iter().map(|p| Vector3::from(*p)).collect();
        }
        let i = &self.file.initial;
        let yaw = rotation_from_euler(&Vector3::new(0.0, 0.0, i.base_euler[2]));
        let shift = Vector3::new(i.base_pos[0], i.base_pos[1], 0.0);
        self.robot.stance.feet.iter().map(|f| yaw * Vector3::from(*f) + shift).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn from_toml_str(text: &str, origin: &str, base_dir: &Path) -> Result<Self, Error> {
        let cfg_err = |message: String| Error::Config { path: origin.to_string(), message };
        let file: ScenarioFile = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        if file.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(cfg_err(format!("schema_version {} unsupported (expected {SCENARIO_SCHEMA_VERSION})", file.schema_version)));
        }
        let robot_path = if file.robot.is_absolute() { file.robot.clone() } else { base_dir.join(&file.robot) };
        let robot = RobotConfig::load(&robot_path)?;
        let scenario = Scenario { file, robot, base_dir: base_dir.to_path_buf() };
        scenario.validate().map_err(cfg_err)?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<(), String> {
        let f = &self.file;
        let p = &f.planner;
        if p.n_slices < 2 {
            return Err(format!("planner.n_slices = {} (need at least 2)", p.n_slices));
        }
        if !(p.eps_lower < p.eps_star) {
            return Err(format!("planner.eps_lower ({}) must be below planner.eps_star ({})", p.eps_lower, p.eps_star));
        }
        if !(p.collision_margin >= 0.0) || !(p.max_base_travel > 0.0) {
            return Err("planner.collision_margin must be >= 0 and planner.max_base_travel > 0".into());
        }
        f.weights.validate()?;
        f.solver.validate().map_err(|e| format!("solver: {e}"))?;
        let ip = &f.interpolation;
        if [ip.rate_hz, ip.v_max_base_linear, ip.v_max_base_angular, ip.v_max_arm].iter().any(|v| !(*v > 0.0)) {
            return Err("interpolation rates and velocity limits must be positive".into());
        }
        let n_arm = self.robot.arm.joints.len();
        if f.initial.arm_q.len() != n_arm {
            return Err(format!("initial.arm_q has {} entries, robot arm has {n_arm} joints", f.initial.arm_q.len()));
        }
        self.initial_configuration().check_pitch().map_err(|e| format!("initial.base_euler: {e}"))?;
        if let Some(feet) = &f.feet {
            if feet.len() != self.robot.legs.len() {
                return Err(format!("feet lists {} positions for {} legs", feet.len(), self.robot.legs.len()));
            }
        }
        for (i, o) in f.obstacles.iter().enumerate() {
            o.shape.to_primitive().validate().map_err(|e| format!("obstacles[{i}] `{}`: {e}", o.name))?;
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, o) in f.objects.iter().enumerate() {
            o.shape.to_primitive().validate().map_err(|e| format!("objects[{i}] `{}`: {e}", o.name))?;
            if !names.insert(o.name.as_str()) {
                return Err(format!("objects[{i}]: duplicate name `{}`", o.name));
            }
        }
        let mut held: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order: Vec<&TargetConfig> = f.targets.iter().collect();
        order.sort_by_key(|t| t.slice);
        for (i, t) in f.targets.iter().enumerate() {
            if t.slice < 1 || t.slice > p.n_slices {
                return Err(format!("targets[{i}].slice = {} outside 1..={}", t.slice, p.n_slices));
            }
            if t.link != "ee" && t.link != "base" && !self.robot.arm.joints.iter().any(|j| j.name == t.link) {
                return Err(format!("targets[{i}].link `{}` is not a robot link", t.link));
            }
            for obj in t.grasp.iter().chain(t.release.iter()) {
                if !names.contains(obj.as_str()) {
                    return Err(format!("targets[{i}] refers to unknown object `{obj}`"));
                }
            }
            let reach = f.planner.max_base_travel + arm_reach(&self.robot);
            let dist = (Vector3::from(t.position) - Vector3::from(f.initial.base_pos)).norm();
            if dist > reach {
                return Err(format!("targets[{i}] is {dist:.2} m from the base, beyond the {reach:.2} m the robot can cover"));
            }
        }
        for t in order {
            if let Some(g) = &t.grasp {
                if held.insert(g, t.slice).is_some() {
                    return Err(format!("object `{g}` grasped twice"));
                }
            }
            if let Some(r) = &t.release {
                match held.remove(r.as_str()) {
                    Some(s) if s < t.slice => {}
                    _ => return Err(format!("object `{r}` released at slice {} without an earlier grasp", t.slice)),
                }
            }
        }
        Ok(())
    }
}

/// Upper bound on the distance from the base origin to the gripper.
fn arm_reach(robot: &RobotConfig) -> f64 {
    let joints: f64 = robot.arm.joints.iter().map(|j| Vector3::from(j.origin.xyz).norm()).sum();
    joints + Vector3::from(robot.arm.ee_offset.xyz).norm() + Vector3::from(robot.base.half_extents).norm()
}

/// Surrogate for a run: `override_path`, else the scenario's model file, else
/// a model trained from the scenario's `[surrogate.train]` table (seeded with
/// the scenario seed). `None` when nothing is configured.
pub fn load_surrogate(scenario: &Scenario, override_path: Option<&Path>) -> Result<Option<MlpModel>, Error> {
    let file = override_path.map(Path::to_path_buf).or_else(|| scenario.file.surrogate.model.as_ref().map(|p| scenario.resolve(p)));
    if let Some(path) = file {
        return match MlpModel::load(&path) {
            Ok(m) => Ok(Some(m)),
            // Baseline runs only use the model for the diagnostic trace.
            Err(SurrogateError::Io { .. }) if override_path.is_none() && scenario.mode() == Mode::Baseline => Ok(None),
            Err(e) => Err(e.into()),
        };
    }
    let Some(cfg) = &scenario.file.surrogate.train else {
        return Ok(None);
    };
    let cfg = TrainConfig { seed: scenario.file.seed, ..cfg.clone() };
    let kin = KinematicModel::from_config(&scenario.robot)?;
    let ranges = scenario.robot.sampling.clone();
    let data = sample_dataset(&kin, &cfg, &ranges, &RegionParams::default())?;
    Ok(Some(train(&data, &cfg, &ranges)?.0))
}

pub fn load_scenario(path: &Path) -> Result<Scenario, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Scenario::from_toml_str(&text, &path.display().to_string(), &dir)
}

#[cfg(test)]
mod tests;
