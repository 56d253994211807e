use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{interpolate, DenseTrajectory, Mode, Scenario};
use crate::kinemodel::{rotation_from_euler, Configuration, KinematicModel, LegAngles};
use crate::komo::{build_problem, solve, KktReport, Trajectory};
use crate::reachability::{compute_region, margin_oracle, stance_ik, ReachabilityError, ReachableRegion, RegionParams, RegionQuery};
use crate::surrogate::MlpModel;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResidual {
    pub slice: usize,
    pub link: String,
    /// ‖H(q_t) - z‖, meters.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSnapshot {
    pub sample: usize,
    /// World-frame polygon; `None` when the base is outside its reachable region.
    pub region: Option<ReachableRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub eps_star: f64,
    pub eps_lower: f64,
    pub arm_joint_names: Vec<String>,
    pub leg_names: Vec<String>,
    pub planned: Trajectory,
    pub dense: DenseTrajectory,
    /// Oracle margin per dense sample; 0 where the stance is infeasible.
    pub oracle_margin: Vec<f64>,
    pub infeasible_samples: usize,
    pub surrogate_margin: Option<Vec<f64>>,
    /// Leg IK per dense sample, `None` where any leg is out of reach.
    pub leg_angles: Vec<Option<Vec<LegAngles>>>,
    pub report: KktReport,
    pub regions: Vec<RegionSnapshot>,
    pub target_residuals: Vec<TargetResidual>,
    pub reference_solve_time_ms: BTreeMap<String, f64>,
}

impl RunArtifacts {
    pub fn min_oracle_margin(&self) -> f64 {
        self.oracle_margin.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn min_surrogate_margin(&self) -> Option<f64> {
        self.surrogate_margin.as_ref().map(|m| m.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn max_target_residual(&self) -> f64 {
        self.target_residuals.iter().map(|t| t.residual).fold(0.0, f64::max)
    }

    /// Largest |oracle - surrogate| over feasible dense samples.
    pub fn max_surrogate_gap(&self) -> Option<f64> {
        let s = self.surrogate_margin.as_ref()?;
        Some(
            self.oracle_margin
                .iter()
                .zip(s)
                .zip(&self.leg_angles)
                .filter(|(_, legs)| legs.is_some())
                .map(|((o, s), _)| (o - s).abs())
                .fold(0.0, f64::max),
        )
    }
}

fn oracle_at(model: &KinematicModel, q: &Configuration, feet: &[Vector3<f64>], params: &RegionParams) -> Result<Option<f64>, Error> {
    match margin_oracle(model, &RegionQuery::from_configuration(q, feet), params) {
        Ok(m) => Ok(Some(m)),
        Err(ReachabilityError::StartOutsideRegion(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// World-frame region around the base of `q`.
pub fn world_region(
    model: &KinematicModel,
    q: &Configuration,
    feet: &[Vector3<f64>],
    params: &RegionParams,
) -> Result<Option<ReachableRegion>, Error> {
    let query = RegionQuery::from_configuration(q, feet);
    match compute_region(model, &query, params) {
        Ok(region) => {
            let (e1, _) = query.horizontal_basis();
            let e1_world = rotation_from_euler(&q.base_euler) * e1;
            let heading = e1_world.y.atan2(e1_world.x);
            Ok(Some(region.to_world(heading, &Vector2::new(q.base_pos.x, q.base_pos.y))))
        }
        Err(ReachabilityError::StartOutsideRegion(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Plan, interpolate and evaluate one scenario.
pub fn run(scenario: &Scenario, surrogate: Option<Arc<MlpModel>>) -> Result<RunArtifacts, Error> {
    let kin = KinematicModel::from_config(&scenario.robot)?;
    let (init, problem) = build_problem(scenario, &kin, surrogate.clone())?;
    let (planned, report) = solve(&init, &problem, &scenario.file.solver)?;

    let ip = &scenario.file.interpolation;
    let dense = interpolate(&planned, &ip.v_max(kin.n_arm()), ip.rate_hz);
    let feet = scenario.feet_world();
    let params = RegionParams::default();
    let oracle: Vec<Option<f64>> = dense.configs.par_iter().map(|q| oracle_at(&kin, q, &feet, &params)).collect::<Result<_, _>>()?;
    let infeasible_samples = oracle.iter().filter(|m| m.is_none()).count();
    let surrogate_margin = match &surrogate {
        Some(net) => Some(dense.configs.iter().map(|q| net.margin(q, &feet)).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    let leg_angles = dense
        .configs
        .iter()
        .map(|q| {
            let query = RegionQuery::from_configuration(q, &feet);
            stance_ik(&kin, query.feet_in_base.iter().copied())
        })
        .collect();
    let snapshot_samples = [0, dense.len() / 2, dense.len() - 1];
    let regions = snapshot_samples
        .iter()
        .map(|&i| Ok(RegionSnapshot { sample: i, region: world_region(&kin, &dense.configs[i], &feet, &params)? }))
        .collect::<Result<Vec<_>, Error>>()?;
    let target_residuals = scenario
        .file
        .targets
        .iter()
        .map(|t| {
            let link = kin.link_by_name(&t.link)?;
            let p = kin.fk_frame(&planned.configs[t.slice], link)?.translation.vector;
            Ok(TargetResidual { slice: t.slice, link: t.link.clone(), residual: (p - Vector3::from(t.position)).norm() })
        })
        .collect::<Result<Vec<_>, Error>>()?;

    Ok(RunArtifacts {
        scenario: scenario.name().to_string(),
        mode: scenario.mode(),
        seed: scenario.file.seed,
        eps_star: scenario.file.planner.eps_star,
        eps_lower: scenario.file.planner.eps_lower,
        arm_joint_names: kin.arm.iter().map(|j| j.name.clone()).collect(),
        leg_names: kin.legs.iter().map(|l| l.name.clone()).collect(),
        planned,
        dense,
        oracle_margin: oracle.iter().map(|m| m.unwrap_or(0.0)).collect(),
        infeasible_samples,
        surrogate_margin,
        leg_angles,
        report,
        regions,
        target_residuals,
        reference_solve_time_ms: scenario.file.reference_solve_time_ms.clone(),
    })
}

#[derive(Debug, Serialize)]
struct ReportJson<'a> {
    scenario: &'a str,
    mode: Mode,
    seed: u64,
    n_slices: usize,
    eps_star: f64,
    eps_lower: f64,
    dense_samples: usize,
    rate_hz: f64,
    min_oracle_margin: f64,
    min_surrogate_margin: Option<f64>,
    max_oracle_surrogate_gap: Option<f64>,
    infeasible_samples: usize,
    target_residuals: &'a [TargetResidual],
    solver: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    solve_time_s: Option<f64>,
    reference_solve_time_ms: &'a BTreeMap<String, f64>,
}

fn config_header(a: &RunArtifacts) -> String {
    let mut h = String::from("time,base_x,base_y,base_z,roll,pitch,yaw");
    for n in &a.arm_joint_names {
        write!(h, ",{n}").unwrap();
    }
    h
}

fn push_row(out: &mut String, time: f64, values: impl IntoIterator<Item = f64>) {
    write!(out, "{time}").unwrap();
    for v in values {
        write!(out, ",{v}").unwrap();
    }
    out.push('\n');
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

/// Write the CSV/JSON artifact set. Wall-clock time is included only when `record_timing` is set,
/// so that repeated runs produce identical files.
pub fn export(a: &RunArtifacts, out_dir: &Path, record_timing: bool) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.display().to_string(), source: e })?;
    let dense = &a.dense;

    let mut traj = config_header(a) + "\n";
    for (i, q) in dense.configs.iter().enumerate() {
        push_row(&mut traj, dense.time(i), q.to_vector().iter().copied());
    }
    write_file(out_dir, "trajectory.csv", &traj)?;

    let mut way = config_header(a).replacen("time", "slice", 1) + "\n";
    for (t, q) in a.planned.configs.iter().enumerate() {
        push_row(&mut way, t as f64, q.to_vector().iter().copied());
    }
    write_file(out_dir, "waypoints.csv", &way)?;

    let mut margin = String::from("time,oracle,surrogate\n");
    for (i, m) in a.oracle_margin.iter().enumerate() {
        let s = a.surrogate_margin.as_ref().map(|s| s[i]).unwrap_or(f64::NAN);
        push_row(&mut margin, dense.time(i), [*m, s]);
    }
    write_file(out_dir, "margin.csv", &margin)?;

    let mut joints = String::from("time");
    for n in &a.arm_joint_names {
        write!(joints, ",{n}").unwrap();
    }
    for l in &a.leg_names {
        write!(joints, ",{l}_haa,{l}_hfe,{l}_kfe").unwrap();
    }
    joints.push('\n');
    for (i, q) in dense.configs.iter().enumerate() {
        let legs: Vec<f64> = match &a.leg_angles[i] {
            Some(angles) => angles.iter().flatten().copied().collect(),
            None => vec![f64::NAN; 3 * a.leg_names.len()],
        };
        push_row(&mut joints, dense.time(i), q.arm_q.iter().copied().chain(legs));
    }
    write_file(out_dir, "joints.csv", &joints)?;

    for (k, snap) in a.regions.iter().enumerate() {
        let mut csv = Vec::new();
        match &snap.region {
            Some(r) => r.write_csv(&mut csv).expect("writing to memory"),
            None => csv.extend_from_slice(b"x,y\n"),
        }
        write_file(out_dir, &format!("region_{k}.csv"), std::str::from_utf8(&csv).expect("ASCII CSV"))?;
    }

    let mut solver = serde_json::to_value(&a.report).expect("report serializes");
    solver.as_object_mut().expect("struct serializes to an object").remove("wall_time_s");
    let solve_time_s = record_timing.then_some(a.report.wall_time_s);
    let report = ReportJson {
        scenario: &a.scenario,
        mode: a.mode,
        seed: a.seed,
        n_slices: a.planned.n(),
        eps_star: a.eps_star,
        eps_lower: a.eps_lower,
        dense_samples: dense.len(),
        rate_hz: dense.rate_hz,
        min_oracle_margin: a.min_oracle_margin(),
        min_surrogate_margin: a.min_surrogate_margin(),
        max_oracle_surrogate_gap: a.max_surrogate_gap(),
        infeasible_samples: a.infeasible_samples,
        target_residuals: &a.target_residuals,
        solver,
        solve_time_s,
        reference_solve_time_ms: &a.reference_solve_time_ms,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(out_dir, "report.json", &json)
}
