use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::*;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

const MINIMAL: &str = r#"
schema_version = 1
name = "reach"
robot = "robot.toml"
mode = "baseline"

[planner]
n_slices = 4

[initial]
base_pos = [0.0, 0.0, 0.55]
arm_q = [0.0, 0.3, 1.5, 0.0, 0.8, 0.0]

[[targets]]
slice = 4
position = [0.8, 0.1, 0.7]
"#;

fn parse(text: &str) -> Result<Scenario, Error> {
    Scenario::from_toml_str(text, "inline.toml", &scenarios_dir())
}

fn config_message(text: &str) -> String {
    match parse(text) {
        Err(Error::Config { message, .. }) => message,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn shipped_low_grasp_loads_in_rakomo_mode() {
    let s = load_scenario(&scenarios_dir().join("low_grasp.toml")).unwrap();
    assert_eq!(s.mode(), Mode::Rakomo);
    assert_eq!(s.file.planner.n_slices, 15);
    assert_eq!(s.file.planner.eps_star, 0.15);
    assert_eq!(s.file.planner.eps_lower, 0.05);
    assert_eq!(s.file.weights.arm_bias * 10.0, s.file.weights.base_bias);
    assert_eq!(s.feet_world().len(), 4);
}

#[test]
fn shipped_shelf_scenario_has_pick_and_place_targets() {
    let s = load_scenario(&scenarios_dir().join("shelf_pick_place.toml")).unwrap();
    assert!(s.file.targets.iter().any(|t| t.grasp.is_some()));
    assert!(s.file.targets.iter().any(|t| t.release.is_some()));
}

#[test]
fn minimal_scenario_uses_defaults() {
    let s = parse(MINIMAL).unwrap();
    assert_eq!(s.mode(), Mode::Baseline);
    assert_eq!(s.file.interpolation.rate_hz, 250.0);
    assert_eq!(s.file.planner.eps_star, 0.15);
    assert_eq!(s.initial_configuration().dim(), 12);
}

#[test]
fn eps_lower_not_below_eps_star_is_rejected() {
    let text = MINIMAL.replace("n_slices = 4", "n_slices = 4\neps_star = 0.1\neps_lower = 0.1");
    assert!(config_message(&text).contains("eps_lower"));
}

#[test]
fn unknown_field_is_rejected_with_its_name() {
    let text = MINIMAL.replace("n_slices = 4", "n_slices = 4\nhorizon = 3");
    assert!(config_message(&text).contains("horizon"));
}

#[test]
fn invalid_target_slices_and_links_are_located() {
    let text = MINIMAL.replace("slice = 4", "slice = 9");
    assert!(config_message(&text).contains("targets[0].slice"));
    let text = MINIMAL.replace("slice = 4", "slice = 4\nlink = \"tail\"");
    assert!(config_message(&text).contains("targets[0].link"));
    let text = MINIMAL.replace("position = [0.8, 0.1, 0.7]", "position = [9.0, 0.0, 0.7]");
    assert!(config_message(&text).contains("targets[0]"));
}

#[test]
fn schema_and_shape_errors_are_reported() {
    assert!(config_message(&MINIMAL.replace("schema_version = 1", "schema_version = 7")).contains("schema_version"));
    assert!(config_message(&MINIMAL.replace("n_slices = 4", "n_slices = 1")).contains("n_slices"));
    assert!(config_message(&MINIMAL.replace("arm_q = [0.0, 0.3, 1.5, 0.0, 0.8, 0.0]", "arm_q = [0.0]")).contains("arm_q"));
    let pitched = MINIMAL.replace("base_pos = [0.0, 0.0, 0.55]", "base_pos = [0.0, 0.0, 0.55]\nbase_euler = [0.0, 1.5707, 0.0]");
    assert!(config_message(&pitched).contains("base_euler"));
}

#[test]
fn release_without_grasp_is_rejected() {
    let text = format!(
        "{MINIMAL}\n[[objects]]\nname = \"can\"\nshape = {{ kind = \"sphere\", radius = 0.03 }}\n\n[[targets]]\nslice = 2\nposition = [0.7, 0.0, 0.7]\nrelease = \"can\"\n"
    );
    assert!(config_message(&text).contains("released"));
}

#[test]
fn feet_default_to_nominal_stance_under_the_initial_base() {
    let text = MINIMAL.replace("base_pos = [0.0, 0.0, 0.55]", "base_pos = [1.0, 2.0, 0.55]\nbase_euler = [0.0, 0.0, 1.5707963267948966]");
    let s = parse(&text).unwrap();
    let feet = s.feet_world();
    // Nominal left-front foot (0.44, 0.24) rotated a quarter turn and shifted.
    assert!((feet[0].x - (1.0 - 0.24)).abs() < 1e-12 && (feet[0].y - (2.0 + 0.44)).abs() < 1e-12);
    assert_eq!(feet[0].z, 0.0);
}

#[test]
fn missing_robot_file_is_an_io_error_with_path() {
    let text = MINIMAL.replace("robot = \"robot.toml\"", "robot = \"nowhere.toml\"");
    let err = parse(&text).unwrap_err().to_string();
    assert!(err.contains("nowhere.toml"), "{err}");
}

fn minimal_run() -> RunArtifacts {
    run(&parse(MINIMAL).unwrap(), None).unwrap()
}

#[test]
fn run_starts_at_the_initial_configuration_and_ends_at_the_last_waypoint() {
    let s = parse(MINIMAL).unwrap();
    let a = minimal_run();
    assert_eq!(a.dense.configs[0], s.initial_configuration());
    assert_eq!(a.dense.configs.last(), a.planned.configs.last());
    assert_eq!(a.oracle_margin.len(), a.dense.len());
    assert!(a.surrogate_margin.is_none());
    assert!(a.max_target_residual() < 1e-3, "{:?}", a.target_residuals);
    assert_eq!(a.regions.len(), 3);
    assert_eq!(a.regions[0].sample, 0);
    assert_eq!(a.regions[2].sample, a.dense.len() - 1);
}

#[test]
fn exported_files_have_one_row_per_dense_sample_and_are_idempotent() {
    let a = minimal_run();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    export(&a, d1.path(), false).unwrap();
    export(&a, d2.path(), false).unwrap();
    let read = |d: &Path, f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    for f in ["trajectory.csv", "waypoints.csv", "margin.csv", "joints.csv", "report.json", "region_0.csv", "region_1.csv", "region_2.csv"] {
        assert_eq!(read(d1.path(), f), read(d2.path(), f), "{f}");
    }
    let margin = read(d1.path(), "margin.csv");
    assert_eq!(margin.lines().count(), a.dense.len() + 1);
    assert_eq!(margin.lines().next().unwrap(), "time,oracle,surrogate");
    let traj = read(d1.path(), "trajectory.csv");
    assert_eq!(traj.lines().count(), a.dense.len() + 1);
    assert!(traj.lines().next().unwrap().starts_with("time,base_x,base_y,base_z,roll,pitch,yaw,shoulder_yaw"));
    let joints = read(d1.path(), "joints.csv");
    assert!(joints.lines().next().unwrap().ends_with("rh_haa,rh_hfe,rh_kfe"));
    assert_eq!(read(d1.path(), "waypoints.csv").lines().count(), 5 + 1);
}

#[test]
fn report_json_parses_and_omits_wall_time_unless_requested() {
    let a = minimal_run();
    let d = tempfile::tempdir().unwrap();
    export(&a, d.path(), false).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(v["scenario"], "reach");
    assert_eq!(v["mode"], "baseline");
    assert_eq!(v["dense_samples"], a.dense.len());
    assert!(v.get("solve_time_s").is_none());
    assert!(v["solver"].get("wall_time_s").is_none());
    assert!(v["solver"]["converged"].is_boolean());

    export(&a, d.path(), true).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert!(v["solve_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn export_to_an_unwritable_path_names_the_path() {
    let a = minimal_run();
    let d = tempfile::tempdir().unwrap();
    let blocker = d.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = export(&a, &blocker.join("sub"), false).unwrap_err().to_string();
    assert!(err.contains("file"), "{err}");
}

#[test]
fn dense_velocities_respect_the_configured_limits() {
    let s = parse(MINIMAL).unwrap();
    let a = minimal_run();
    let v = s.file.interpolation.v_max(6);
    let dt = 1.0 / a.dense.rate_hz;
    for w in a.dense.configs.windows(2) {
        let dq: DVector<f64> = w[1].to_vector() - w[0].to_vector();
        for i in 0..dq.len() {
            assert!(dq[i].abs() / dt <= v[i] * (1.0 + 1e-9), "dimension {i}");
        }
    }
}
