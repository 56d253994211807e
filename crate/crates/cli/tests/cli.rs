use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reachplan"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn robot() -> PathBuf {
    repo().join("scenarios/robot.toml")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
schema_version = 1
name = "cli_reach"
robot = "{}"
mode = "baseline"

[planner]
n_slices = 5

[initial]
base_pos = [0.0, 0.0, 0.55]
arm_q = [0.0, 0.3, 1.5, 0.0, 0.8, 0.0]

[[targets]]
slice = 5
position = [0.85, 0.1, 0.6]
{extra}
"#,
        robot().display()
    );
    let path = dir.join("scenario.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_small(dir: &Path) -> PathBuf {
    let model = dir.join("small.rakm");
    let o = bin()
        .args(["train-surrogate", robot().to_str().unwrap(), "--samples", "400", "--epochs", "2", "--seed", "3", "--out"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("held-out rmse"));
    model
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn region_dumps_a_csv_polygon() {
    let o = bin().args(["region", robot().to_str().unwrap()]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("x,y"));
    assert_eq!(lines.count(), 32);
}

#[test]
fn region_accepts_a_pose_and_writes_a_file() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("r.csv");
    let o = bin()
        .args(["region", robot().to_str().unwrap(), "--pose", "0.1", "-0.05", "0.55", "0.0", "0.05", "0.1", "--rays", "16", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 17);
    // World frame: the polygon surrounds the shifted base.
    let xs: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(xs.iter().any(|x| *x > 0.1) && xs.iter().any(|x| *x < 0.1));
}

#[test]
fn region_outside_the_reachable_set_fails_with_exit_1() {
    let o = bin().args(["region", robot().to_str().unwrap(), "--pose", "0", "0", "2.0", "0", "0", "0"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("outside"));
}

#[test]
fn plan_baseline_is_byte_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let s = scenario(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = bin().arg("plan").arg(&s).arg("--out").arg(out).args(["--seed", "5"]).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let (fa, fb) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(fa.len(), 8);
    assert_eq!(fa, fb);
}

#[test]
fn plan_rakomo_with_a_model_file_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let model = train_small(d.path());
    let s = scenario(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = bin().arg("plan").arg(&s).args(["--mode", "rakomo", "--model"]).arg(&model).arg("--out").arg(out).output().unwrap();
        assert!(matches!(o.status.code(), Some(0) | Some(2)), "{}", stderr(&o));
    }
    assert_eq!(dir_contents(&a), dir_contents(&b));
    let report = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert!(report.contains("\"mode\": \"rakomo\""));
    assert!(!report.contains("solve_time_s"));
}

#[test]
fn record_timing_adds_the_solve_time() {
    let d = tempfile::tempdir().unwrap();
    let s = scenario(d.path(), "");
    let out = d.path().join("t");
    let o = bin().arg("plan").arg(&s).arg("--out").arg(&out).arg("--record-timing").output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(out.join("report.json")).unwrap().contains("solve_time_s"));
}

#[test]
fn rakomo_without_a_model_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    let s = scenario(d.path(), "");
    let o = bin().arg("plan").arg(&s).args(["--mode", "rakomo", "--out"]).arg(d.path().join("o")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("surrogate"));
}

#[test]
fn solver_non_convergence_exits_with_2_and_still_writes_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let s = scenario(d.path(), "\n[solver]\nmax_outer = 1\nmax_inner = 1\n");
    let out = d.path().join("o");
    let o = bin().arg("plan").arg(&s).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out.join("report.json").exists());
}

#[test]
fn missing_and_invalid_inputs_exit_with_1() {
    let o = bin().args(["plan", "/no/such/scenario.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/scenario.toml"));

    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.rakm");
    std::fs::write(&bad, b"not a model").unwrap();
    let o = bin().arg("eval-surrogate").arg(&bad).arg(robot()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.rakm"));
}

#[test]
fn eval_surrogate_reports_rmse() {
    let d = tempfile::tempdir().unwrap();
    let model = train_small(d.path());
    let o = bin().arg("eval-surrogate").arg(&model).arg(robot()).args(["--points", "50"]).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("points 50"));
}
