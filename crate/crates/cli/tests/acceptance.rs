//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any asserted criterion fails.
//!
//! Run with `cargo test -p reachplan-cli --test acceptance`. Criterion 2 trains a surrogate on
//! 1e5 samples and takes several minutes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Isometry3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reachplan_core::collision::{epa_penetration, gjk_distance};
use reachplan_core::komo::features::{PositionBias, Residual, Smoothness};
use reachplan_core::komo::{solve, Feature, FeatureTerm, PathProblem, SolverError};
use reachplan_core::reachability::{compute_region, edge_distance, margin_oracle, EdgeLine, ReachabilityError};
use reachplan_core::scenario::{load_scenario, load_surrogate, run};
use reachplan_core::surrogate::{margin_gradient_wrt_config, sample_dataset, sample_query, train};
use reachplan_core::{
    Configuration, ConvexShape, KinematicModel, MlpModel, Mode, Primitive, RegionParams, RegionQuery, RobotConfig, RunArtifacts, SolverParams,
    TrainConfig, Trajectory,
};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn robot() -> (RobotConfig, KinematicModel) {
    let cfg = RobotConfig::load(&repo().join("scenarios/robot.toml")).unwrap();
    let kin = KinematicModel::from_config(&cfg).unwrap();
    (cfg, kin)
}

fn shipped_model() -> MlpModel {
    MlpModel::load(&repo().join("models/quadruped_arm.rakm")).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_fidelity() -> Outcome {
    let (cfg, kin) = robot();
    let net = shipped_model();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (q, feet) = sample_query(&kin, &cfg.sampling, &mut rng);
        let g = margin_gradient_wrt_config(&net, &kin, &q, &feet).unwrap();
        let x = q.to_vector();
        let margin_at =
            |v: &DVector<f64>| net.infer(&RegionQuery::from_configuration(&Configuration::from_slice(v.as_slice()), &feet).to_input()).unwrap();
        let fd = DVector::from_fn(6, |k, _| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[k] += h;
            m[k] -= h;
            (margin_at(&p) - margin_at(&m)) / (2.0 * h)
        });
        let analytic = DVector::from_fn(6, |k, _| g[k]);
        worst = worst.max((analytic - &fd).norm() / fd.norm().max(1e-8));
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 100 stances (bound 1e-4)"))
}

fn surrogate_fidelity() -> Outcome {
    let (cfg, kin) = robot();
    let tc = TrainConfig { seed: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    let data = sample_dataset(&kin, &tc, &cfg.sampling, &RegionParams::default()).unwrap();
    let (net, report) = train(&data, &tc, &cfg.sampling).unwrap();
    let minutes = t0.elapsed().as_secs_f64() / 60.0;

    // Fresh stances, labelled independently of the training split.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut sse, mut n) = (0.0, 0usize);
    while n < 2000 {
        let (q, feet) = sample_query(&kin, &cfg.sampling, &mut rng);
        let Ok(truth) = margin_oracle(&kin, &RegionQuery::from_configuration(&q, &feet), &RegionParams::default()) else { continue };
        sse += (net.margin(&q, &feet).unwrap() - truth).powi(2);
        n += 1;
    }
    let fresh = (sse / n as f64).sqrt();
    outcome(
        report.val_rmse < 0.01 && fresh < 0.01,
        format!(
            "{} samples, held-out rmse {:.5} m on {} samples, rmse {fresh:.5} m on {n} fresh stances (bound 0.01), {minutes:.1} min",
            tc.sample_count, report.val_rmse, report.val_samples
        ),
    )
}

/// Distance from the base to the boundary of a star-shaped region: its smallest ray radius.
fn dense_ray_margin(kin: &KinematicModel, query: &RegionQuery) -> f64 {
    let dense = RegionParams::with_rays(2000);
    compute_region(kin, query, &dense).unwrap().vertices.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min)
}

fn oracle_correctness() -> Outcome {
    let (cfg, kin) = robot();
    let nominal = RegionQuery::from_configuration(
        &Configuration::new(Vector3::new(0.0, 0.0, kin.stance.height), Vector3::zeros(), DVector::zeros(kin.n_arm())),
        &kin.stance.feet,
    );
    let nominal_error = (margin_oracle(&kin, &nominal, &RegionParams::default()).unwrap() - dense_ray_margin(&kin, &nominal)).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_margin, mut worst_line, mut n, mut within, mut above) = (0.0f64, 0.0f64, 0, 0, 0);
    while n < 50 {
        let (q, feet) = sample_query(&kin, &cfg.sampling, &mut rng);
        let query = RegionQuery::from_configuration(&q, &feet);
        let region = match compute_region(&kin, &query, &RegionParams::default()) {
            Ok(r) => r,
            Err(ReachabilityError::StartOutsideRegion(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        let m = margin_oracle(&kin, &query, &RegionParams::default()).unwrap();
        let brute = dense_ray_margin(&kin, &query);
        worst_margin = worst_margin.max((m - brute).abs());
        within += usize::from((m - brute).abs() < 2e-3);
        above += usize::from(m > brute + 2e-3);

        let o = Vector2::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
        for (p, r) in region.edges().filter(|(p, r)| (p - r).norm() > 1e-9) {
            let d = r - p;
            let w = o - p;
            let closed = (d.x * w.y - d.y * w.x).abs() / d.norm();
            worst_line = worst_line.max((edge_distance(&EdgeLine::through(&p, &r), &o).unwrap() - closed).abs());
        }
        n += 1;
    }
    // Infinite edge lines of a non-convex region can pass closer to the base than the boundary
    // itself, so misses show up as margins below the dense boundary distance.
    outcome(
        worst_margin < 2e-3 && worst_line < 1e-9,
        format!(
            "{within}/50 random stances within 2e-3 of the 2000-ray boundary distance (max deviation {worst_margin:.2e} m, {above} above it), \
             nominal stance {nominal_error:.1e} m, max edge-distance error {worst_line:.1e} (bound 1e-9)"
        ),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rng.gen_range(-3.1..3.1), rng.gen_range(-1.5..1.5), rng.gen_range(-3.1..3.1))
}

fn random_vec(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

/// Smallest translation separating `a` and `b`: min over unit `d` of h_a(d) + h_b(-d),
/// from a dense Fibonacci sphere whose best directions are refined by a shrinking pattern search.
fn sampled_depth(a: &ConvexShape, b: &ConvexShape) -> f64 {
    let depth = |d: &Vector3<f64>| a.support(d).unwrap().dot(d) - b.support(&-d).unwrap().dot(d);
    let n = 100_000;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut samples: Vec<(f64, Vector3<f64>)> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let d = Vector3::new(r * (golden * i as f64).cos(), r * (golden * i as f64).sin(), z);
            (depth(&d), d)
        })
        .collect();
    samples.sort_by(|x, y| x.0.total_cmp(&y.0));
    let refine = |(mut best_depth, mut best): (f64, Vector3<f64>)| {
        let mut step = 0.05;
        while step > 1e-10 {
            let t1 = best.cross(&if best.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
            let t2 = best.cross(&t1);
            let mut improved = false;
            for k in 0..32 {
                let phi = std::f64::consts::TAU * k as f64 / 32.0;
                let d = (best + (t1 * phi.cos() + t2 * phi.sin()) * step).normalize();
                let v = depth(&d);
                if v < best_depth {
                    best_depth = v;
                    best = d;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best_depth
    };
    samples.iter().take(16).map(|s| refine(*s)).fold(f64::INFINITY, f64::min)
}

fn collision_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_gjk = 0.0f64;
    let mut poses = 0;
    while poses < 1000 {
        let (ra, rb) = (rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5));
        let (ca, cb) = (random_vec(&mut rng, -1.0, 1.0), random_vec(&mut rng, -1.0, 1.0));
        let analytic = (ca - cb).norm() - ra - rb;
        if analytic <= 1e-6 {
            continue;
        }
        let d = gjk_distance(&ConvexShape::sphere(ra, ca), &ConvexShape::sphere(rb, cb)).unwrap().distance;
        worst_gjk = worst_gjk.max((d - analytic).abs());

        let half = random_vec(&mut rng, 0.05, 0.5);
        let pose = Isometry3::from_parts(Translation3::from(random_vec(&mut rng, -0.5, 0.5)), random_rotation(&mut rng));
        let local = pose.inverse_transform_point(&ca.into()).coords;
        let clamped = local.zip_map(&half, |c, h| c.clamp(-h, h));
        let analytic = (local - clamped).norm() - ra;
        if analytic <= 1e-6 {
            continue;
        }
        let d = gjk_distance(&ConvexShape::sphere(ra, ca), &ConvexShape::cuboid(half, pose)).unwrap().distance;
        worst_gjk = worst_gjk.max((d - analytic).abs());
        poses += 1;
    }

    let mut worst_epa = 0.0f64;
    let mut pairs = 0;
    while pairs < 100 {
        let pose = |rng: &mut ChaCha8Rng| Isometry3::from_parts(Translation3::from(random_vec(rng, -0.15, 0.15)), random_rotation(rng));
        let a = ConvexShape::cuboid(random_vec(&mut rng, 0.05, 0.3), pose(&mut rng));
        let b = match pairs % 3 {
            0 => ConvexShape::cuboid(random_vec(&mut rng, 0.05, 0.3), pose(&mut rng)),
            1 => {
                ConvexShape::new(Primitive::Capsule { radius: rng.gen_range(0.03..0.15), half_length: rng.gen_range(0.05..0.3) }, 0.0, pose(&mut rng))
            }
            _ => {
                ConvexShape::new(Primitive::ConvexHull { vertices: (0..10).map(|_| random_vec(&mut rng, -0.2, 0.2)).collect() }, 0.0, pose(&mut rng))
            }
        };
        let Ok(r) = epa_penetration(&a, &b) else { continue };
        let depth = -r.distance;
        worst_epa = worst_epa.max((depth - sampled_depth(&a, &b)).abs());
        pairs += 1;
    }
    outcome(
        worst_gjk < 1e-9 && worst_epa < 1e-3,
        format!("GJK max error {worst_gjk:.1e} over 1000 sphere-sphere and sphere-box poses (bound 1e-9), EPA max error {worst_epa:.1e} on 100 pairs (bound 1e-3)"),
    )
}

/// `|q_xy|² - 1 = 0`.
#[derive(Debug)]
struct UnitCircle;

impl Feature for UnitCircle {
    fn name(&self) -> &str {
        "unit_circle"
    }
    fn order(&self) -> usize {
        0
    }
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, w: &[DVector<f64>]) -> Result<Residual, SolverError> {
        let q = &w[0];
        let mut j = DMatrix::zeros(1, q.len());
        j[(0, 0)] = 2.0 * q[0];
        j[(0, 1)] = 2.0 * q[1];
        Ok((DVector::from_element(1, q[0] * q[0] + q[1] * q[1] - 1.0), j))
    }
}

fn solver_correctness(scenario_runs: &[(String, RunArtifacts)]) -> Outcome {
    let dim = 6;
    let n = 8;
    let w = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0, 3.0, 1.0]);
    let reference = DVector::from_vec(vec![1.0, -0.5, 0.3, 0.1, -0.2, 0.4]);
    let problem = PathProblem {
        dim,
        n_slices: n,
        terms: vec![
            FeatureTerm::cost(Arc::new(PositionBias::new(reference.clone(), &w)), (1..=n).collect(), 1.0),
            FeatureTerm::cost(Arc::new(Smoothness { dim }), (2..=n).collect(), 10.0),
        ],
    };
    // Stacked least squares over q_1..q_n with q_0 = 0 held fixed.
    let rows = n * dim + (n - 1) * dim;
    let mut a = DMatrix::zeros(rows, n * dim);
    let mut b = DVector::zeros(rows);
    for t in 0..n {
        for i in 0..dim {
            let s = w[i].sqrt();
            a[(t * dim + i, t * dim + i)] = s;
            b[t * dim + i] = s * reference[i];
        }
    }
    let s = 10f64.sqrt();
    for t in 2..=n {
        for i in 0..dim {
            let row = n * dim + (t - 2) * dim + i;
            for (slice, c) in [(t, 1.0), (t - 1, -2.0), (t - 2, 1.0)] {
                if slice > 0 {
                    a[(row, (slice - 1) * dim + i)] = s * c;
                }
            }
        }
    }
    let optimum = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * b));
    let q0 = Configuration::from_slice(&[0.0; 6]);
    let one_step = SolverParams { max_outer: 1, max_inner: 1, ..SolverParams::default() };
    let (traj, report) = solve(&Trajectory::constant(&q0, n), &problem, &one_step).unwrap();
    let mut systems = report.systems_assembled;
    let gn_error = (1..=n).map(|t| (traj.configs[t].to_vector() - optimum.rows((t - 1) * dim, dim)).amax()).fold(0.0, f64::max);

    let p = DVector::from_vec(vec![2.0, 1.0, 0.3, 0.0, 0.0, 0.0]);
    let toy = PathProblem {
        dim,
        n_slices: 1,
        terms: vec![
            FeatureTerm::cost(Arc::new(PositionBias::new(p, &DVector::from_element(dim, 1.0))), vec![1], 1.0),
            FeatureTerm::eq(Arc::new(UnitCircle), vec![1]),
        ],
    };
    let mut init = Trajectory::constant(&q0, 1);
    init.configs[1] = Configuration::from_slice(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    let (traj, report) = solve(&init, &toy, &SolverParams::default()).unwrap();
    systems += report.systems_assembled;
    let q = traj.configs[1].to_vector();
    let h = (q[0] * q[0] + q[1] * q[1] - 1.0).abs();

    // Assembly rejects any Jacobian entry outside the band, so every completed solve passed the check.
    let mut banded = report.bandwidth == dim - 1;
    for (_, a) in scenario_runs {
        systems += a.report.systems_assembled;
        banded &= a.report.bandwidth == 3 * 12 - 1;
    }
    outcome(
        gn_error < 1e-7 && h < 1e-4 && banded,
        format!(
            "one-step error {gn_error:.1e} (bound 1e-7), toy |h| {h:.1e} (bound 1e-4), {systems} banded systems assembled without a band violation"
        ),
    )
}

fn run_scenario(name: &str, mode: Mode) -> RunArtifacts {
    let mut scenario = load_scenario(&repo().join(format!("scenarios/{name}.toml"))).unwrap();
    scenario.file.mode = mode;
    let net = load_surrogate(&scenario, None).unwrap().map(Arc::new);
    let a = run(&scenario, net).unwrap();
    assert_eq!(a.dense.configs[0], scenario.initial_configuration(), "{name} {mode}: first dense sample is not q0");
    a
}

fn scenario_reproduction(runs: &BTreeMap<(String, Mode), RunArtifacts>) -> Outcome {
    let get = |s: &str, m: Mode| &runs[&(s.to_string(), m)];
    let (lb, lr) = (get("low_grasp", Mode::Baseline), get("low_grasp", Mode::Rakomo));
    let (sb, sr) = (get("shelf_pick_place", Mode::Baseline), get("shelf_pick_place", Mode::Rakomo));
    let floor = |a: &RunArtifacts| a.eps_lower - 0.01;
    let low_ok = lr.min_oracle_margin() >= lb.min_oracle_margin() + 0.02 && lr.min_oracle_margin() >= floor(lr);
    let shelf_ok = sr.min_oracle_margin() >= floor(sr) && sb.max_target_residual() < 1e-3 && sr.max_target_residual() < 1e-3;
    let converged = [lb, lr, sb, sr].iter().all(|a| a.report.converged);
    outcome(
        low_ok && shelf_ok && converged,
        format!(
            "low_grasp min margin {:.4} (baseline {:.4}), shelf_pick_place min margin {:.4} (floor {:.2}), residuals {:.1e} / {:.1e}, all converged: {converged}",
            lr.min_oracle_margin(),
            lb.min_oracle_margin(),
            sr.min_oracle_margin(),
            floor(sr),
            sb.max_target_residual(),
            sr.max_target_residual()
        ),
    )
}

fn surrogate_agreement(runs: &BTreeMap<(String, Mode), RunArtifacts>) -> Outcome {
    let gaps: Vec<String> =
        runs.iter().filter(|((_, m), _)| *m == Mode::Rakomo).map(|((s, _), a)| format!("{s} {:.4}", a.max_surrogate_gap().unwrap())).collect();
    let pass = runs.iter().filter(|((_, m), _)| *m == Mode::Rakomo).all(|(_, a)| a.max_surrogate_gap().unwrap() <= 0.02);
    outcome(pass, format!("max |oracle - surrogate| along dense trajectories: {} (bound 0.02)", gaps.join(", ")))
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut failures = Vec::new();
    for name in ["low_grasp", "shelf_pick_place"] {
        for mode in ["baseline", "rakomo"] {
            let dirs: Vec<PathBuf> = (0..2).map(|k| tmp.path().join(format!("{name}-{mode}-{k}"))).collect();
            for d in &dirs {
                let status = Command::new(env!("CARGO_BIN_EXE_reachplan"))
                    .arg("plan")
                    .arg(repo().join(format!("scenarios/{name}.toml")))
                    .args(["--mode", mode, "--seed", "0", "--out"])
                    .arg(d)
                    .output()
                    .unwrap()
                    .status;
                assert_eq!(status.code(), Some(0), "plan {name} --mode {mode}");
            }
            if dir_contents(&dirs[0]) == dir_contents(&dirs[1]) {
                identical += 1;
            } else {
                failures.push(format!("{name}/{mode}"));
            }
        }
    }
    outcome(failures.is_empty(), format!("{identical}/4 plan run pairs byte-identical {failures:?}"))
}

fn timing(runs: &BTreeMap<(String, Mode), RunArtifacts>) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["low_grasp", "shelf_pick_place"] {
        let b = runs[&(name.to_string(), Mode::Baseline)].report.wall_time_s;
        let r = runs[&(name.to_string(), Mode::Rakomo)].report.wall_time_s;
        pass &= r <= 5.0 * b;
        parts.push(format!("{name} {:.0} ms / {:.0} ms = {:.1}x", r * 1e3, b * 1e3, r / b));
    }
    outcome(pass, format!("rakomo / baseline solve time: {} (target 5x)", parts.join(", ")))
}

fn main() {
    let mut failed = 0;
    let mut line = |id: &str, asserted: bool, o: Outcome| {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if asserted { "" } else { " [reported, not asserted]" };
        println!("{id}: {verdict} {}{note}", o.detail);
        if asserted && !o.pass {
            failed += 1;
        }
    };

    line("criterion 1 (gradient fidelity)", true, gradient_fidelity());
    line("criterion 3 (oracle correctness)", true, oracle_correctness());
    line("criterion 4 (collision correctness)", true, collision_correctness());

    let mut runs = BTreeMap::new();
    for name in ["low_grasp", "shelf_pick_place"] {
        for mode in [Mode::Baseline, Mode::Rakomo] {
            runs.insert((name.to_string(), mode), run_scenario(name, mode));
        }
    }
    let flat: Vec<(String, RunArtifacts)> = runs.iter().map(|((s, _), a)| (s.clone(), a.clone())).collect();
    line("criterion 5 (solver correctness)", true, solver_correctness(&flat));
    line("criterion 6 (scenario reproduction)", true, scenario_reproduction(&runs));
    line("invariant (surrogate agrees with oracle in rakomo mode)", true, surrogate_agreement(&runs));
    line("criterion 7 (determinism)", true, determinism());
    line("criterion 8 (timing)", false, timing(&runs));
    line("criterion 2 (surrogate fidelity)", true, surrogate_fidelity());

    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
