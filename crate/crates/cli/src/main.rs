use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reachplan_core::reachability::{margin_oracle, ReachabilityError};
use reachplan_core::scenario::{export, load_scenario, load_surrogate, run, world_region};
use reachplan_core::surrogate::{sample_dataset, sample_query, train};
use reachplan_core::{Configuration, KinematicModel, MlpModel, Mode, RegionParams, RegionQuery, RobotConfig, TrainConfig};

/// Reachability-aware whole-body planning for a legged manipulator.
#[derive(Debug, Parser)]
#[command(name = "reachplan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan a scenario and write the artifact directory.
    Plan {
        scenario: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        /// Artifact directory (default: out/<scenario>-<mode>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Surrogate model file, overriding the scenario's.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Include the measured solve time in report.json (makes runs non-reproducible).
        #[arg(long)]
        record_timing: bool,
    },
    /// Label a dataset with the margin oracle and fit the surrogate.
    TrainSurrogate {
        robot: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "surrogate.rakm")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Use the full-size 5e6-sample dataset (hours on one core).
        #[arg(long)]
        full_scale: bool,
    },
    /// Compare a surrogate with the oracle on fresh random stances.
    EvalSurrogate {
        model: PathBuf,
        robot: PathBuf,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Dump the reachable region of a base pose as world-frame CSV.
    Region {
        robot: PathBuf,
        /// Base pose: x y z roll pitch yaw (default: nominal stance).
        #[arg(long, num_args = 6, allow_negative_numbers = true, value_names = ["X", "Y", "Z", "ROLL", "PITCH", "YAW"])]
        pose: Option<Vec<f64>>,
        #[arg(long, default_value_t = 32)]
        rays: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_model(robot: &Path) -> Result<(RobotConfig, KinematicModel)> {
    let cfg = RobotConfig::load(robot)?;
    let model = KinematicModel::from_config(&cfg).with_context(|| format!("{}: invalid robot", robot.display()))?;
    Ok((cfg, model))
}

fn plan(path: &Path, mode: Option<Mode>, out: Option<PathBuf>, seed: Option<u64>, model: Option<PathBuf>, record_timing: bool) -> Result<ExitCode> {
    let mut scenario = load_scenario(path)?;
    if let Some(m) = mode {
        scenario.file.mode = m;
    }
    if let Some(s) = seed {
        scenario.file.seed = s;
    }
    let surrogate = load_surrogate(&scenario, model.as_deref())?.map(Arc::new);
    if scenario.mode() == Mode::Rakomo && surrogate.is_none() {
        bail!("{}: rakomo mode needs a surrogate (pass --model or set [surrogate] in the scenario)", path.display());
    }
    let artifacts = run(&scenario, surrogate)?;
    let out = out.unwrap_or_else(|| PathBuf::from("out").join(format!("{}-{}", scenario.name(), scenario.mode())));
    export(&artifacts, &out, record_timing)?;

    let r = &artifacts.report;
    println!(
        "{} [{}]: min oracle margin {:.4} m, max target residual {:.2e} m, {} outer / {} inner iterations, {:.1} ms",
        artifacts.scenario,
        artifacts.mode,
        artifacts.min_oracle_margin(),
        artifacts.max_target_residual(),
        r.outer_iterations,
        r.inner_iterations,
        r.wall_time_s * 1e3
    );
    println!("artifacts written to {}", out.display());
    if !r.converged {
        eprintln!("solver did not converge: {}", r.flags.join(", "));
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn train_surrogate(robot: &Path, samples: Option<usize>, seed: u64, out: &Path, epochs: Option<usize>, full_scale: bool) -> Result<()> {
    let (cfg, model) = load_model(robot)?;
    let base = if full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
    let tc = TrainConfig { sample_count: samples.unwrap_or(base.sample_count), epochs: epochs.unwrap_or(base.epochs), seed, ..base };
    eprintln!("labelling {} samples", tc.sample_count);
    let data = sample_dataset(&model, &tc, &cfg.sampling, &RegionParams::default())?;
    eprintln!("training {:?} for {} epochs", tc.hidden, tc.epochs);
    let (net, report) = train(&data, &tc, &cfg.sampling)?;
    for e in &report.epochs {
        eprintln!("epoch {:3}: train rmse {:.5} m, val rmse {:.5} m", e.epoch, e.train_mse.sqrt(), e.val_mse.sqrt());
    }
    net.save(out)?;
    println!("held-out rmse {:.5} m over {} samples; model written to {}", report.val_rmse, report.val_samples, out.display());
    Ok(())
}

fn eval_surrogate(model_path: &Path, robot: &Path, points: usize, seed: u64) -> Result<()> {
    let net = MlpModel::load(model_path)?;
    let (cfg, model) = load_model(robot)?;
    let params = RegionParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sse, mut max_err, mut n, mut skipped) = (0.0, 0.0f64, 0usize, 0usize);
    while n < points {
        let (q, feet) = sample_query(&model, &cfg.sampling, &mut rng);
        let truth = match margin_oracle(&model, &RegionQuery::from_configuration(&q, &feet), &params) {
            Ok(m) => m,
            Err(ReachabilityError::StartOutsideRegion(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let err = net.margin(&q, &feet)? - truth;
        sse += err * err;
        max_err = max_err.max(err.abs());
        n += 1;
    }
    println!("points {n} (skipped {skipped} infeasible), rmse {:.5} m, max abs error {:.5} m", (sse / n as f64).sqrt(), max_err);
    Ok(())
}

fn region(robot: &Path, pose: Option<Vec<f64>>, rays: usize, out: Option<PathBuf>) -> Result<()> {
    let (_, model) = load_model(robot)?;
    let q = match pose {
        Some(p) => Configuration::new(Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], p[5]), DVector::zeros(model.n_arm())),
        None => Configuration::new(Vector3::new(0.0, 0.0, model.stance.height), Vector3::zeros(), DVector::zeros(model.n_arm())),
    };
    let params = RegionParams::with_rays(rays);
    let Some(region) = world_region(&model, &q, &model.stance.feet, &params)? else {
        bail!("the base pose lies outside its reachable region");
    };
    match out {
        Some(path) => {
            let file = std::fs::File::create(&path).with_context(|| format!("{}", path.display()))?;
            region.write_csv(std::io::BufWriter::new(file))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            region.write_csv(&mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan { scenario, mode, out, seed, model, record_timing } => plan(&scenario, mode, out, seed, model, record_timing),
        Command::TrainSurrogate { robot, samples, seed, out, epochs, full_scale } => {
            train_surrogate(&robot, samples, seed, &out, epochs, full_scale).map(|_| ExitCode::SUCCESS)
        }
        Command::EvalSurrogate { model, robot, points, seed } => eval_surrogate(&model, &robot, points, seed).map(|_| ExitCode::SUCCESS),
        Command::Region { robot, pose, rays, out } => region(&robot, pose, rays, out).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
