use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use viokit::align::{align, camera_to_imu};
use viokit::check::run_gates;
use viokit::config::Config;
use viokit::global::{optimize_graph, TransformStrategy};
use viokit::io::{self, GpsFormat, TransformFile};
use viokit::preint::{preint_batch_with_max_dt, samples_between, Mat15};
use viokit::sim::simulate;
use viokit::window::{run_estimator, score, InitMode, Status};
use viokit::{Error, FrameState, Pose};

/// Exit status contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exit {
    Verification = 1,
    Input = 2,
    Runtime = 3,
}

#[derive(Debug)]
struct Failure {
    exit: Exit,
    message: String,
}

impl Failure {
    fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self { exit, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::InvalidArgument(_) => Exit::Input,
            _ => Exit::Runtime,
        };
        Self::new(exit, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "viokit", version, about = "Visual-inertial estimation on synthetic or recorded data")]
struct Cli {
    /// JSON configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the seed of the selected command's config section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Writes the final window Hessian to this file (estimate only).
    #[arg(long, global = true)]
    dump_hessian: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Finite-difference check of every factor Jacobian block.
    CheckJacobians(CheckArgs),
    /// Preintegrate the IMU stream over a time interval.
    Preintegrate(PreintArgs),
    /// Visual-inertial alignment over the leading frames.
    InitAlign(AlignArgs),
    /// Run the sliding-window estimator.
    Estimate(EstimateArgs),
    /// Fuse a local trajectory with GPS fixes.
    FuseGlobal(FuseArgs),
    /// Summarize the outputs found in a run directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Random draws per block.
    #[arg(long)]
    trials: Option<usize>,
    /// Negates one analytic block before comparing.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct PreintArgs {
    /// Dataset directory holding imu.csv.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Start time, s; defaults to the first sample.
    #[arg(long)]
    from: Option<f64>,
    /// End time, s; defaults to the last sample.
    #[arg(long)]
    to: Option<f64>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Number of leading frames; overrides the config.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Align,
    GroundTruth,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Initialization source; overrides the config.
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GpsModeArg {
    Auto,
    Enu,
    Lla,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    AllNodes,
    LastNode,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long, default_value = "data/trajectory.csv")]
    trajectory: PathBuf,
    #[arg(long, default_value = "data/gps.csv")]
    gps: PathBuf,
    /// Column layout of the GPS file.
    #[arg(long, value_enum, default_value = "auto")]
    gps_mode: GpsModeArg,
    /// Overrides the config.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit as u8)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Simulate => cmd_simulate(cli, cfg),
        Command::CheckJacobians(a) => cmd_check(cli, cfg, a),
        Command::Preintegrate(a) => cmd_preintegrate(cli, cfg, a),
        Command::InitAlign(a) => cmd_init_align(cli, cfg, a),
        Command::Estimate(a) => cmd_estimate(cli, cfg, a),
        Command::FuseGlobal(a) => cmd_fuse(cli, cfg, a),
        Command::Report(a) => cmd_report(a),
    }
}

fn out_dir(cli: &Cli, fallback: &Path) -> Result<PathBuf, Failure> {
    let dir = cli.out.clone().unwrap_or_else(|| fallback.to_path_buf());
    std::fs::create_dir_all(&dir).map_err(|e| Failure::new(Exit::Input, format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &Value) -> CmdResult {
    io::write_json(path, value)?;
    Ok(())
}

fn rows(m: &Mat15) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn cmd_simulate(cli: &Cli, mut cfg: Config) -> CmdResult {
    if let Some(seed) = cli.seed {
        cfg.simulate.seed = seed;
    }
    let dir = out_dir(cli, Path::new("data"))?;
    let data = simulate(&cfg.simulate)?;
    let files = io::write_dataset(&dir, &data)?;
    println!(
        "simulated {:.1} s: {} IMU samples, {} frames, {} GPS fixes, path {:.3} m",
        cfg.simulate.trajectory.duration,
        data.imu.len(),
        data.frames.len(),
        data.gps.len(),
        data.path_length()
    );
    for f in files {
        println!("  {}", dir.join(f).display());
    }
    Ok(())
}

const JACOBIAN_REPORT_FILE: &str = "jacobian_check.json";

fn cmd_check(cli: &Cli, mut cfg: Config, args: &CheckArgs) -> CmdResult {
    if let Some(seed) = cli.seed {
        cfg.check.seed = seed;
    }
    if let Some(t) = args.trials {
        if t == 0 {
            return Err(Failure::new(Exit::Input, "--trials must be positive"));
        }
        cfg.check.trials = t;
    }
    let dir = out_dir(cli, Path::new("."))?;
    let report = run_gates(cfg.check.seed, cfg.check.trials, args.inject_fault.as_deref())?;
    println!("{:<34} {:>6} {:>12} {:>12} {:>10}  status", "block", "draws", "max abs err", "max rel err", "err/tol");
    for b in &report.blocks {
        println!(
            "{:<34} {:>6} {:>12.3e} {:>12.3e} {:>10.3e}  {}",
            b.block,
            b.draws,
            b.max_abs_err,
            b.max_rel_err,
            b.max_tol_ratio,
            if b.passed { "ok" } else { "FAIL" }
        );
    }
    io::write_json(&dir.join(JACOBIAN_REPORT_FILE), &report)?;
    if let Some(bad) = report.blocks.iter().find(|b| !b.passed) {
        let seed = bad.failing_seed.map_or_else(|| "?".to_string(), |s| s.to_string());
        return Err(Failure::new(Exit::Verification, format!("Jacobian block {} failed at draw seed {seed}", bad.block)));
    }
    println!("all {} blocks pass over {} draws", report.blocks.len(), report.trials);
    Ok(())
}

const PREINTEGRATION_FILE: &str = "preintegration.json";

fn cmd_preintegrate(cli: &Cli, cfg: Config, args: &PreintArgs) -> CmdResult {
    let imu = io::read_imu(&args.data.join(io::IMU_FILE))?;
    let (first, last) = match (imu.first(), imu.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Failure::new(Exit::Input, "imu.csv holds no samples")),
    };
    let t0 = args.from.unwrap_or(first);
    let t1 = args.to.unwrap_or(last);
    let samples = samples_between(&imu, t0, t1)?;
    let p = &cfg.preintegrate;
    let d = preint_batch_with_max_dt(&samples, p.accel_bias, p.gyro_bias, &p.noise, p.max_dt)?;
    let dir = out_dir(cli, &args.data)?;
    write_json(
        &dir.join(PREINTEGRATION_FILE),
        &json!({
            "t_start": t0,
            "t_end": t1,
            "samples": samples.len(),
            "dt": d.dt_total,
            "alpha": d.alpha,
            "beta": d.beta,
            "gamma": d.gamma,
            "accel_bias": d.lin_ba,
            "gyro_bias": d.lin_bg,
            "covariance": rows(&d.cov),
            "jacobian": rows(&d.jac),
        }),
    )?;
    println!("preintegrated {} samples over {:.6} s", samples.len(), d.dt_total);
    println!("  alpha {:?}", d.alpha.as_slice());
    println!("  beta  {:?}", d.beta.as_slice());
    println!("  gamma {:?}", d.gamma.to_array());
    Ok(())
}

fn cmd_init_align(cli: &Cli, mut cfg: Config, args: &AlignArgs) -> CmdResult {
    if let Some(n) = args.frames {
        cfg.align.frames = n;
        cfg.validate()?;
    }
    let imu = io::read_imu(&args.data.join(io::IMU_FILE))?;
    let sfm = io::read_sfm(&args.data.join(io::SFM_FILE))?;
    let ext = io::read_extrinsics(&args.data.join(io::EXTRINSICS_FILE))?;
    if sfm.len() < cfg.align.frames {
        return Err(Failure::new(
            Exit::Input,
            format!("sfm_poses.csv has {} frames, alignment needs {}", sfm.len(), cfg.align.frames),
        ));
    }
    let poses = &sfm[..cfg.align.frames];
    let a = &cfg.align;
    let deltas = poses
        .windows(2)
        .map(|w| {
            let s = samples_between(&imu, w[0].t, w[1].t)?;
            preint_batch_with_max_dt(&s, a.accel_bias, a.gyro_bias, &a.noise, cfg.preintegrate.max_dt)
        })
        .collect::<viokit::Result<Vec<_>>>()?;
    let body = camera_to_imu(poses, &ext);
    let result = align(&deltas, &body, &ext, a.gravity)?;
    let dir = out_dir(cli, &args.data)?;
    write_json(
        &dir.join(io::ALIGNMENT_FILE),
        &json!({
            "frame_ids": poses.iter().map(|p| p.frame_id).collect::<Vec<_>>(),
            "velocities": result.velocities,
            "gravity": result.gravity,
            "scale": result.scale,
            "condition": result.condition,
            "residual_norm": result.residual_norm,
            "converged": result.converged,
            "iterations": result.iterations,
        }),
    )?;
    println!(
        "aligned {} frames: scale {:.9}, |g| {:.9}, condition {:.3e}, converged {}",
        poses.len(),
        result.scale,
        result.gravity.norm(),
        result.condition,
        result.converged
    );
    if !result.converged {
        return Err(Failure::new(Exit::Runtime, "gravity refinement did not converge"));
    }
    Ok(())
}

fn cmd_estimate(cli: &Cli, mut cfg: Config, args: &EstimateArgs) -> CmdResult {
    match args.init {
        Some(InitArg::Align) => cfg.estimate.init = InitMode::Align,
        Some(InitArg::GroundTruth) => cfg.estimate.init = InitMode::GroundTruth,
        None => {}
    }
    let w = &cfg.estimate;
    let run = io::load_run(&args.data, w.init_accel_bias, w.init_gyro_bias)?;
    if w.init == InitMode::GroundTruth && run.truth.is_none() {
        return Err(Failure::new(Exit::Input, "ground-truth initialization needs groundtruth.csv"));
    }
    let dir = out_dir(cli, &args.data)?;
    let mut output = run_estimator(&run.input, &run.extrinsics, w, cli.dump_hessian.as_deref())?;
    if let Some(truth) = &run.truth {
        let states: Vec<(f64, FrameState)> = truth
            .iter()
            .map(|r| (r.t, FrameState { p: r.p, q: r.q, v: r.v, ..FrameState::default() }))
            .collect();
        score(&mut output, &states);
        // groundtruth.csv carries no biases
        output.report.final_gyro_bias_error = None;
    }
    io::write_trajectory(&dir.join(io::TRAJECTORY_FILE), &output.trajectory)?;
    io::write_json(&dir.join(io::REPORT_FILE), &output.report)?;
    let r = &output.report;
    println!(
        "{} frames, {} keyframes, {} optimizations, {} LM iterations",
        r.frames,
        r.keyframes,
        r.optimizations.len(),
        r.total_iterations
    );
    if let (Some(rmse), Some(len)) = (r.position_rmse, r.path_length) {
        println!("position RMSE {rmse:.6} m over a {len:.3} m path ({:.4}%)", 100.0 * rmse / len);
    }
    if let Some(p) = &cli.dump_hessian {
        println!("Hessian written to {}", p.display());
    }
    if r.status == Status::Uninitialized {
        return Err(Failure::new(Exit::Runtime, "estimator never initialized; see report.json for the deferral reasons"));
    }
    Ok(())
}

fn cmd_fuse(cli: &Cli, mut cfg: Config, args: &FuseArgs) -> CmdResult {
    match args.strategy {
        Some(StrategyArg::AllNodes) => cfg.global.strategy = TransformStrategy::AllNodes,
        Some(StrategyArg::LastNode) => cfg.global.strategy = TransformStrategy::LastNode,
        None => {}
    }
    let local: Vec<(f64, Pose)> = io::read_trajectory(&args.trajectory)?
        .into_iter()
        .map(|(t, s)| (t, Pose { rotation: s.q, translation: s.p }))
        .collect();
    let text = std::fs::read_to_string(&args.gps).map_err(|e| Failure::new(Exit::Input, format!("{}: {e}", args.gps.display())))?;
    if text.trim().is_empty() {
        return Err(Failure::new(Exit::Runtime, format!("{} is empty", args.gps.display())));
    }
    let format = match args.gps_mode {
        GpsModeArg::Auto => GpsFormat::Auto,
        GpsModeArg::Enu => GpsFormat::Enu,
        GpsModeArg::Lla => GpsFormat::Lla,
    };
    let (fixes, origin) = io::read_gps(&args.gps, format)?;
    if fixes.is_empty() {
        return Err(Failure::new(Exit::Runtime, format!("{} holds no fixes", args.gps.display())));
    }
    let result = optimize_graph(&local, &fixes, &cfg.global)?;
    let fallback = args.trajectory.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = out_dir(cli, &fallback)?;
    io::write_global_trajectory(&dir.join(io::GLOBAL_TRAJECTORY_FILE), &result.nodes)?;
    let transform = TransformFile {
        rotation: result.transform.rotation,
        translation: result.transform.translation,
        strategy: result.strategy,
    };
    io::write_json(&dir.join(io::TRANSFORM_FILE), &transform)?;
    println!(
        "{} nodes, {} fixes: {} associated, {} dropped (window {} s)",
        local.len(),
        fixes.len(),
        result.associated,
        result.dropped,
        cfg.global.association_window
    );
    if let Some(o) = origin {
        println!("ENU origin at lat {:.9}, lon {:.9}, alt {:.3}", o.lat, o.lon, o.alt);
    }
    println!(
        "cost {:.6e} -> {:.6e} in {} iterations ({:?})",
        result.initial_cost, result.final_cost, result.iterations, result.termination
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let dir = &args.data;
    if !dir.is_dir() {
        return Err(Failure::new(Exit::Input, format!("{} is not a directory", dir.display())));
    }
    let mut found = 0;
    let manifest = dir.join(io::MANIFEST_FILE);
    if manifest.exists() {
        let m: io::Manifest = io::read_json(&manifest)?;
        println!(
            "dataset: seed {}, {} frames, {} IMU samples, {} GPS fixes, path {:.3} m",
            m.seed, m.frames, m.imu_samples, m.gps_fixes, m.path_length
        );
        found += 1;
    }
    let checks = dir.join(JACOBIAN_REPORT_FILE);
    if checks.exists() {
        let r: viokit::check::JacobianReport = io::read_json(&checks)?;
        let failing = r.blocks.iter().filter(|b| !b.passed).count();
        println!("jacobians: {} blocks x {} draws, {failing} failing", r.blocks.len(), r.trials);
        found += 1;
    }
    let alignment = dir.join(io::ALIGNMENT_FILE);
    if alignment.exists() {
        let a: Value = io::read_json(&alignment)?;
        println!("alignment: scale {}, converged {}", a["scale"], a["converged"]);
        found += 1;
    }
    let report = dir.join(io::REPORT_FILE);
    if report.exists() {
        let r: viokit::window::EstimatorReport = io::read_json(&report)?;
        let marginalized = r
            .events
            .iter()
            .filter(|e| matches!(e, viokit::window::WindowEvent::MarginalizedOldest { .. }))
            .count();
        println!(
            "estimate: {:?}, {} frames, {} keyframes, {} optimizations, {} marginalizations",
            r.status,
            r.frames,
            r.keyframes,
            r.optimizations.len(),
            marginalized
        );
        if let (Some(rmse), Some(len)) = (r.position_rmse, r.path_length) {
            println!("  position RMSE {rmse:.6} m ({:.4}% of path)", 100.0 * rmse / len);
        }
        found += 1;
    }
    let transform = dir.join(io::TRANSFORM_FILE);
    if transform.exists() {
        let t: TransformFile = io::read_json(&transform)?;
        let q = t.rotation.to_array();
        println!(
            "global: strategy {:?}, q_l_G [{:.9}, {:.9}, {:.9}, {:.9}], p_l_G [{:.6}, {:.6}, {:.6}]",
            t.strategy, q[0], q[1], q[2], q[3], t.translation.x, t.translation.y, t.translation.z
        );
        found += 1;
    }
    if found == 0 {
        return Err(Failure::new(Exit::Input, format!("no run outputs found in {}", dir.display())));
    }
    Ok(())
}
