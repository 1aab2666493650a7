//! Pipeline driver: simulate datasets, run the estimator, evaluate
//! trajectories against a reference, and inspect recorded streams.
//!
//! Every command is deterministic given identical inputs, config, and seed.
//! Machine-readable outputs go to stdout as `RESULT key=value` lines; human
//! prose and warnings go to stderr. Exit codes: 0 success, 2 config/parse
//! error, 3 i/o error, 4 degenerate motion, 5 numerical failure, 6 no
//! timestamp matches.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hpgt::config::{Config, ConfigError};
use hpgt::factors::NoiseModel;
use hpgt::geometry::Pose;
use hpgt::init::{initialize, seed_state, InitError};
use hpgt::io::{
    self, parse_imu_file, parse_pose_file, validate, IoError, MeasurementSet, MoCapSample,
    DutSample,
};
use hpgt::metrics::{compute_metrics, MetricsError, Mode};
use hpgt::sim::{export_set, make_truth, sample_set, SimError};
use hpgt::solver::{build_problem, extract_trajectory, fd_check, solve, Frame, SolverError};
use hpgt::sync::{angular_rate_signal, cross_correlate_offset, imu_rate_signal, SyncError};

#[derive(Parser)]
#[command(name = "hpgt", version, about = "Offline MoCap/IMU/DUT fusion for ground-truth trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset (mocap.tum, imu.csv, dut.tum, truth files).
    Simulate {
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// RNG seed; identical seeds reproduce identical files.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate the fused trajectory and calibration from three streams.
    Estimate {
        /// MoCap trajectory (TUM format, MoCap clock).
        #[arg(long)]
        mocap: PathBuf,
        /// IMU stream (CSV: t,wx,wy,wz,ax,ay,az).
        #[arg(long)]
        imu: PathBuf,
        /// DUT trajectory (TUM format, DUT clock).
        #[arg(long)]
        dut: PathBuf,
        /// Output trajectory path; the solve report lands next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output sampling rate in Hz (overrides the config).
        #[arg(long)]
        rate: Option<f64>,
        /// Verify analytic Jacobians against finite differences before
        /// solving; fails with exit 5 if they disagree.
        #[arg(long)]
        fd_check: bool,
    },
    /// Compare an estimated trajectory against a reference.
    Evaluate {
        /// Estimated trajectory (TUM format).
        est: PathBuf,
        /// Reference trajectory (TUM format).
        reference: PathBuf,
        /// `direct` compares in a shared frame; `aligned` removes the best
        /// rigid transform first.
        #[arg(long, value_enum, default_value_t = ModeArg::Direct)]
        mode: ModeArg,
        /// Timestamp association tolerance (s).
        #[arg(long, default_value_t = 1e-3)]
        max_dt: f64,
    },
    /// Validate a dataset directory and preview synchronization.
    Inspect {
        /// Directory containing mocap.tum, imu.csv, dut.tum.
        dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Aligned,
}

/// Error already mapped to its documented exit code.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        CliError { code, msg: msg.into() }
    }
}

trait Stage<T> {
    /// Attaches the pipeline stage name and the documented exit code.
    fn stage(self, name: &str) -> Result<T, CliError>;
}

impl<T> Stage<T> for Result<T, ConfigError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(2, format!("{name}: {e}")))
    }
}

impl<T> Stage<T> for Result<T, IoError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            // Any problem with an input file, including a missing one, is a
            // parse failure (exit 2); only write-side i/o gets exit 3.
            let code = if name == "write" { 3 } else { 2 };
            CliError::new(code, format!("{name}: {e}"))
        })
    }
}

impl<T> Stage<T> for Result<T, SimError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let code = match &e {
                SimError::Io(IoError::Io { .. }) => 3,
                _ => 2,
            };
            CliError::new(code, format!("{name}: {e}"))
        })
    }
}

impl<T> Stage<T> for Result<T, SyncError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            match &e {
                SyncError::FlatSignal => {
                    CliError::new(4, format!("{name}: degenerate motion: {e}"))
                }
                _ => CliError::new(2, format!("{name}: {e}")),
            }
        })
    }
}

impl<T> Stage<T> for Result<T, InitError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let code = match &e {
                InitError::DegenerateMotion { .. }
                | InitError::RankDeficient { .. }
                | InitError::GravityMagnitude { .. } => 4,
                InitError::TooFewSamples(_) => 2,
                InitError::Spline(_) => 5,
            };
            CliError::new(code, format!("{name}: {e}"))
        })
    }
}

impl<T> Stage<T> for Result<T, SolverError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let code = match &e {
                SolverError::NumericalFailure(_) => 5,
                _ => 2,
            };
            CliError::new(code, format!("{name}: {e}"))
        })
    }
}

impl<T> Stage<T> for Result<T, MetricsError> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| {
            let code = match &e {
                MetricsError::NoMatches { .. } => 6,
                MetricsError::Degenerate => 4,
            };
            CliError::new(code, format!("{name}: {e}"))
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { out, config, seed } => cmd_simulate(&out, config.as_deref(), seed),
        Command::Estimate { mocap, imu, dut, out, config, rate, fd_check } => {
            cmd_estimate(&mocap, &imu, &dut, &out, config.as_deref(), rate, fd_check)
        }
        Command::Evaluate { est, reference, mode, max_dt } => {
            cmd_evaluate(&est, &reference, mode, max_dt)
        }
        Command::Inspect { dir, config } => cmd_inspect(&dir, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        Some(p) => Config::from_file(p).stage("config"),
        None => Ok(Config::default()),
    }
}

fn cmd_simulate(out: &Path, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let config = load_config(config)?;
    let truth = make_truth(&config.simulate, seed).stage("simulate")?;
    let set = sample_set(&truth);
    export_set(&truth, &set, out).stage("simulate")?;
    eprintln!(
        "simulated {:.1} s at seed {}: mocap {} Hz, imu {} Hz, dut {} Hz, noise scale {}",
        config.simulate.duration,
        seed,
        config.simulate.mocap_hz,
        config.simulate.imu_hz,
        config.simulate.dut_hz,
        config.simulate.noise_scale,
    );
    eprintln!(
        "clock offsets at start: mocap {:+.6} s, dut {:+.6} s; drift {:+.3e}, {:+.3e} s/s",
        truth.clock_m.c0, truth.clock_d.c0, truth.clock_m.c1, truth.clock_d.c1
    );
    eprintln!("wrote mocap.tum, imu.csv, dut.tum, truth.tum, truth_dut.tum, calib.txt to {}", out.display());
    println!("RESULT seed={seed}");
    println!("RESULT duration_s={}", config.simulate.duration);
    println!("RESULT mocap_samples={}", set.mocap.len());
    println!("RESULT imu_samples={}", set.imu.len());
    println!("RESULT dut_samples={}", set.dut.len());
    println!("RESULT out_dir={}", out.display());
    Ok(())
}

fn cmd_estimate(
    mocap_path: &Path,
    imu_path: &Path,
    dut_path: &Path,
    out: &Path,
    config: Option<&Path>,
    rate: Option<f64>,
    run_fd_check: bool,
) -> Result<(), CliError> {
    let config = load_config(config)?;
    let rate_hz = rate.unwrap_or(config.estimate.output_rate_hz);
    if !(rate_hz > 0.0) {
        return Err(CliError::new(2, format!("config: output rate {rate_hz} must be positive")));
    }

    // Parse. The noise description rides along with the set from the config.
    let mocap_poses = parse_pose_file(mocap_path).stage("parse")?;
    let imu = parse_imu_file(imu_path).stage("parse")?;
    let dut_poses = parse_pose_file(dut_path).stage("parse")?;
    let set = MeasurementSet {
        mocap: mocap_poses.iter().map(|&(tau, pose)| MoCapSample { tau, pose }).collect(),
        imu,
        dut: dut_poses.iter().map(|&(tau, pose)| DutSample { tau, pose }).collect(),
        noise: config.simulate.noise,
    };
    let (set, epoch) = set.rebased();
    let report = validate(&set).stage("validate")?;
    for (stream, lo, hi) in &report.gaps {
        eprintln!("warning: {stream} stream has a gap from {lo:.3} s to {hi:.3} s");
    }
    for stream in &report.jitter_warnings {
        eprintln!("warning: {stream} stream timestamp jitter exceeds 5% of its period");
    }

    // Clock synchronization by angular-rate cross-correlation. The IMU clock
    // is the global clock, so correlating each sensor against the IMU signal
    // yields that sensor's offset onto the global clock.
    let sync_rate = config.estimate.sync_rate_hz;
    let max_lag = 5.0;
    let sig_imu = imu_rate_signal(&set.imu, sync_rate).stage("sync")?;
    let mocap_pairs: Vec<(f64, Pose)> = set.mocap.iter().map(|s| (s.tau, s.pose)).collect();
    let sig_mocap = angular_rate_signal(&mocap_pairs, sync_rate).stage("sync")?;
    let off_m = cross_correlate_offset(&sig_imu, &sig_mocap, sync_rate, max_lag).stage("sync")?;
    let dut_pairs: Vec<(f64, Pose)> = set.dut.iter().map(|s| (s.tau, s.pose)).collect();
    let sig_dut = angular_rate_signal(&dut_pairs, sync_rate).stage("sync")?;
    let off_d = cross_correlate_offset(&sig_imu, &sig_dut, sync_rate, max_lag).stage("sync")?;
    println!("RESULT sync_off_m_s={off_m:.6}");
    println!("RESULT sync_off_d_s={off_d:.6}");

    // Linear initialization and spline seeding.
    let init = initialize(&set, off_m, off_d).stage("init")?;
    println!("RESULT init_handeye_gap={:.6e}", init.handeye_gap);
    println!("RESULT init_residual_rms={:.6e}", init.residual_rms);
    let seed = seed_state(&set, &init, config.estimate.knots).stage("seed")?;

    // Batch solve.
    let mut noise = NoiseModel::from_spec(&set.noise, report.imu_rate_hz);
    noise.dut_sigma_r = config.estimate.dut_sigma_r;
    noise.dut_sigma_p = config.estimate.dut_sigma_p;
    let problem = build_problem(&set, seed, noise).stage("solve")?;
    if run_fd_check {
        let stride = (problem.factors_len() / 500).max(1);
        let worst = fd_check(&problem, &problem.seed, stride).stage("fd-check")?;
        println!("RESULT fd_max_rel_err={worst:.3e}");
        if worst > 1e-4 {
            return Err(CliError::new(
                5,
                format!("fd-check: Jacobian mismatch {worst:.3e} exceeds 1e-4"),
            ));
        }
    }
    let (state, solve_report) = solve(&problem, &config.solver).stage("solve")?;
    println!("RESULT iterations={}", solve_report.iterations);
    println!("RESULT initial_cost={:.9e}", solve_report.initial_cost);
    println!("RESULT final_cost={:.9e}", solve_report.final_cost);
    println!("RESULT termination={}", solve_report.termination);
    for (class, rms) in &solve_report.factor_rms {
        println!("RESULT rms_{class}={rms:.6}");
    }
    for (class, n) in &solve_report.skipped {
        if *n > 0 {
            println!("RESULT skipped_{class}={n}");
        }
    }
    for w in &solve_report.warnings {
        eprintln!("warning: {w}");
    }

    // The ground-truth product: the DUT pose in the MoCap world frame, on the
    // DUT clock, at a uniform rate. Expressing it in the MoCap frame (rather
    // than the gravity-aligned frame) keeps it directly comparable to any
    // MoCap-frame reference without alignment.
    let (est, trimmed) = extract_trajectory(&state, rate_hz, Frame::Dut);
    if est.is_empty() {
        return Err(CliError::new(5, "extract: no samples inside the solved domain".to_string()));
    }
    let t_p_w = state.calib.t_w_p.inverse();
    let est_p: Vec<(f64, Pose)> =
        est.iter().map(|(tau, pose)| (tau + epoch, t_p_w.compose(pose))).collect();
    io::write_trajectory(out, &est_p).stage("write")?;
    let report_path = out.with_extension("report.txt");
    std::fs::write(&report_path, solve_report_text(&state, &solve_report, epoch))
        .map_err(|e| CliError::new(3, format!("write: {}: {e}", report_path.display())))?;
    println!("RESULT samples={}", est_p.len());
    println!("RESULT trimmed={trimmed}");
    println!("RESULT rate_hz={rate_hz}");
    println!("RESULT out={}", out.display());
    println!("RESULT report={}", report_path.display());
    Ok(())
}

/// Human-readable solve report: calibration, clock offsets over time, and
/// residual statistics.
fn solve_report_text(
    state: &hpgt::factors::SystemState,
    report: &hpgt::solver::SolveReport,
    epoch: f64,
) -> String {
    let mut s = String::new();
    let pose_line = |s: &mut String, name: &str, p: &Pose| {
        let q = p.rot.to_quaternion().hemisphere_normalized();
        writeln!(
            s,
            "{name}: t = [{:+.6}, {:+.6}, {:+.6}] m, q(xyzw) = [{:+.8}, {:+.8}, {:+.8}, {:+.8}]",
            p.trans[0], p.trans[1], p.trans[2], q.x, q.y, q.z, q.w
        )
        .unwrap();
    };
    writeln!(s, "# solve report").unwrap();
    writeln!(
        s,
        "iterations: {}\ncost: {:.6e} -> {:.6e}\ntermination: {}",
        report.iterations, report.initial_cost, report.final_cost, report.termination
    )
    .unwrap();
    writeln!(s, "\n## calibration").unwrap();
    let c = &state.calib;
    pose_line(&mut s, "T_B_M (marker body in rigid body)", &c.t_b_m);
    pose_line(&mut s, "T_B_D (DUT in rigid body)", &c.t_b_d);
    pose_line(&mut s, "T_W_P (MoCap world in gravity frame)", &c.t_w_p);
    let q = c.r_w_a.to_quaternion().hemisphere_normalized();
    writeln!(s, "R_w_a (gyro/accel misalignment): q(xyzw) = [{:+.8}, {:+.8}, {:+.8}, {:+.8}]", q.x, q.y, q.z, q.w).unwrap();
    let tri = |m: &nalgebra::Matrix3<f64>| {
        format!(
            "[{:+.8} {:+.8} {:+.8}; {:+.8} {:+.8}; {:+.8}]",
            m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]
        )
    };
    writeln!(s, "M_w (gyro intrinsics, upper tri): {}", tri(&c.m_w)).unwrap();
    writeln!(s, "M_a (accel intrinsics, upper tri): {}", tri(&c.m_a)).unwrap();
    writeln!(s, "gravity: {:.6} m/s^2", c.g_w).unwrap();

    writeln!(s, "\n## clock offsets (sensor time -> offset onto the IMU clock)").unwrap();
    for (name, spline) in [("mocap", &state.bundle.off_m), ("dut", &state.bundle.off_d)] {
        let (lo, hi) = spline.domain();
        let mut tau = lo;
        while tau < hi {
            if let Ok(off) = spline.offset(tau) {
                writeln!(s, "off_{name}({:.3}) = {off:+.9} s", tau + epoch).unwrap();
            }
            tau += 5.0;
        }
    }

    writeln!(s, "\n## residuals (whitened RMS per factor class)").unwrap();
    for (class, rms) in &report.factor_rms {
        writeln!(s, "{class}: {rms:.6}").unwrap();
    }
    for (class, n) in &report.skipped {
        if *n > 0 {
            writeln!(s, "skipped {class}: {n}").unwrap();
        }
    }
    for w in &report.warnings {
        writeln!(s, "warning: {w}").unwrap();
    }
    s
}

fn cmd_evaluate(est: &Path, reference: &Path, mode: ModeArg, max_dt: f64) -> Result<(), CliError> {
    let est = parse_pose_file(est).stage("parse")?;
    let reference = parse_pose_file(reference).stage("parse")?;
    let mode = match mode {
        ModeArg::Direct => Mode::Direct,
        ModeArg::Aligned => Mode::Aligned,
    };
    let report = compute_metrics(&est, &reference, mode, max_dt, 1).stage("evaluate")?;
    eprint!("{}", report.to_plain_text());
    for line in report.to_key_values().lines() {
        println!("RESULT {line}");
    }
    Ok(())
}

fn cmd_inspect(dir: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let config = load_config(config)?;
    let mocap_poses = parse_pose_file(&dir.join("mocap.tum")).stage("parse")?;
    let imu = parse_imu_file(&dir.join("imu.csv")).stage("parse")?;
    let dut_poses = parse_pose_file(&dir.join("dut.tum")).stage("parse")?;
    let set = MeasurementSet {
        mocap: mocap_poses.iter().map(|&(tau, pose)| MoCapSample { tau, pose }).collect(),
        imu,
        dut: dut_poses.iter().map(|&(tau, pose)| DutSample { tau, pose }).collect(),
        noise: config.simulate.noise,
    };
    let (set, _epoch) = set.rebased();
    let report = validate(&set).stage("validate")?;
    println!("RESULT mocap_rate_hz={:.3}", report.mocap_rate_hz);
    println!("RESULT imu_rate_hz={:.3}", report.imu_rate_hz);
    println!("RESULT dut_rate_hz={:.3}", report.dut_rate_hz);
    println!("RESULT overlap_s={:.3}", report.overlap.1 - report.overlap.0);
    let mut warnings = 0usize;
    for (stream, lo, hi) in &report.gaps {
        eprintln!("warning: {stream} stream has a gap from {lo:.3} s to {hi:.3} s");
        warnings += 1;
    }
    for stream in &report.jitter_warnings {
        eprintln!("warning: {stream} stream timestamp jitter exceeds 5% of its period");
        warnings += 1;
    }

    // Excitation statistics from the raw gyroscope.
    let mut peak = 0.0f64;
    let mut mean = 0.0f64;
    for s in &set.imu {
        let w = s.omega.norm();
        peak = peak.max(w);
        mean += w;
    }
    mean /= set.imu.len().max(1) as f64;
    println!("RESULT gyro_mean_rad_s={mean:.4}");
    println!("RESULT gyro_peak_rad_s={peak:.4}");

    // Synchronization preview; a flat signal is reported as a warning here
    // rather than an error so static recordings can still be inspected.
    let sync_rate = config.estimate.sync_rate_hz;
    let mocap_pairs: Vec<(f64, Pose)> = set.mocap.iter().map(|s| (s.tau, s.pose)).collect();
    let dut_pairs: Vec<(f64, Pose)> = set.dut.iter().map(|s| (s.tau, s.pose)).collect();
    let offsets = (|| -> Result<(f64, f64), SyncError> {
        let sig_imu = imu_rate_signal(&set.imu, sync_rate)?;
        let sig_mocap = angular_rate_signal(&mocap_pairs, sync_rate)?;
        let off_m = cross_correlate_offset(&sig_imu, &sig_mocap, sync_rate, 5.0)?;
        let sig_dut = angular_rate_signal(&dut_pairs, sync_rate)?;
        let off_d = cross_correlate_offset(&sig_imu, &sig_dut, sync_rate, 5.0)?;
        Ok((off_m, off_d))
    })();
    match offsets {
        Ok((off_m, off_d)) => {
            println!("RESULT sync_off_m_s={off_m:.6}");
            println!("RESULT sync_off_d_s={off_d:.6}");
        }
        Err(e) => {
            eprintln!("warning: sync preview unavailable: {e}");
            warnings += 1;
        }
    }
    println!("RESULT warnings={warnings}");
    Ok(())
}
