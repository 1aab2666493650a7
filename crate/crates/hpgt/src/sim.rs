//! Measurement simulator: a smooth ground-truth trajectory plus synthesized
//! MoCap / IMU / DUT streams with sensor noise, clock drift and SLAM-style
//! odometry drift.
//!
//! The ground truth is spline-backed: an analytic sinusoid mix generates the
//! control points of an order-4 rotation/translation spline pair, and every
//! measurement is sampled from those splines. This makes the true state
//! exactly representable by the estimator's parameterization, so noiseless
//! residuals vanish to machine precision.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{Pose, Rotation, UnitQuaternion};
use crate::io::{self, DutSample, ImuSample, IoError, MeasurementSet, MoCapSample, NoiseSpec};
use crate::spline::{EuclidSpline, KnotGrid, So3Spline};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad simulator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One sinusoidal component `amp * sin(2 pi f t + phase)`.
#[derive(Debug, Clone, Copy)]
pub struct Sinusoid {
    pub amp: f64,
    pub freq_hz: f64,
    pub phase: f64,
}

impl Sinusoid {
    fn value(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.freq_hz;
        self.amp * (w * t + self.phase).sin()
    }

    fn d1(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.freq_hz;
        self.amp * w * (w * t + self.phase).cos()
    }

    fn d2(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.freq_hz;
        -self.amp * w * w * (w * t + self.phase).sin()
    }
}

/// Closed-form trajectory: per-axis translation sinusoid sets and a
/// Z-Y-X Euler-angle sinusoid set for rotation.
#[derive(Debug, Clone)]
pub struct AnalyticTrajectory {
    pub trans: [Vec<Sinusoid>; 3],
    /// Euler angles (a, b, c) for `R = Rz(a) Ry(b) Rx(c)`.
    pub euler: [Vec<Sinusoid>; 3],
    pub duration: f64,
}

fn sum(set: &[Sinusoid], t: f64, deriv: usize) -> f64 {
    set.iter()
        .map(|s| match deriv {
            0 => s.value(t),
            1 => s.d1(t),
            _ => s.d2(t),
        })
        .sum()
}

impl AnalyticTrajectory {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            sum(&self.trans[0], t, 0),
            sum(&self.trans[1], t, 0),
            sum(&self.trans[2], t, 0),
        )
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            sum(&self.trans[0], t, 1),
            sum(&self.trans[1], t, 1),
            sum(&self.trans[2], t, 1),
        )
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        Vector3::new(
            sum(&self.trans[0], t, 2),
            sum(&self.trans[1], t, 2),
            sum(&self.trans[2], t, 2),
        )
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        let a = sum(&self.euler[0], t, 0);
        let b = sum(&self.euler[1], t, 0);
        let c = sum(&self.euler[2], t, 0);
        Rotation::exp(Vector3::new(0.0, 0.0, a))
            * Rotation::exp(Vector3::new(0.0, b, 0.0))
            * Rotation::exp(Vector3::new(c, 0.0, 0.0))
    }

    /// Body angular velocity of `R = Rz(a) Ry(b) Rx(c)`:
    /// `w = adot Rx^T Ry^T ez + bdot Rx^T ey + cdot ex`.
    pub fn body_rate(&self, t: f64) -> Vector3<f64> {
        let b = sum(&self.euler[1], t, 0);
        let c = sum(&self.euler[2], t, 0);
        let da = sum(&self.euler[0], t, 1);
        let db = sum(&self.euler[1], t, 1);
        let dc = sum(&self.euler[2], t, 1);
        let rx_t = Rotation::exp(Vector3::new(c, 0.0, 0.0)).transpose();
        let ry_t = Rotation::exp(Vector3::new(0.0, b, 0.0)).transpose();
        rx_t * (ry_t * (da * Vector3::z())) + rx_t * (db * Vector3::y()) + dc * Vector3::x()
    }
}

/// Linear clock model: global time `t = tau + c0 + c1 * tau`.
#[derive(Debug, Clone, Copy)]
pub struct ClockModel {
    pub c0: f64,
    pub c1: f64,
}

impl ClockModel {
    pub fn offset(&self, tau: f64) -> f64 {
        self.c0 + self.c1 * tau
    }

    pub fn to_global(&self, tau: f64) -> f64 {
        tau + self.offset(tau)
    }

    pub fn from_global(&self, t: f64) -> f64 {
        (t - self.c0) / (1.0 + self.c1)
    }
}

/// True time-invariant calibration of a simulated rig. The body frame B is
/// chosen to coincide with the IMU frame, so the IMU lever arm is zero and
/// the IMU clock is the global clock.
#[derive(Debug, Clone, Copy)]
pub struct SimCalib {
    pub t_b_m: Pose,
    pub t_b_d: Pose,
    pub m_w: Matrix3<f64>,
    pub m_a: Matrix3<f64>,
    pub r_w_a: Rotation,
    /// Gravity in the MoCap world frame P (m/s^2).
    pub g_p: Vector3<f64>,
    pub bias_w0: Vector3<f64>,
    pub bias_a0: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub duration: f64,
    pub mocap_hz: f64,
    pub imu_hz: f64,
    pub dut_hz: f64,
    pub noise: NoiseSpec,
    /// Global multiplier on all injected noise and drift; 0 gives a noiseless
    /// dataset with constant biases and exact clocks.
    pub noise_scale: f64,
    /// Per-frame DUT relative rotation noise (rad) and translation noise (m);
    /// composing these white increments produces the slow random-walk drift.
    pub dut_step_sigma_r: f64,
    pub dut_step_sigma_p: f64,
    /// Constant clock offsets drawn uniformly in +-clock_offset_max (s).
    pub clock_offset_max: f64,
    pub amplitude_scale: f64,
    /// Motion-degradation preset: halved amplitudes, one rotation axis zeroed.
    pub degraded: bool,
    pub randomize_extrinsics: bool,
    pub randomize_intrinsics: bool,
    /// Knot spacing of the spline-backed ground truth (s).
    pub truth_knot_dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 60.0,
            mocap_hz: 300.0,
            imu_hz: 500.0,
            dut_hz: 90.0,
            noise: NoiseSpec::default(),
            noise_scale: 1.0,
            dut_step_sigma_r: 0.01_f64.to_radians(),
            dut_step_sigma_p: 0.15e-3,
            clock_offset_max: 0.2,
            amplitude_scale: 1.0,
            degraded: false,
            randomize_extrinsics: true,
            randomize_intrinsics: true,
            truth_knot_dt: 0.02,
        }
    }
}

/// Complete reproducible ground truth: spline-backed trajectory of the body
/// frame B in the MoCap world P, true calibration and clock models.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub config: SimConfig,
    pub seed: u64,
    pub analytic: AnalyticTrajectory,
    pub rot: So3Spline,
    pub trans: EuclidSpline<3>,
    pub calib: SimCalib,
    pub clock_m: ClockModel,
    pub clock_d: ClockModel,
}

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn randn3(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    Vector3::new(randn(rng), randn(rng), randn(rng))
}

fn random_rotation(rng: &mut ChaCha12Rng) -> Rotation {
    // uniform on SO(3): normalized 4-vector of standard normals
    let q = UnitQuaternion::new_normalize(randn(rng), randn(rng), randn(rng), randn(rng));
    q.to_rotation()
}

impl SimTruth {
    /// Global-clock pose of the body frame B in P.
    pub fn pose_b(&self, t: f64) -> Pose {
        Pose::new(self.rot.eval(t).unwrap(), self.trans.eval(t, 0).unwrap())
    }

    pub fn body_rate(&self, t: f64) -> Vector3<f64> {
        self.rot.eval_rates(t).unwrap().omega
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        self.trans.eval(t, 2).unwrap()
    }

    /// Pose of the DUT frame D in P at global time `t`.
    pub fn pose_dut(&self, t: f64) -> Pose {
        self.pose_b(t).compose(&self.calib.t_b_d)
    }
}

/// Builds the reproducible ground truth for one seed.
pub fn make_truth(config: &SimConfig, seed: u64) -> Result<SimTruth, SimError> {
    if config.duration <= 0.0 {
        return Err(SimError::BadConfig("duration must be positive".into()));
    }
    for (name, v) in [
        ("mocap_hz", config.mocap_hz),
        ("imu_hz", config.imu_hz),
        ("dut_hz", config.dut_hz),
        ("truth_knot_dt", config.truth_knot_dt),
    ] {
        if v <= 0.0 {
            return Err(SimError::BadConfig(format!("{name} must be positive")));
        }
    }
    if config.noise_scale < 0.0 || config.amplitude_scale < 0.0 {
        return Err(SimError::BadConfig("scales must be non-negative".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let degr = if config.degraded { 0.5 } else { 1.0 };
    let amp = config.amplitude_scale * degr;
    let axis_set = |lo_amp: f64, hi_amp: f64, rng: &mut ChaCha12Rng| -> Vec<Sinusoid> {
        (0..2)
            .map(|_| Sinusoid {
                amp: amp * rng.gen_range(lo_amp..hi_amp),
                freq_hz: rng.gen_range(0.2..1.2),
                phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
            })
            .collect()
    };
    let trans = [
        axis_set(0.15, 0.35, &mut rng),
        axis_set(0.15, 0.35, &mut rng),
        axis_set(0.10, 0.25, &mut rng),
    ];
    let mut euler = [
        axis_set(0.20, 0.35, &mut rng),
        axis_set(0.20, 0.35, &mut rng),
        axis_set(0.20, 0.35, &mut rng),
    ];
    if config.degraded {
        for s in &mut euler[2] {
            s.amp = 0.0;
        }
    }
    let analytic = AnalyticTrajectory { trans, euler, duration: config.duration };

    let uniform3 = |rng: &mut ChaCha12Rng, lim: f64| {
        Vector3::new(
            rng.gen_range(-lim..lim),
            rng.gen_range(-lim..lim),
            rng.gen_range(-lim..lim),
        )
    };
    let (t_b_m, t_b_d) = if config.randomize_extrinsics {
        (
            Pose::new(random_rotation(&mut rng), uniform3(&mut rng, 0.2)),
            Pose::new(random_rotation(&mut rng), uniform3(&mut rng, 0.2)),
        )
    } else {
        (Pose::identity(), Pose::identity())
    };
    let (m_w, m_a, r_w_a) = if config.randomize_intrinsics {
        let upper = |rng: &mut ChaCha12Rng| {
            let mut m = Matrix3::identity();
            for i in 0..3 {
                m[(i, i)] = 1.0 + rng.gen_range(-0.01..0.01);
            }
            m[(0, 1)] = rng.gen_range(-0.005..0.005);
            m[(0, 2)] = rng.gen_range(-0.005..0.005);
            m[(1, 2)] = rng.gen_range(-0.005..0.005);
            m
        };
        let axis = uniform3(&mut rng, 1.0);
        let ang = rng.gen_range(0.0..0.5_f64.to_radians());
        let r = if axis.norm() > 1e-6 {
            Rotation::exp(axis.normalize() * ang)
        } else {
            Rotation::identity()
        };
        (upper(&mut rng), upper(&mut rng), r)
    } else {
        (Matrix3::identity(), Matrix3::identity(), Rotation::identity())
    };
    let ns = config.noise_scale;
    let clock = |rng: &mut ChaCha12Rng, cfg: &SimConfig| ClockModel {
        c0: rng.gen_range(-cfg.clock_offset_max..cfg.clock_offset_max),
        c1: cfg.noise.clock_drift * rng.gen_range(-1.0..1.0),
    };
    let mut clock_m = clock(&mut rng, config);
    let mut clock_d = clock(&mut rng, config);
    if ns == 0.0 {
        // noiseless preset still keeps constant offsets (they are state, not
        // noise) but drops the drift so clocks stay affine-exact anyway;
        // callers wanting exact clocks can set clock_offset_max = 0.
        clock_m.c1 = 0.0;
        clock_d.c1 = 0.0;
    }
    let bias_w0 = uniform3(&mut rng, 0.01);
    let bias_a0 = uniform3(&mut rng, 0.05);

    // Spline-backed truth: control points straight from the analytic
    // trajectory, shifted one knot to compensate the order-4 window advance.
    // The domain generously covers every mapped measurement time.
    let margin = config.clock_offset_max + 1.0;
    let grid = KnotGrid::covering(-margin, config.duration + margin, config.truth_knot_dt, 4);
    let rot_cps: Vec<Rotation> = (0..grid.count)
        .map(|i| analytic.rotation(grid.knot_time(i) - grid.dt))
        .collect();
    let trans_cps: Vec<Vector3<f64>> = (0..grid.count)
        .map(|i| analytic.position(grid.knot_time(i) - grid.dt))
        .collect();
    let rot = So3Spline::new(grid, rot_cps).expect("grid and cps constructed together");
    let trans = EuclidSpline::new(grid, 4, trans_cps).expect("grid and cps constructed together");

    Ok(SimTruth {
        config: config.clone(),
        seed,
        analytic,
        rot,
        trans,
        calib: SimCalib { t_b_m, t_b_d, m_w, m_a, r_w_a, g_p: Vector3::new(0.0, 0.0, -9.81), bias_w0, bias_a0 },
        clock_m,
        clock_d,
    })
}

fn stream_rng(truth: &SimTruth, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(truth.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream))
}

/// MoCap stream: pose of M in P at MoCap-clock times, with per-axis white
/// noise on rotation (axis-angle) and translation.
pub fn sample_mocap(truth: &SimTruth, rate_hz: f64) -> Vec<MoCapSample> {
    let mut rng = stream_rng(truth, 1);
    let ns = truth.config.noise_scale;
    let n = (truth.config.duration * rate_hz).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let tau = k as f64 / rate_hz;
        let t = truth.clock_m.to_global(tau);
        let clean = truth.pose_b(t).compose(&truth.calib.t_b_m);
        let dr = randn3(&mut rng) * (truth.config.noise.mocap_sigma_r * ns);
        let dp = randn3(&mut rng) * (truth.config.noise.mocap_sigma_p * ns);
        out.push(MoCapSample {
            tau,
            pose: Pose::new(clean.rot * Rotation::exp(dr), clean.trans + dp),
        });
    }
    out
}

/// Injected IMU bias trajectories at the sample times: constant initial bias
/// plus a per-step random walk.
pub fn imu_bias_walk(truth: &SimTruth, rate_hz: f64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut rng = stream_rng(truth, 2);
    let ns = truth.config.noise_scale;
    let n = (truth.config.duration * rate_hz).floor() as usize + 1;
    let mut bw = Vec::with_capacity(n);
    let mut ba = Vec::with_capacity(n);
    let mut w = truth.calib.bias_w0;
    let mut a = truth.calib.bias_a0;
    for _ in 0..n {
        bw.push(w);
        ba.push(a);
        w += randn3(&mut rng) * (truth.config.noise.gyr_rw * ns);
        a += randn3(&mut rng) * (truth.config.noise.acc_rw * ns);
    }
    (bw, ba)
}

/// IMU stream on the global clock: true intrinsics applied to exact spline
/// body rates and specific force, plus white noise and the bias walk.
pub fn sample_imu(truth: &SimTruth, rate_hz: f64) -> Vec<ImuSample> {
    let mut rng = stream_rng(truth, 3);
    let ns = truth.config.noise_scale;
    let (bias_w, bias_a) = imu_bias_walk(truth, rate_hz);
    let n = bias_w.len();
    let cal = &truth.calib;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let tau = k as f64 / rate_hz;
        let rates = truth.rot.eval_rates(tau).unwrap();
        let accel_p = truth.trans.eval(tau, 2).unwrap();
        let specific = rates.r.transpose() * (accel_p - cal.g_p);
        let omega = cal.m_w * (cal.r_w_a * rates.omega)
            + bias_w[k]
            + randn3(&mut rng) * (truth.config.noise.gyr_nd * ns);
        let accel = cal.m_a * specific
            + bias_a[k]
            + randn3(&mut rng) * (truth.config.noise.acc_nd * ns);
        out.push(ImuSample { tau, omega, accel });
    }
    out
}

/// DUT stream: frame-D poses in an arbitrary odometry frame H on the DUT
/// clock. Each inter-sample relative pose is perturbed by white noise; the
/// composition of those increments is the slow odometry drift.
pub fn sample_dut(truth: &SimTruth, rate_hz: f64) -> Vec<DutSample> {
    let mut rng = stream_rng(truth, 4);
    let ns = truth.config.noise_scale;
    let n = (truth.config.duration * rate_hz).floor() as usize + 1;
    // Arbitrary H frame: random rigid offset from the true initial pose.
    let h_offset = Pose::new(random_rotation(&mut rng), randn3(&mut rng));
    let mut out: Vec<DutSample> = Vec::with_capacity(n);
    let mut prev_true = Pose::identity();
    let mut pose = Pose::identity();
    for k in 0..n {
        let tau = k as f64 / rate_hz;
        let t = truth.clock_d.to_global(tau);
        let truth_pose = truth.pose_dut(t);
        if k == 0 {
            pose = h_offset.compose(&truth_pose);
        } else {
            let mut rel = prev_true.relative_to(&truth_pose);
            let dr = randn3(&mut rng) * (truth.config.dut_step_sigma_r * ns);
            let dp = randn3(&mut rng) * (truth.config.dut_step_sigma_p * ns);
            rel = Pose::new(rel.rot * Rotation::exp(dr), rel.trans + dp);
            pose = pose.compose(&rel);
        }
        prev_true = truth_pose;
        out.push(DutSample { tau, pose });
    }
    out
}

/// Generates all three streams with the configured rates.
pub fn sample_set(truth: &SimTruth) -> MeasurementSet {
    MeasurementSet {
        mocap: sample_mocap(truth, truth.config.mocap_hz),
        imu: sample_imu(truth, truth.config.imu_hz),
        dut: sample_dut(truth, truth.config.dut_hz),
        noise: truth.config.noise,
    }
}

/// Expresses the simulated truth in the estimator's state representation.
///
/// Exact for noiseless runs: the linear clock offsets are representable by
/// the order-2 offset splines, and the biases stay at their initial values.
/// With noise enabled the bias random walk is only approximated by the
/// constant initial bias.
pub fn truth_state(truth: &SimTruth) -> crate::factors::SystemState {
    use crate::factors::{CalibState, SplineBundle, SystemState};
    use crate::spline::TimeOffsetSpline;

    let dur = truth.config.duration;
    let linear_offset = |clock: &ClockModel| -> TimeOffsetSpline {
        let grid = KnotGrid::covering(-0.5, dur + 0.5, 20.0, 2);
        let cps = (0..grid.count)
            .map(|i| nalgebra::Vector1::new(clock.offset(grid.knot_time(i))))
            .collect();
        TimeOffsetSpline::new(EuclidSpline::new(grid, 2, cps).unwrap())
    };

    let bias_grid = KnotGrid::covering(-1.5, dur + 1.5, 5.0, 2);
    let bundle = SplineBundle {
        rot: truth.rot.clone(),
        trans: truth.trans.clone(),
        bias_w: EuclidSpline::constant(bias_grid, 2, truth.calib.bias_w0).unwrap(),
        bias_a: EuclidSpline::constant(bias_grid, 2, truth.calib.bias_a0).unwrap(),
        off_m: linear_offset(&truth.clock_m),
        off_i: TimeOffsetSpline::constant(-0.5, dur + 0.5, 20.0, 0.0),
        off_d: linear_offset(&truth.clock_d),
    };
    let calib = CalibState {
        t_b_m: truth.calib.t_b_m,
        t_b_i: Pose::identity(),
        t_b_d: truth.calib.t_b_d,
        t_w_p: Pose::identity(),
        r_w_a: truth.calib.r_w_a,
        m_w: truth.calib.m_w,
        m_a: truth.calib.m_a,
        g_w: -truth.calib.g_p[2],
    };
    SystemState { bundle, calib }
}

fn fmt_pose(p: &Pose) -> String {
    let q = p.rot.to_quaternion().hemisphere_normalized();
    format!(
        "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
        p.trans[0], p.trans[1], p.trans[2], q.x, q.y, q.z, q.w
    )
}

/// Writes the dataset plus the truth sidecar:
/// `mocap.tum`, `imu.csv`, `dut.tum`, a 1 kHz global-clock body trajectory
/// `truth.tum`, the DUT-clock DUT-frame trajectory `truth_dut.tum` (same
/// timestamps the estimator emits), and `calib.txt` with the true
/// calibration, clocks and biases.
pub fn export_set(truth: &SimTruth, set: &MeasurementSet, dir: &Path) -> Result<(), SimError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mocap: Vec<(f64, Pose)> = set.mocap.iter().map(|s| (s.tau, s.pose)).collect();
    io::write_trajectory(&dir.join("mocap.tum"), &mocap)?;
    io::write_imu_file(&dir.join("imu.csv"), &set.imu)?;
    let dut: Vec<(f64, Pose)> = set.dut.iter().map(|s| (s.tau, s.pose)).collect();
    io::write_trajectory(&dir.join("dut.tum"), &dut)?;

    let n = (truth.config.duration * 1000.0).floor() as usize + 1;
    let body: Vec<(f64, Pose)> = (0..n)
        .map(|k| {
            let t = k as f64 / 1000.0;
            (t, truth.pose_b(t))
        })
        .collect();
    io::write_trajectory(&dir.join("truth.tum"), &body)?;

    let n = (truth.config.duration * truth.config.dut_hz).floor() as usize + 1;
    let dut_truth: Vec<(f64, Pose)> = (0..n)
        .map(|k| {
            let tau = k as f64 / truth.config.dut_hz;
            (tau, truth.pose_dut(truth.clock_d.to_global(tau)))
        })
        .collect();
    io::write_trajectory(&dir.join("truth_dut.tum"), &dut_truth)?;

    let cal = &truth.calib;
    let mw = &cal.m_w;
    let ma = &cal.m_a;
    let rq = cal.r_w_a.to_quaternion().hemisphere_normalized();
    let mut text = String::new();
    text.push_str(&format!("seed = {}\n", truth.seed));
    text.push_str(&format!("duration = {:.17e}\n", truth.config.duration));
    text.push_str(&format!("t_b_m = {}\n", fmt_pose(&cal.t_b_m)));
    text.push_str(&format!("t_b_d = {}\n", fmt_pose(&cal.t_b_d)));
    text.push_str(&format!(
        "m_w = {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
        mw[(0, 0)], mw[(0, 1)], mw[(0, 2)], mw[(1, 1)], mw[(1, 2)], mw[(2, 2)]
    ));
    text.push_str(&format!(
        "m_a = {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}\n",
        ma[(0, 0)], ma[(0, 1)], ma[(0, 2)], ma[(1, 1)], ma[(1, 2)], ma[(2, 2)]
    ));
    text.push_str(&format!("r_w_a = {:.17e} {:.17e} {:.17e} {:.17e}\n", rq.x, rq.y, rq.z, rq.w));
    text.push_str(&format!("gravity_p = {:.17e} {:.17e} {:.17e}\n", cal.g_p[0], cal.g_p[1], cal.g_p[2]));
    text.push_str(&format!("clock_m = {:.17e} {:.17e}\n", truth.clock_m.c0, truth.clock_m.c1));
    text.push_str(&format!("clock_d = {:.17e} {:.17e}\n", truth.clock_d.c0, truth.clock_d.c1));
    text.push_str(&format!(
        "bias_w0 = {:.17e} {:.17e} {:.17e}\n",
        cal.bias_w0[0], cal.bias_w0[1], cal.bias_w0[2]
    ));
    text.push_str(&format!(
        "bias_a0 = {:.17e} {:.17e} {:.17e}\n",
        cal.bias_a0[0], cal.bias_a0[1], cal.bias_a0[2]
    ));
    std::fs::write(dir.join("calib.txt"), text).map_err(|source| IoError::Io {
        path: dir.join("calib.txt").display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_config() -> SimConfig {
        SimConfig { noise_scale: 0.0, duration: 20.0, ..SimConfig::default() }
    }

    #[test]
    fn same_seed_same_truth() {
        let cfg = SimConfig::default();
        let a = make_truth(&cfg, 42).unwrap();
        let b = make_truth(&cfg, 42).unwrap();
        assert_eq!(a.calib.t_b_m.trans, b.calib.t_b_m.trans);
        assert_eq!(a.clock_m.c0, b.clock_m.c0);
        for t in [0.0, 7.3, 19.9] {
            assert_eq!(a.pose_b(t).trans, b.pose_b(t).trans);
        }
        let sa = sample_imu(&a, 500.0);
        let sb = sample_imu(&b, 500.0);
        assert_eq!(sa[1234].omega, sb[1234].omega);
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SimConfig::default();
        let a = make_truth(&cfg, 1).unwrap();
        let b = make_truth(&cfg, 2).unwrap();
        assert_ne!(a.calib.t_b_m.trans, b.calib.t_b_m.trans);
    }

    #[test]
    fn drift_one_ms_per_min() {
        let c = ClockModel { c0: 0.05, c1: 1.0e-3 / 60.0 };
        let d = c.offset(120.0) - c.offset(0.0);
        assert!((d - 2.0e-3).abs() < 1e-12);
        let tau = 77.7;
        assert!((c.from_global(c.to_global(tau)) - tau).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_is_static() {
        let cfg = SimConfig { amplitude_scale: 0.0, ..noiseless_config() };
        let truth = make_truth(&cfg, 3).unwrap();
        for t in [0.0, 5.0, 15.0] {
            assert!(truth.trans.eval(t, 1).unwrap().norm() < 1e-12);
            assert!(truth.body_rate(t).norm() < 1e-12);
        }
    }

    #[test]
    fn spline_tracks_analytic_trajectory() {
        // The spline truth is a slightly smoothed copy of the analytic
        // generator (deviation ~ dt^2 * accel / 6 at 0.02 s knots); it only
        // has to stay close enough for the sinusoid character to survive.
        let truth = make_truth(&noiseless_config(), 4).unwrap();
        for k in 0..200 {
            let t = 0.1 * k as f64;
            let dp = (truth.trans.eval(t, 0).unwrap() - truth.analytic.position(t)).norm();
            assert!(dp < 5e-3, "t={t} dp={dp}");
            let dr = (truth.rot.eval(t).unwrap().transpose() * truth.analytic.rotation(t))
                .log()
                .norm();
            assert!(dr < 5e-3, "t={t} dr={dr}");
        }
    }

    #[test]
    fn analytic_body_rate_matches_finite_differences() {
        let truth = make_truth(&noiseless_config(), 5).unwrap();
        let h = 1e-6;
        for k in 0..50 {
            let t = 0.37 * k as f64 % 19.0;
            let num = (truth.analytic.rotation(t).transpose() * truth.analytic.rotation(t + h))
                .log()
                / h;
            let ana = truth.analytic.body_rate(t + 0.5 * h);
            assert!((num - ana).norm() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn noiseless_mocap_lies_on_truth() {
        let truth = make_truth(&noiseless_config(), 6).unwrap();
        let samples = sample_mocap(&truth, 300.0);
        for s in samples.iter().step_by(311) {
            let t = truth.clock_m.to_global(s.tau);
            let clean = truth.pose_b(t).compose(&truth.calib.t_b_m);
            assert!((s.pose.trans - clean.trans).norm() < 1e-12);
            assert!((s.pose.rot.matrix() - clean.rot.matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn mocap_noise_statistics_match_table() {
        let cfg = SimConfig { duration: 60.0, ..SimConfig::default() };
        let truth = make_truth(&cfg, 7).unwrap();
        let samples = sample_mocap(&truth, 300.0);
        assert!(samples.len() >= 18000);
        let mut sq_p = 0.0;
        let mut sq_r = 0.0;
        for s in &samples {
            let t = truth.clock_m.to_global(s.tau);
            let clean = truth.pose_b(t).compose(&truth.calib.t_b_m);
            sq_p += (s.pose.trans - clean.trans).norm_squared();
            sq_r += (clean.rot.transpose() * s.pose.rot).log().norm_squared();
        }
        // per-axis std over 3 axes
        let std_p = (sq_p / (3.0 * samples.len() as f64)).sqrt();
        let std_r = (sq_r / (3.0 * samples.len() as f64)).sqrt();
        assert!((std_p - 4.2e-4).abs() < 0.1 * 4.2e-4, "std_p={std_p}");
        let sr = 0.1_f64.to_radians();
        assert!((std_r - sr).abs() < 0.1 * sr, "std_r={std_r}");
    }

    #[test]
    fn static_truth_imu_reads_gravity() {
        let cfg = SimConfig {
            amplitude_scale: 0.0,
            randomize_intrinsics: false,
            ..noiseless_config()
        };
        let truth = make_truth(&cfg, 8).unwrap();
        let samples = sample_imu(&truth, 500.0);
        let r0 = truth.rot.eval(0.0).unwrap();
        let expect = r0.transpose() * Vector3::new(0.0, 0.0, 9.81) + truth.calib.bias_a0;
        for s in samples.iter().step_by(197) {
            assert!((s.omega - truth.calib.bias_w0).norm() < 1e-10);
            assert!((s.accel - expect).norm() < 1e-9, "{:?}", s.accel);
        }
    }

    #[test]
    fn imu_white_noise_levels_match_config() {
        let cfg = SimConfig { duration: 60.0, randomize_intrinsics: false, ..SimConfig::default() };
        let truth = make_truth(&cfg, 9).unwrap();
        let samples = sample_imu(&truth, 500.0);
        let (bias_w, bias_a) = imu_bias_walk(&truth, 500.0);
        let mut sq_w = 0.0;
        let mut sq_a = 0.0;
        for (k, s) in samples.iter().enumerate() {
            let rates = truth.rot.eval_rates(s.tau).unwrap();
            let clean_w = rates.omega + bias_w[k];
            let accel_p = truth.trans.eval(s.tau, 2).unwrap();
            let clean_a = rates.r.transpose() * (accel_p - truth.calib.g_p) + bias_a[k];
            sq_w += (s.omega - clean_w).norm_squared();
            sq_a += (s.accel - clean_a).norm_squared();
        }
        let std_w = (sq_w / (3.0 * samples.len() as f64)).sqrt();
        let std_a = (sq_a / (3.0 * samples.len() as f64)).sqrt();
        let gw = truth.config.noise.gyr_nd;
        let ga = truth.config.noise.acc_nd;
        assert!((std_w - gw).abs() < 0.1 * gw, "std_w={std_w} vs {gw}");
        assert!((std_a - ga).abs() < 0.1 * ga, "std_a={std_a} vs {ga}");
    }

    #[test]
    fn noiseless_dut_is_rigid_timeshifted_truth() {
        let truth = make_truth(&noiseless_config(), 10).unwrap();
        let samples = sample_dut(&truth, 90.0);
        // all samples related to truth by one constant H-frame offset
        let t0 = truth.clock_d.to_global(samples[0].tau);
        let offset = samples[0].pose.compose(&truth.pose_dut(t0).inverse());
        for s in samples.iter().step_by(83) {
            let t = truth.clock_d.to_global(s.tau);
            let expect = offset.compose(&truth.pose_dut(t));
            assert!((s.pose.trans - expect.trans).norm() < 1e-9);
            assert!((s.pose.rot.matrix() - expect.rot.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn dut_drift_magnitude_over_60s() {
        let cfg = SimConfig { duration: 60.0, ..SimConfig::default() };
        let mut final_rot = Vec::new();
        let mut final_trans = Vec::new();
        for seed in 0..20u64 {
            let truth = make_truth(&cfg, 100 + seed).unwrap();
            let samples = sample_dut(&truth, 90.0);
            let t0 = truth.clock_d.to_global(samples[0].tau);
            let offset = samples[0].pose.compose(&truth.pose_dut(t0).inverse());
            let last = samples.last().unwrap();
            let t = truth.clock_d.to_global(last.tau);
            let expect = offset.compose(&truth.pose_dut(t));
            final_rot.push((expect.rot.transpose() * last.pose.rot).log().norm());
            final_trans.push((last.pose.trans - expect.trans).norm());
        }
        let mean_r = final_rot.iter().sum::<f64>() / 20.0;
        let mean_p = final_trans.iter().sum::<f64>() / 20.0;
        assert!(
            (0.3_f64.to_radians()..3.0_f64.to_radians()).contains(&mean_r),
            "drift rot {} deg",
            mean_r.to_degrees()
        );
        assert!((3.0e-3..30.0e-3).contains(&mean_p), "drift trans {} mm", mean_p * 1e3);
    }

    #[test]
    fn dut_relative_error_much_smaller_than_drift() {
        let cfg = SimConfig { duration: 60.0, ..SimConfig::default() };
        let truth = make_truth(&cfg, 11).unwrap();
        let samples = sample_dut(&truth, 90.0);
        let t0 = truth.clock_d.to_global(samples[0].tau);
        let offset = samples[0].pose.compose(&truth.pose_dut(t0).inverse());
        let last = samples.last().unwrap();
        let t_last = truth.clock_d.to_global(last.tau);
        let drift =
            (offset.compose(&truth.pose_dut(t_last)).rot.transpose() * last.pose.rot).log().norm();
        // relative error over a 0.5 s window at the end of the sequence
        let i = samples.len() - 46;
        let j = samples.len() - 1;
        let rel_meas = samples[i].pose.relative_to(&samples[j].pose);
        let rel_true = truth
            .pose_dut(truth.clock_d.to_global(samples[i].tau))
            .relative_to(&truth.pose_dut(truth.clock_d.to_global(samples[j].tau)));
        let rel_err = (rel_true.rot.transpose() * rel_meas.rot).log().norm();
        assert!(drift > 10.0 * rel_err, "drift {drift} rel_err {rel_err}");
    }

    #[test]
    fn export_is_deterministic_and_roundtrips() {
        let cfg = SimConfig { duration: 2.0, ..SimConfig::default() };
        let truth = make_truth(&cfg, 12).unwrap();
        let set = sample_set(&truth);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        export_set(&truth, &set, d1.path()).unwrap();
        export_set(&truth, &set, d2.path()).unwrap();
        for name in ["mocap.tum", "imu.csv", "dut.tum", "truth.tum", "truth_dut.tum", "calib.txt"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} not byte-identical");
        }
        let mocap = io::parse_pose_file(&d1.path().join("mocap.tum")).unwrap();
        assert_eq!(mocap.len(), set.mocap.len());
        for (parsed, orig) in mocap.iter().zip(&set.mocap) {
            assert!((parsed.1.trans - orig.pose.trans).norm() < 1e-9);
        }
        let imu = io::parse_imu_file(&d1.path().join("imu.csv")).unwrap();
        assert_eq!(imu.len(), set.imu.len());
    }
}
