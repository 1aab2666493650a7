//! Measurement containers and the on-disk formats: TUM trajectory files for
//! pose streams, CSV for IMU samples, and a plain-text key=value noise
//! configuration.
//!
//! Quaternions are stored `qx qy qz qw` on disk (TUM order) and converted to
//! the internal scalar-first convention at the parse/write boundary.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Pose, UnitQuaternion};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}: parse error: {msg}")]
    ParseError { path: String, line: usize, msg: String },
    #[error("{path}:{line}: timestamps not strictly increasing")]
    NonMonotonicTime { path: String, line: usize },
    #[error("{path}:{line}: quaternion norm deviates from 1 by more than 1e-3")]
    BadQuaternion { path: String, line: usize },
    #[error("empty or single-sample stream: {0}")]
    EmptyStream(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// MoCap pose sample: frame M (marker body) expressed in frame P (MoCap
/// world), timestamped on the MoCap clock.
#[derive(Debug, Clone, Copy)]
pub struct MoCapSample {
    pub tau: f64,
    pub pose: Pose,
}

/// IMU sample on the IMU clock: body angular velocity (rad/s) and specific
/// force (m/s^2).
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub tau: f64,
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// DUT pose sample: frame D in the DUT's own drifting odometry frame H,
/// timestamped on the DUT clock.
#[derive(Debug, Clone, Copy)]
pub struct DutSample {
    pub tau: f64,
    pub pose: Pose,
}

/// Discrete-time noise parameters of the three sensor streams.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    /// MoCap translation noise per axis (m).
    pub mocap_sigma_p: f64,
    /// MoCap rotation noise per axis (rad).
    pub mocap_sigma_r: f64,
    /// Accelerometer white noise per axis per sample (m/s^2).
    pub acc_nd: f64,
    /// Accelerometer bias random walk per sqrt-second (m/s^2).
    pub acc_rw: f64,
    /// Gyroscope white noise per axis per sample (rad/s).
    pub gyr_nd: f64,
    /// Gyroscope bias random walk per sqrt-second (rad/s).
    pub gyr_rw: f64,
    /// Sensor clock drift rate (s/s).
    pub clock_drift: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mocap_sigma_p: 4.2e-4,
            mocap_sigma_r: 0.1_f64.to_radians(),
            acc_nd: 1.1e-2,
            acc_rw: 2.1e-6,
            gyr_nd: (4.8e-2_f64).to_radians(),
            gyr_rw: (1.4e-5_f64).to_radians(),
            clock_drift: 1.0e-3 / 60.0,
        }
    }
}

/// One complete dataset: the three time-stamped streams plus their noise
/// description. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub mocap: Vec<MoCapSample>,
    pub imu: Vec<ImuSample>,
    pub dut: Vec<DutSample>,
    pub noise: NoiseSpec,
}

/// Summary of a dataset inspection: per-stream rates, gaps larger than three
/// nominal periods, and the common overlap window.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub mocap_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub dut_rate_hz: f64,
    /// Gaps per stream as (stream name, gap start, gap end).
    pub gaps: Vec<(String, f64, f64)>,
    /// Streams whose spacing jitter exceeds 5% of the nominal period.
    pub jitter_warnings: Vec<String>,
    /// Intersection of the per-stream time spans (raw clocks).
    pub overlap: (f64, f64),
}

fn open(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64, IoError> {
    let v: f64 = tok.parse().map_err(|_| IoError::ParseError {
        path: path.display().to_string(),
        line,
        msg: format!("invalid number `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(IoError::ParseError {
            path: path.display().to_string(),
            line,
            msg: format!("non-finite value `{tok}`"),
        });
    }
    Ok(v)
}

/// Parses a TUM trajectory file: `t px py pz qx qy qz qw` per line, `#`
/// comments and blank lines allowed. Quaternions within 1e-3 of unit norm are
/// renormalized; anything further off is rejected.
pub fn parse_pose_file(path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    let text = open(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(IoError::ParseError {
                path: path.display().to_string(),
                line,
                msg: format!("expected 8 fields, got {}", toks.len()),
            });
        }
        let mut v = [0.0; 8];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = parse_f64(tok, path, line)?;
        }
        let (t, px, py, pz) = (v[0], v[1], v[2], v[3]);
        let (qx, qy, qz, qw) = (v[4], v[5], v[6], v[7]);
        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(IoError::BadQuaternion { path: path.display().to_string(), line });
        }
        if let Some((prev, _)) = out.last() {
            if t <= *prev {
                return Err(IoError::NonMonotonicTime { path: path.display().to_string(), line });
            }
        }
        let q = UnitQuaternion::new_normalize(qw, qx, qy, qz);
        out.push((t, Pose::new(q.to_rotation(), Vector3::new(px, py, pz))));
    }
    Ok(out)
}

/// Parses an IMU CSV file: `t,wx,wy,wz,ax,ay,az` per line (SI units), `#`
/// comments allowed.
pub fn parse_imu_file(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let text = open(path)?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if toks.len() != 7 {
            return Err(IoError::ParseError {
                path: path.display().to_string(),
                line,
                msg: format!("expected 7 comma-separated fields, got {}", toks.len()),
            });
        }
        let mut v = [0.0; 7];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = parse_f64(tok, path, line)?;
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.tau {
                return Err(IoError::NonMonotonicTime { path: path.display().to_string(), line });
            }
        }
        out.push(ImuSample {
            tau: v[0],
            omega: Vector3::new(v[1], v[2], v[3]),
            accel: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

/// Writes poses in the TUM trajectory format readable by [`parse_pose_file`].
/// 17 significant digits keep the write-parse roundtrip lossless.
pub fn write_trajectory(path: &Path, samples: &[(f64, Pose)]) -> Result<(), IoError> {
    let mut text = String::with_capacity(samples.len() * 160);
    text.push_str("# t px py pz qx qy qz qw\n");
    for (t, pose) in samples {
        let q = pose.rot.to_quaternion().hemisphere_normalized();
        let p = pose.trans;
        writeln!(
            text,
            "{t:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            p[0], p[1], p[2], q.x, q.y, q.z, q.w
        )
        .expect("string write cannot fail");
    }
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes IMU samples in the CSV format readable by [`parse_imu_file`].
pub fn write_imu_file(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut text = String::with_capacity(samples.len() * 140);
    text.push_str("# t,wx,wy,wz,ax,ay,az\n");
    for s in samples {
        writeln!(
            text,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            s.tau, s.omega[0], s.omega[1], s.omega[2], s.accel[0], s.accel[1], s.accel[2]
        )
        .expect("string write cannot fail");
    }
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn stream_stats(
    name: &str,
    times: &[f64],
    gaps: &mut Vec<(String, f64, f64)>,
    jitter: &mut Vec<String>,
) -> Result<f64, IoError> {
    if times.len() < 2 {
        return Err(IoError::EmptyStream(name.to_string()));
    }
    let span = times[times.len() - 1] - times[0];
    let nominal = span / (times.len() - 1) as f64;
    let mut max_dev: f64 = 0.0;
    for w in times.windows(2) {
        let dt = w[1] - w[0];
        if dt > 3.0 * nominal {
            gaps.push((name.to_string(), w[0], w[1]));
        }
        max_dev = max_dev.max((dt - nominal).abs());
    }
    if max_dev > 0.05 * nominal {
        jitter.push(name.to_string());
    }
    Ok(1.0 / nominal)
}

/// Inspects a dataset without modifying it: reports stream rates, gaps above
/// three nominal periods, jitter warnings and the overlap window.
pub fn validate(set: &MeasurementSet) -> Result<ValidationReport, IoError> {
    let mocap_t: Vec<f64> = set.mocap.iter().map(|s| s.tau).collect();
    let imu_t: Vec<f64> = set.imu.iter().map(|s| s.tau).collect();
    let dut_t: Vec<f64> = set.dut.iter().map(|s| s.tau).collect();
    let mut gaps = Vec::new();
    let mut jitter = Vec::new();
    let mocap_rate = stream_stats("mocap", &mocap_t, &mut gaps, &mut jitter)?;
    let imu_rate = stream_stats("imu", &imu_t, &mut gaps, &mut jitter)?;
    let dut_rate = stream_stats("dut", &dut_t, &mut gaps, &mut jitter)?;
    let overlap = (
        mocap_t[0].max(imu_t[0]).max(dut_t[0]),
        mocap_t[mocap_t.len() - 1]
            .min(imu_t[imu_t.len() - 1])
            .min(dut_t[dut_t.len() - 1]),
    );
    Ok(ValidationReport {
        mocap_rate_hz: mocap_rate,
        imu_rate_hz: imu_rate,
        dut_rate_hz: dut_rate,
        gaps,
        jitter_warnings: jitter,
        overlap,
    })
}

impl MeasurementSet {
    /// Rebases all streams by the earliest timestamp when the recording start
    /// is more than a day from zero, preserving inter-stream offsets while
    /// restoring float precision.
    pub fn rebased(mut self) -> (Self, f64) {
        let starts = [
            self.mocap.first().map(|s| s.tau),
            self.imu.first().map(|s| s.tau),
            self.dut.first().map(|s| s.tau),
        ];
        let t0 = starts.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        if !t0.is_finite() || t0 < 86_400.0 {
            return (self, 0.0);
        }
        for s in &mut self.mocap {
            s.tau -= t0;
        }
        for s in &mut self.imu {
            s.tau -= t0;
        }
        for s in &mut self.dut {
            s.tau -= t0;
        }
        (self, t0)
    }
}
