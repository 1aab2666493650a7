//! Coarse constant time-offset initialization between any two sensor streams
//! by cross-correlating angular-rate magnitude signals.

use thiserror::Error;

use crate::geometry::Pose;
use crate::io::ImuSample;

/// Default resample rate for the correlation signals (Hz).
pub const SYNC_RATE_HZ: f64 = 100.0;
/// Default correlation search window (s).
pub const SYNC_MAX_LAG: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("need at least 3 samples to build a rate signal, got {0}")]
    TooFewSamples(usize),
    #[error("signals do not overlap in time")]
    NoOverlap,
    #[error("signal variance below 1e-12: no motion excitation")]
    FlatSignal,
}

/// Uniformly resampled scalar signal.
#[derive(Debug, Clone)]
pub struct RateSignal {
    pub t0: f64,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

impl RateSignal {
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.rate_hz
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.values.len().saturating_sub(1))
    }
}

/// Linear resampling of an irregular `(t, v)` series onto a uniform grid.
fn resample(points: &[(f64, f64)], rate_hz: f64) -> RateSignal {
    let t0 = points[0].0;
    let t1 = points[points.len() - 1].0;
    let n = ((t1 - t0) * rate_hz).floor() as usize + 1;
    let mut values = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let t = t0 + i as f64 / rate_hz;
        while j + 2 < points.len() && points[j + 1].0 <= t {
            j += 1;
        }
        let (ta, va) = points[j];
        let (tb, vb) = points[j + 1];
        let u = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        values.push(va + u * (vb - va));
    }
    RateSignal { t0, rate_hz, values }
}

/// Angular-rate magnitude of a pose stream: per-interval
/// `||Log(R_i^T R_{i+1})|| / (tau_{i+1} - tau_i)` timestamped at interval
/// midpoints, then resampled to `rate_hz`.
pub fn angular_rate_signal(poses: &[(f64, Pose)], rate_hz: f64) -> Result<RateSignal, SyncError> {
    if poses.len() < 3 {
        return Err(SyncError::TooFewSamples(poses.len()));
    }
    let mut points = Vec::with_capacity(poses.len() - 1);
    for w in poses.windows(2) {
        let (ta, pa) = &w[0];
        let (tb, pb) = &w[1];
        let speed = (pa.rot.transpose() * pb.rot).log().norm() / (tb - ta);
        points.push((0.5 * (ta + tb), speed));
    }
    Ok(resample(&points, rate_hz))
}

/// Angular-rate magnitude of an IMU stream, resampled to `rate_hz`.
pub fn imu_rate_signal(imu: &[ImuSample], rate_hz: f64) -> Result<RateSignal, SyncError> {
    if imu.len() < 3 {
        return Err(SyncError::TooFewSamples(imu.len()));
    }
    let points: Vec<(f64, f64)> = imu.iter().map(|s| (s.tau, s.omega.norm())).collect();
    Ok(resample(&points, rate_hz))
}

/// Offset `dt` such that `b(tau) ~ a(tau + dt)`: argmax of the normalized
/// cross-correlation over integer lags in `[-max_lag, max_lag]`, refined to
/// sub-sample precision by parabolic interpolation of the peak.
pub fn cross_correlate_offset(
    sig_a: &RateSignal,
    sig_b: &RateSignal,
    rate_hz: f64,
    max_lag: f64,
) -> Result<f64, SyncError> {
    if sig_a.t0 > sig_b.t_end() || sig_b.t0 > sig_a.t_end() {
        return Err(SyncError::NoOverlap);
    }
    let center = |v: &[f64]| -> Result<Vec<f64>, SyncError> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let var = centered.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        if var < 1e-12 {
            return Err(SyncError::FlatSignal);
        }
        let scale = var.sqrt();
        Ok(centered.iter().map(|x| x / scale).collect())
    };
    let a = center(&sig_a.values)?;
    let b = center(&sig_b.values)?;

    // Integer start-time misalignment of the two grids, in samples of b
    // relative to a: b[j] sits at time sig_b.time(j).
    let grid_shift = (sig_b.t0 - sig_a.t0) * rate_hz;
    let max_lag_samples = (max_lag * rate_hz).round() as i64;
    let mut best = (f64::NEG_INFINITY, 0i64);
    let mut scores = std::collections::HashMap::new();
    let score_at = |lag: i64, scores: &mut std::collections::HashMap<i64, f64>| -> f64 {
        *scores.entry(lag).or_insert_with(|| {
            // correlate a[i] against b at time a_i + lag/rate: b index
            // j = i + lag - grid_shift (rounded).
            let shift = lag - grid_shift.round() as i64;
            let mut num = 0.0;
            let mut count = 0usize;
            for (i, &av) in a.iter().enumerate() {
                let j = i as i64 + shift;
                if j >= 0 && (j as usize) < b.len() {
                    num += av * b[j as usize];
                    count += 1;
                }
            }
            if count == 0 {
                f64::NEG_INFINITY
            } else {
                num / count as f64
            }
        })
    };
    for lag in -max_lag_samples..=max_lag_samples {
        let s = score_at(lag, &mut scores);
        if s > best.0 {
            best = (s, lag);
        }
    }
    if !best.0.is_finite() {
        return Err(SyncError::NoOverlap);
    }
    // Parabolic refinement around the integer peak.
    let (c0, lag) = best;
    let cm = score_at(lag - 1, &mut scores);
    let cp = score_at(lag + 1, &mut scores);
    let mut delta = 0.0;
    if cm.is_finite() && cp.is_finite() {
        let denom = cm - 2.0 * c0 + cp;
        if denom.abs() > 1e-15 {
            delta = (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
        }
    }
    // b[i + lag - round(grid_shift)] matching a[i] means
    // b(tau) ~ a(tau - (lag + round_err)/rate), so the reported offset flips
    // sign; round_err restores the fractional grid misalignment swallowed by
    // the rounding above.
    let round_err = grid_shift - grid_shift.round();
    Ok(-(lag as f64 + delta + round_err) / rate_hz)
}
