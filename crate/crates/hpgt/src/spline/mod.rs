//! Cumulative B-splines: uniform knot grids, blending matrices, Euclidean and
//! SO(3) splines with analytic time derivatives, and linear time-offset
//! splines.
//!
//! A `k`-order spline at `t` inside segment `i` involves control points
//! `i .. i+k-1`. The cumulative basis vector is `B(u) = M~ U` where `M~` is the
//! row-cumulative sum of the standard uniform B-spline blending matrix and
//! `U = (1, u, ..., u^{k-1})`.

mod euclid;
mod fit;
mod so3;
mod time_offset;

pub use euclid::EuclidSpline;
pub use fit::{fit_euclid, fit_so3};
pub use so3::{So3Eval, So3Jacobians, So3Spline};
pub use time_offset::TimeOffsetSpline;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("unsupported B-spline order {0} (supported: 2, 3, 4)")]
    UnsupportedOrder(usize),
    #[error("time {t:.6} s outside spline domain [{lo:.6}, {hi:.6})")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },
    #[error("knot segment {segment} (starting {t_start:.6} s) has no sample")]
    InsufficientCoverage { segment: usize, t_start: f64 },
    #[error("fewer samples ({0}) than required for fitting")]
    TooFewSamples(usize),
}

/// Uniform knot grid: control point `i` sits at `t0 + i * dt`.
///
/// For order `k` the valid evaluation domain is the half-open interval
/// `[t0, t0 + (count - k + 1) * dt)`: segment `s` uses control points
/// `s .. s + k - 1`, so the last usable segment is `count - k`. Evaluation
/// tolerates `~1e-9 * dt` of slack at both ends to absorb roundoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGrid {
    pub t0: f64,
    pub dt: f64,
    pub count: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Self {
        assert!(dt > 0.0, "knot spacing must be positive");
        KnotGrid { t0, dt, count }
    }

    /// Smallest grid starting at `start` whose valid domain for `order`
    /// covers `[start, end]`.
    pub fn covering(start: f64, end: f64, dt: f64, order: usize) -> Self {
        assert!(end > start);
        // Ceiling keeps `end` inside the domain (via the evaluation slack at
        // the top edge when the span divides evenly) without adding a whole
        // segment past it: a trailing segment whose only samples sit at its
        // left edge would leave the last control point unconstrained.
        let segments = (((end - start) / dt - 1e-9).ceil() as usize).max(1);
        KnotGrid { t0: start, dt, count: segments + order - 1 }
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn segments(&self, order: usize) -> usize {
        self.count + 1 - order
    }

    pub fn domain(&self, order: usize) -> (f64, f64) {
        (self.t0, self.t0 + self.segments(order) as f64 * self.dt)
    }

    /// Segment index and normalized coordinate `u in [0, 1)` for `t`.
    pub fn locate(&self, t: f64, order: usize) -> Result<(usize, f64), SplineError> {
        let (lo, hi) = self.domain(order);
        let slack = 1e-9 * self.dt;
        if t < lo - slack || t >= hi + slack {
            return Err(SplineError::OutOfDomain { t, lo, hi });
        }
        let s_max = self.segments(order) - 1;
        let s = (((t - self.t0) / self.dt).floor().max(0.0) as usize).min(s_max);
        let u = ((t - self.knot_time(s)) / self.dt).clamp(0.0, 1.0);
        Ok((s, u))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Standard uniform B-spline blending matrix of order `k`:
/// `b_s(u) = sum_j M[s][j] u^j` for the `s`-th control point of the window.
pub fn uniform_blending_matrix(k: usize) -> Result<Vec<Vec<f64>>, SplineError> {
    if !(2..=4).contains(&k) {
        return Err(SplineError::UnsupportedOrder(k));
    }
    let mut fact = 1.0;
    for i in 2..k {
        fact *= i as f64;
    }
    let mut m = vec![vec![0.0; k]; k];
    for (s, row) in m.iter_mut().enumerate() {
        for (j, entry) in row.iter_mut().enumerate() {
            let mut sum = 0.0;
            for l in s..k {
                let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                sum += sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - j) as i32);
            }
            *entry = binomial(k - 1, j) / fact * sum;
        }
    }
    Ok(m)
}

/// Cumulative blending matrix: row `s` is the sum of rows `s..k` of the
/// standard matrix, so `B_0(u) = 1` and `B(u) = M~ U`.
pub fn blending_matrix(k: usize) -> Result<Vec<Vec<f64>>, SplineError> {
    let m = uniform_blending_matrix(k)?;
    let mut cum = vec![vec![0.0; k]; k];
    for s in 0..k {
        for j in 0..k {
            for row in &m[s..k] {
                cum[s][j] += row[j];
            }
        }
    }
    Ok(cum)
}

/// Cumulative basis values and first/second time derivatives at `u`.
///
/// Derivatives include the `1/dt` chain-rule factors, so they are true time
/// derivatives.
pub fn cumulative_basis(k: usize, u: f64, dt: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let m = match k {
        2 => CUM_M2.as_slice(),
        3 => CUM_M3.as_slice(),
        4 => CUM_M4.as_slice(),
        _ => panic!("unsupported order {k}"),
    };
    let mut b = [0.0; 4];
    let mut db = [0.0; 4];
    let mut ddb = [0.0; 4];
    let pow = [1.0, u, u * u, u * u * u];
    for s in 0..k {
        for j in 0..k {
            let c = m[s * k + j];
            b[s] += c * pow[j];
            if j >= 1 {
                db[s] += c * j as f64 * pow[j - 1];
            }
            if j >= 2 {
                ddb[s] += c * (j * (j - 1)) as f64 * pow[j - 2];
            }
        }
        db[s] /= dt;
        ddb[s] /= dt * dt;
    }
    (b, db, ddb)
}

// Cumulative blending matrices, flattened row-major; values produced by
// blending_matrix() and checked against the de Boor recurrence in tests.
const CUM_M2: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
const CUM_M3: [f64; 9] = [
    1.0, 0.0, 0.0, //
    0.5, 1.0, -0.5, //
    0.0, 0.0, 0.5,
];
const CUM_M4: [f64; 16] = [
    1.0, 0.0, 0.0, 0.0, //
    5.0 / 6.0, 0.5, -0.5, 1.0 / 6.0, //
    1.0 / 6.0, 0.5, 0.5, -1.0 / 3.0, //
    0.0, 0.0, 0.0, 1.0 / 6.0,
];
