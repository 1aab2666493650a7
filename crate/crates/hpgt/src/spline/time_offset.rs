use nalgebra::Vector1;

use super::{EuclidSpline, KnotGrid, SplineError};

/// Piecewise-linear clock-offset spline: maps a sensor timestamp `tau` to the
/// global clock, `t = tau + offset(tau)`.
///
/// Linear (order 2) control points in seconds; the curve hits them exactly.
#[derive(Debug, Clone)]
pub struct TimeOffsetSpline {
    pub inner: EuclidSpline<1>,
}

impl TimeOffsetSpline {
    pub fn new(inner: EuclidSpline<1>) -> Self {
        assert_eq!(inner.order, 2, "time offset splines are linear");
        TimeOffsetSpline { inner }
    }

    /// Constant offset over `[start, end]` with the given knot spacing.
    pub fn constant(start: f64, end: f64, knot_dt: f64, offset: f64) -> Self {
        let grid = KnotGrid::covering(start, end, knot_dt, 2);
        TimeOffsetSpline {
            inner: EuclidSpline::constant(grid, 2, Vector1::new(offset)).unwrap(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        self.inner.domain()
    }

    pub fn offset(&self, tau: f64) -> Result<f64, SplineError> {
        Ok(self.inner.eval(tau, 0)?[0])
    }

    /// `t = tau + offset(tau)`.
    pub fn map_time(&self, tau: f64) -> Result<f64, SplineError> {
        Ok(tau + self.offset(tau)?)
    }

    /// Control points influencing `map_time(tau)` and their weights.
    pub fn control_weights(&self, tau: f64) -> Result<(usize, [f64; 2]), SplineError> {
        let (first, w) = self.inner.control_weights(tau, 0)?;
        Ok((first, [w[0], w[1]]))
    }

    /// Inverse clock map: the sensor timestamp whose mapped global time is
    /// `t`. Solved by fixed-point iteration; offsets vary slowly so a handful
    /// of sweeps reaches machine precision.
    pub fn unmap_time(&self, t: f64) -> Result<f64, SplineError> {
        let (lo, hi) = self.domain();
        let mut tau = t;
        for _ in 0..20 {
            let clamped = tau.clamp(lo, hi - 1e-12 * self.inner.grid.dt.max(1.0));
            let next = t - self.offset(clamped)?;
            if (next - tau).abs() < 1e-12 {
                return Ok(next);
            }
            tau = next;
        }
        Ok(tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_offsets_are_the_identity_map() {
        let s = TimeOffsetSpline::constant(0.0, 60.0, 20.0, 0.0);
        for tau in [0.0, 13.4, 59.9] {
            assert_abs_diff_eq!(s.map_time(tau).unwrap(), tau, epsilon = 1e-15);
        }
    }

    #[test]
    fn constant_offset_shifts_uniformly() {
        let s = TimeOffsetSpline::constant(0.0, 60.0, 20.0, 0.25);
        for tau in [0.0, 30.0, 59.0] {
            assert_abs_diff_eq!(s.map_time(tau).unwrap(), tau + 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_drift_interpolates_between_knots() {
        // 1 ms per minute drift: 0 at 0 s, 1 ms at 60 s.
        let grid = KnotGrid::new(0.0, 60.0, 3);
        let cps = (0..3).map(|i| Vector1::new(i as f64 * 1.0e-3)).collect();
        let s = TimeOffsetSpline::new(EuclidSpline::new(grid, 2, cps).unwrap());
        assert_abs_diff_eq!(s.map_time(30.0).unwrap(), 30.0005, epsilon = 1e-12);
        assert_abs_diff_eq!(s.map_time(60.0).unwrap(), 60.001, epsilon = 1e-12);
    }

    #[test]
    fn unmap_inverts_map() {
        let grid = KnotGrid::new(0.0, 20.0, 5);
        let cps = (0..5).map(|i| Vector1::new(0.01 + i as f64 * 2.0e-3)).collect();
        let s = TimeOffsetSpline::new(EuclidSpline::new(grid, 2, cps).unwrap());
        for tau in [0.5, 17.0, 42.0, 70.0] {
            let t = s.map_time(tau).unwrap();
            assert_abs_diff_eq!(s.unmap_time(t).unwrap(), tau, epsilon = 1e-10);
        }
    }
}
