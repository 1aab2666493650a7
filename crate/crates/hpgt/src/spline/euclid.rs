use nalgebra::SVector;

use super::{cumulative_basis, KnotGrid, SplineError};

/// Uniform B-spline in R^N, cumulative form.
#[derive(Debug, Clone)]
pub struct EuclidSpline<const N: usize> {
    pub grid: KnotGrid,
    pub order: usize,
    pub cps: Vec<SVector<f64, N>>,
}

impl<const N: usize> EuclidSpline<N> {
    pub fn new(grid: KnotGrid, order: usize, cps: Vec<SVector<f64, N>>) -> Result<Self, SplineError> {
        if !(2..=4).contains(&order) {
            return Err(SplineError::UnsupportedOrder(order));
        }
        assert_eq!(cps.len(), grid.count, "control point count must match grid");
        Ok(EuclidSpline { grid, order, cps })
    }

    /// Spline with every control point equal to `value`.
    pub fn constant(grid: KnotGrid, order: usize, value: SVector<f64, N>) -> Result<Self, SplineError> {
        let cps = vec![value; grid.count];
        EuclidSpline::new(grid, order, cps)
    }

    pub fn domain(&self) -> (f64, f64) {
        self.grid.domain(self.order)
    }

    /// Per-control-point weights of the evaluation at `t`: returns the first
    /// involved control point index and `order` weights such that
    /// `p^(deriv)(t) = sum_s w[s] * cp[first + s]`.
    pub fn control_weights(&self, t: f64, deriv: usize) -> Result<(usize, [f64; 4]), SplineError> {
        let (seg, u) = self.grid.locate(t, self.order)?;
        let (b, db, ddb) = cumulative_basis(self.order, u, self.grid.dt);
        let cb = match deriv {
            0 => b,
            1 => db,
            2 => ddb,
            _ => panic!("derivative order {deriv} not supported"),
        };
        // Convert cumulative weights to plain per-cp weights:
        // value = B_0 * cp_0 + sum_{j>=1} B_j (cp_j - cp_{j-1})
        //       = sum_s (B_s - B_{s+1}) cp_s   with B_k = 0.
        let mut w = [0.0; 4];
        for s in 0..self.order {
            let next = if s + 1 < self.order { cb[s + 1] } else { 0.0 };
            w[s] = cb[s] - next;
        }
        Ok((seg, w))
    }

    /// Value (`deriv = 0`) or analytic first/second time derivative.
    pub fn eval(&self, t: f64, deriv: usize) -> Result<SVector<f64, N>, SplineError> {
        let (first, w) = self.control_weights(t, deriv)?;
        let mut out = SVector::<f64, N>::zeros();
        for s in 0..self.order {
            out += w[s] * self.cps[first + s];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn sin_spline(order: usize) -> EuclidSpline<3> {
        let grid = KnotGrid::new(0.0, 0.1, 64);
        let cps = (0..grid.count)
            .map(|i| {
                let t = grid.knot_time(i);
                Vector3::new((1.3 * t).sin(), (0.7 * t).cos(), 0.2 * t)
            })
            .collect();
        EuclidSpline::new(grid, order, cps).unwrap()
    }

    #[test]
    fn constant_spline_is_constant_with_zero_derivatives() {
        let grid = KnotGrid::new(0.0, 0.5, 10);
        let c = Vector3::new(1.0, -2.0, 3.0);
        for order in [2, 4] {
            let s = EuclidSpline::constant(grid, order, c).unwrap();
            for t in [0.0, 0.3, 1.7, 3.2] {
                assert_abs_diff_eq!(s.eval(t, 0).unwrap(), c, epsilon = 1e-14);
                assert_abs_diff_eq!(s.eval(t, 1).unwrap(), Vector3::zeros(), epsilon = 1e-12);
                assert_abs_diff_eq!(s.eval(t, 2).unwrap(), Vector3::zeros(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_control_points_give_constant_slope() {
        let grid = KnotGrid::new(0.0, 0.25, 12);
        let delta = Vector3::new(0.5, -0.1, 2.0);
        for order in [2, 3, 4] {
            let cps = (0..grid.count).map(|i| delta * i as f64).collect();
            let s = EuclidSpline::new(grid, order, cps).unwrap();
            for t in [0.0, 0.4, 1.1, 2.0] {
                assert_abs_diff_eq!(s.eval(t, 1).unwrap(), delta / 0.25, epsilon = 1e-10);
                assert_abs_diff_eq!(s.eval(t, 2).unwrap(), Vector3::zeros(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn order2_hits_control_points_at_knots() {
        let s = sin_spline(2);
        for i in 1..40 {
            let t = s.grid.knot_time(i);
            assert_abs_diff_eq!(s.eval(t, 0).unwrap(), s.cps[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn derivatives_match_central_finite_differences() {
        for order in [2, 3, 4] {
            let s = sin_spline(order);
            let h = 1e-5 * s.grid.dt;
            for n in 0..200 {
                // stay inside one segment (derivatives of low orders are
                // discontinuous at knots) and away from domain boundaries
                let t = 0.3037 + n as f64 * 0.025;
                let f = |x: f64| s.eval(x, 0).unwrap();
                let d1 = (f(t + h) - f(t - h)) / (2.0 * h);
                let a1 = s.eval(t, 1).unwrap();
                assert!((a1 - d1).norm() <= 1e-6 * a1.norm().max(1.0), "order {order} t {t}");
                if order > 2 {
                    // Larger step for the second difference: the spline is
                    // polynomial inside a segment, so only roundoff matters.
                    let h2 = 1e-3 * s.grid.dt;
                    let d2 = (f(t + h2) - 2.0 * f(t) + f(t - h2)) / (h2 * h2);
                    let a2 = s.eval(t, 2).unwrap();
                    assert!((a2 - d2).norm() <= 1e-6 * a2.norm().max(1.0), "order {order} t {t}");
                }
            }
        }
    }

    #[test]
    fn locality_of_control_points() {
        let mut s = sin_spline(4);
        let probe: Vec<f64> = (0..50).map(|i| 0.05 + i as f64 * 0.11).collect();
        let base: Vec<Vector3<f64>> = probe.iter().map(|&t| s.eval(t, 0).unwrap()).collect();
        let idx = 30;
        s.cps[idx] += Vector3::new(1.0, 1.0, 1.0);
        for (&t, b) in probe.iter().zip(&base) {
            let now = s.eval(t, 0).unwrap();
            let (first, _) = s.control_weights(t, 0).unwrap();
            let touched = (first..first + 4).contains(&idx);
            if touched {
                assert!((now - b).norm() > 0.0);
            } else {
                assert_eq!(now, *b, "cp {idx} must not affect t={t}");
            }
        }
    }

    #[test]
    fn out_of_domain_is_reported() {
        let s = sin_spline(4);
        let (lo, hi) = s.domain();
        assert!(matches!(s.eval(hi + 0.1, 0), Err(SplineError::OutOfDomain { .. })));
        assert!(matches!(s.eval(lo - 0.1, 0), Err(SplineError::OutOfDomain { .. })));
    }
}
