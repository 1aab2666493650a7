use nalgebra::{Matrix3, Vector3};

use super::{cumulative_basis, KnotGrid, SplineError};
use crate::geometry::{left_jacobian_inv, right_jacobian, right_jacobian_inv, skew, Rotation};

/// Cumulative B-spline on SO(3), order 4.
///
/// `R(t) = R_i * prod_j Exp(B_j(u) Log(R_{i+j-1}^T R_{i+j}))` over the three
/// increments of the active window.
#[derive(Debug, Clone)]
pub struct So3Spline {
    pub grid: KnotGrid,
    pub cps: Vec<Rotation>,
}

pub const SO3_ORDER: usize = 4;

/// Value and body-rate data at one sample time.
#[derive(Debug, Clone)]
pub struct So3Eval {
    /// First control point of the active window.
    pub first: usize,
    pub r: Rotation,
    /// Body angular velocity, `(R^T Rdot)^vee` (rad/s).
    pub omega: Vector3<f64>,
    /// Body angular acceleration (rad/s^2).
    pub omega_dot: Vector3<f64>,
}

impl So3Eval {
    pub fn r_dot(&self) -> Matrix3<f64> {
        self.r.matrix() * skew(&self.omega)
    }

    pub fn r_ddot(&self) -> Matrix3<f64> {
        let w = skew(&self.omega);
        self.r.matrix() * (w * w + skew(&self.omega_dot))
    }
}

/// Analytic derivatives of the spline value and body rate with respect to
/// right-multiplied perturbations of the four window control points.
#[derive(Debug, Clone)]
pub struct So3Jacobians {
    pub eval: So3Eval,
    /// `d phi / d eps_k` where `R(t) <- R(t) Exp(phi)` and `cp_k <- cp_k Exp(eps_k)`.
    pub dphi_dcp: [Matrix3<f64>; 4],
    /// `d omega / d eps_k`.
    pub domega_dcp: [Matrix3<f64>; 4],
}

impl So3Spline {
    pub fn new(grid: KnotGrid, cps: Vec<Rotation>) -> Result<Self, SplineError> {
        assert_eq!(cps.len(), grid.count, "control point count must match grid");
        Ok(So3Spline { grid, cps })
    }

    pub fn constant(grid: KnotGrid, value: Rotation) -> Self {
        let cps = vec![value; grid.count];
        So3Spline { grid, cps }
    }

    pub fn domain(&self) -> (f64, f64) {
        self.grid.domain(SO3_ORDER)
    }

    fn window(&self, t: f64) -> Result<(usize, f64), SplineError> {
        self.grid.locate(t, SO3_ORDER)
    }

    pub fn eval(&self, t: f64) -> Result<Rotation, SplineError> {
        let (seg, u) = self.window(t)?;
        let (b, _, _) = cumulative_basis(SO3_ORDER, u, self.grid.dt);
        let mut r = self.cps[seg];
        for j in 1..SO3_ORDER {
            let d = (self.cps[seg + j - 1].transpose() * self.cps[seg + j]).log();
            r = r * Rotation::exp(b[j] * d);
        }
        Ok(r)
    }

    /// Value plus body angular velocity and acceleration.
    pub fn eval_rates(&self, t: f64) -> Result<So3Eval, SplineError> {
        let (seg, u) = self.window(t)?;
        let (b, db, ddb) = cumulative_basis(SO3_ORDER, u, self.grid.dt);
        let mut r = self.cps[seg];
        let mut w = Vector3::zeros();
        let mut wdot = Vector3::zeros();
        for j in 1..SO3_ORDER {
            let d = (self.cps[seg + j - 1].transpose() * self.cps[seg + j]).log();
            let a = Rotation::exp(b[j] * d);
            let at = a.transpose();
            let bd = db[j] * d;
            // omega recursion: w_j = A_j^T w_{j-1} + Bdot_j d_j
            let w_prev = at * w;
            let wdot_prev = at * wdot;
            wdot = wdot_prev - bd.cross(&w_prev) + ddb[j] * d;
            w = w_prev + bd;
            r = r * a;
        }
        Ok(So3Eval { first: seg, r, omega: w, omega_dot: wdot })
    }

    /// Full evaluation with control-point Jacobians, used by the residual
    /// blocks and the SO(3) fitting sweeps.
    pub fn eval_jacobians(&self, t: f64) -> Result<So3Jacobians, SplineError> {
        let (seg, u) = self.window(t)?;
        let (b, db, ddb) = cumulative_basis(SO3_ORDER, u, self.grid.dt);

        let mut d = [Vector3::zeros(); SO3_ORDER]; // d[j], j = 1..3
        let mut a = [Rotation::identity(); SO3_ORDER]; // A_j = Exp(B_j d_j)
        for j in 1..SO3_ORDER {
            d[j] = (self.cps[seg + j - 1].transpose() * self.cps[seg + j]).log();
            a[j] = Rotation::exp(b[j] * d[j]);
        }

        // Forward recursion for value and rates, keeping the pre-update
        // angular velocity of each level for the Jacobian terms.
        let mut r = self.cps[seg];
        let mut w = Vector3::zeros();
        let mut wdot = Vector3::zeros();
        let mut w_in = [Vector3::zeros(); SO3_ORDER]; // A_j^T w_{j-1}
        for j in 1..SO3_ORDER {
            let at = a[j].transpose();
            let w_prev = at * w;
            w_in[j] = w_prev;
            let wdot_prev = at * wdot;
            let bd = db[j] * d[j];
            wdot = wdot_prev - bd.cross(&w_prev) + ddb[j] * d[j];
            w = w_prev + bd;
            r = r * a[j];
        }

        // Tail products T_j = (A_{j+1} ... A_3)^T; T_3 = I.
        let mut tail = [Matrix3::<f64>::identity(); SO3_ORDER];
        for j in (1..SO3_ORDER - 1).rev() {
            tail[j] = tail[j + 1] * a[j + 1].matrix().transpose();
        }
        let full_tail = tail[1] * a[1].matrix().transpose(); // (A_1 A_2 A_3)^T

        // Per-increment sensitivities. For a perturbation Delta of d_j:
        //   value:  d phi = C_j Delta,  C_j = T_j Jr(B_j d_j) B_j
        //   omega:  d w   = T_j G_j Delta,
        //           G_j = skew(A_j^T w_{j-1}) Jr(B_j d_j) B_j + Bdot_j I
        let mut c = [Matrix3::<f64>::zeros(); SO3_ORDER];
        let mut g = [Matrix3::<f64>::zeros(); SO3_ORDER];
        for j in 1..SO3_ORDER {
            let jr = right_jacobian(&(b[j] * d[j]));
            c[j] = tail[j] * jr * b[j];
            g[j] = tail[j] * (skew(&w_in[j]) * jr * b[j] + Matrix3::identity() * db[j]);
        }

        // Chain to control-point perturbations:
        //   d_j = Log(R_{j-1}^T R_j):  d d_j / d eps_j = Jr^{-1}(d_j),
        //                              d d_j / d eps_{j-1} = -Jl^{-1}(d_j).
        let mut dphi = [Matrix3::<f64>::zeros(); 4];
        let mut domega = [Matrix3::<f64>::zeros(); 4];
        dphi[0] = full_tail;
        for j in 1..SO3_ORDER {
            let jr_inv = right_jacobian_inv(&d[j]);
            let jl_inv = left_jacobian_inv(&d[j]);
            dphi[j] += c[j] * jr_inv;
            dphi[j - 1] -= c[j] * jl_inv;
            domega[j] += g[j] * jr_inv;
            domega[j - 1] -= g[j] * jl_inv;
        }

        Ok(So3Jacobians {
            eval: So3Eval { first: seg, r, omega: w, omega_dot: wdot },
            dphi_dcp: dphi,
            domega_dcp: domega,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_axis(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0f64..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() > 1e-2 {
                return v.normalize();
            }
        }
    }

    fn wobbly_spline(seed: u64) -> So3Spline {
        let mut rng = StdRng::seed_from_u64(seed);
        let grid = KnotGrid::new(0.0, 0.1, 40);
        let mut cps = vec![Rotation::exp(random_axis(&mut rng) * 0.3)];
        for _ in 1..grid.count {
            let step = random_axis(&mut rng) * rng.gen_range(0.0..0.4);
            let prev = *cps.last().unwrap();
            cps.push(prev * Rotation::exp(step));
        }
        So3Spline::new(grid, cps).unwrap()
    }

    #[test]
    fn constant_spline() {
        let grid = KnotGrid::new(0.0, 0.5, 10);
        let r0 = Rotation::exp(Vector3::new(0.3, -0.2, 0.9));
        let s = So3Spline::constant(grid, r0);
        for t in [0.0, 0.7, 2.3, 3.1] {
            let e = s.eval_rates(t).unwrap();
            assert!((e.r.matrix() - r0.matrix()).abs().max() < 1e-14);
            assert!(e.omega.norm() < 1e-14);
            assert!(e.r_dot().abs().max() < 1e-13);
            assert!(e.r_ddot().abs().max() < 1e-13);
        }
    }

    #[test]
    fn constant_rate_rotation_reproduces_geodesic() {
        // Control points sampled from R(t) = Exp(w0 * t): all increments are
        // collinear, so the cumulative spline reproduces the geodesic exactly
        // up to the one-knot advance of the order-4 window (the cumulative
        // weights of the three increments sum to 1 + u).
        let w0 = Vector3::new(0.0, 0.0, 0.8);
        let grid = KnotGrid::new(0.0, 0.2, 30);
        let cps = (0..grid.count)
            .map(|i| Rotation::exp(w0 * grid.knot_time(i)))
            .collect();
        let s = So3Spline::new(grid, cps).unwrap();
        for i in 2..20 {
            let t = grid.knot_time(i);
            let e = s.eval(t).unwrap();
            let truth = Rotation::exp(w0 * (t + grid.dt));
            assert!((e.matrix() - truth.matrix()).abs().max() < 1e-9);
        }
        // body rate at segment interiors
        for t in [0.31, 1.07, 2.55] {
            let e = s.eval_rates(t).unwrap();
            assert_abs_diff_eq!(e.omega, w0, epsilon = 1e-6);
        }
    }

    #[test]
    fn continuity_at_knots() {
        let s = wobbly_spline(5);
        for i in 4..30 {
            let t = s.grid.knot_time(i);
            let left = s.eval(t - 1e-10).unwrap();
            let right = s.eval(t + 1e-10).unwrap();
            assert!((left.matrix() - right.matrix()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn output_stays_on_manifold() {
        let s = wobbly_spline(6);
        let mut rng = StdRng::seed_from_u64(99);
        let (lo, hi) = s.domain();
        for _ in 0..10_000 {
            let t = rng.gen_range(lo..hi - 1e-9);
            let r = s.eval(t).unwrap();
            assert!(r.orthonormality_defect() < 1e-9);
        }
    }

    #[test]
    fn rdot_matches_finite_differences() {
        let s = wobbly_spline(7);
        let h = 1e-6;
        for n in 0..40 {
            let t = 0.35 + n as f64 * 0.08;
            let e = s.eval_rates(t).unwrap();
            let num =
                (s.eval(t + h).unwrap().matrix() - s.eval(t - h).unwrap().matrix()) / (2.0 * h);
            let ana = e.r_dot();
            let scale = ana.abs().max().max(1.0);
            assert!((num - ana).abs().max() / scale < 1e-6, "t={t}");
        }
    }

    #[test]
    fn rddot_matches_finite_differences() {
        let s = wobbly_spline(8);
        let h = 1e-4;
        for n in 0..40 {
            let t = 0.35 + n as f64 * 0.08;
            let e = s.eval_rates(t).unwrap();
            let num = (s.eval(t + h).unwrap().matrix() - 2.0 * e.r.matrix()
                + s.eval(t - h).unwrap().matrix())
                / (h * h);
            let ana = e.r_ddot();
            let scale = ana.abs().max().max(1.0);
            assert!((num - ana).abs().max() / scale < 1e-5, "t={t}");
        }
    }

    #[test]
    fn control_point_jacobians_match_finite_differences() {
        let h = 1e-7;
        for seed in 0..5u64 {
            let s = wobbly_spline(40 + seed);
            for t in [0.52, 1.33, 2.71] {
                let jac = s.eval_jacobians(t).unwrap();
                for k in 0..4 {
                    let cp = jac.eval.first + k;
                    for axis in 0..3 {
                        let mut step = Vector3::zeros();
                        step[axis] = h;
                        let mut sp = s.clone();
                        sp.cps[cp] = sp.cps[cp] * Rotation::exp(step);
                        let mut sm = s.clone();
                        sm.cps[cp] = sm.cps[cp] * Rotation::exp(-step);
                        let ep = sp.eval_rates(t).unwrap();
                        let em = sm.eval_rates(t).unwrap();
                        // value: phi = Log(R^T R_pert), difference of the two sides
                        let dphi = ((jac.eval.r.transpose() * ep.r).log()
                            - (jac.eval.r.transpose() * em.r).log())
                            / (2.0 * h);
                        let ana_phi = jac.dphi_dcp[k].column(axis);
                        assert!(
                            (dphi - ana_phi).norm() < 1e-5 * ana_phi.norm().max(1.0),
                            "phi cp {k} axis {axis} t {t}"
                        );
                        let dw = (ep.omega - em.omega) / (2.0 * h);
                        let ana_w = jac.domega_dcp[k].column(axis);
                        assert!(
                            (dw - ana_w).norm() < 1e-4 * ana_w.norm().max(1.0),
                            "omega cp {k} axis {axis} t {t}"
                        );
                    }
                }
            }
        }
    }
}
