use nalgebra::{SVector, Vector3};

use super::so3::SO3_ORDER;
use super::{EuclidSpline, KnotGrid, So3Spline, SplineError};
use crate::geometry::{right_jacobian_inv, Rotation};
use crate::linalg::BandedSym;

/// Verifies that every usable segment of the grid contains at least one
/// sample, so the fit normal equations are well posed.
fn check_coverage(times: &[f64], grid: &KnotGrid, order: usize) -> Result<(), SplineError> {
    let segments = grid.segments(order);
    let mut covered = vec![false; segments];
    for &t in times {
        if let Ok((seg, _)) = grid.locate(t, order) {
            covered[seg] = true;
        }
    }
    for (seg, ok) in covered.iter().enumerate() {
        if !ok {
            return Err(SplineError::InsufficientCoverage {
                segment: seg,
                t_start: grid.knot_time(seg),
            });
        }
    }
    Ok(())
}

/// Linear least-squares fit of the control points to timestamped samples.
/// Samples outside the grid domain are ignored.
pub fn fit_euclid<const N: usize>(
    samples: &[(f64, SVector<f64, N>)],
    grid: KnotGrid,
    order: usize,
) -> Result<EuclidSpline<N>, SplineError> {
    if !(2..=4).contains(&order) {
        return Err(SplineError::UnsupportedOrder(order));
    }
    if samples.len() < order {
        return Err(SplineError::TooFewSamples(samples.len()));
    }
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    check_coverage(&times, &grid, order)?;

    let n = grid.count;
    let mut normal = BandedSym::zeros(n, order - 1);
    let mut rhs = vec![SVector::<f64, N>::zeros(); n];
    let probe = EuclidSpline::constant(grid, order, SVector::<f64, N>::zeros())?;
    for (t, value) in samples {
        let Ok((first, w)) = probe.control_weights(*t, 0) else {
            continue;
        };
        for s in 0..order {
            for r in s..order {
                normal.add(first + r, first + s, w[r] * w[s]);
            }
            rhs[first + s] += w[s] * *value;
        }
    }
    normal
        .cholesky_in_place()
        .map_err(|_| SplineError::InsufficientCoverage { segment: 0, t_start: grid.t0 })?;

    let mut cps = vec![SVector::<f64, N>::zeros(); n];
    let mut col = vec![0.0; n];
    for dim in 0..N {
        for i in 0..n {
            col[i] = rhs[i][dim];
        }
        normal.solve_in_place(&mut col);
        for i in 0..n {
            cps[i][dim] = col[i];
        }
    }
    EuclidSpline::new(grid, order, cps)
}

/// Fits an order-4 SO(3) spline: control points are seeded with the rotation
/// sample nearest each knot, then refined by Gauss-Newton sweeps on the
/// log-residuals.
pub fn fit_so3(samples: &[(f64, Rotation)], grid: KnotGrid) -> Result<So3Spline, SplineError> {
    if samples.len() < SO3_ORDER {
        return Err(SplineError::TooFewSamples(samples.len()));
    }
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    check_coverage(&times, &grid, SO3_ORDER)?;

    // Seed: nearest sample per knot (samples are time-sorted).
    let mut cps = Vec::with_capacity(grid.count);
    for i in 0..grid.count {
        let tk = grid.knot_time(i);
        let idx = match times.binary_search_by(|t| t.partial_cmp(&tk).unwrap()) {
            Ok(j) => j,
            Err(j) => {
                if j == 0 {
                    0
                } else if j >= times.len() {
                    times.len() - 1
                } else if (times[j] - tk).abs() < (tk - times[j - 1]).abs() {
                    j
                } else {
                    j - 1
                }
            }
        };
        cps.push(samples[idx].1);
    }
    let mut spline = So3Spline::new(grid, cps)?;

    let n3 = 3 * grid.count;
    let hb = 3 * SO3_ORDER - 1;
    let mut prev_cost = f64::INFINITY;
    for _sweep in 0..8 {
        let mut normal = BandedSym::zeros(n3, hb);
        let mut grad = vec![0.0; n3];
        let mut cost = 0.0;
        for (t, meas) in samples {
            let Ok(jac) = spline.eval_jacobians(*t) else {
                continue;
            };
            let r = (meas.transpose() * jac.eval.r).log();
            cost += r.norm_squared();
            let jr_inv = right_jacobian_inv(&r);
            // residual Jacobian wrt cp_k: Jr^{-1}(r) * dphi_dcp[k]
            let mut jblocks = [nalgebra::Matrix3::<f64>::zeros(); 4];
            for k in 0..4 {
                jblocks[k] = jr_inv * jac.dphi_dcp[k];
            }
            let first = 3 * jac.eval.first;
            for k in 0..4 {
                for l in 0..=k {
                    let h = jblocks[k].transpose() * jblocks[l];
                    for a in 0..3 {
                        for b in 0..3 {
                            let (i, j) = (first + 3 * k + a, first + 3 * l + b);
                            if i >= j {
                                normal.add(i, j, h[(a, b)]);
                            }
                        }
                    }
                }
                let g = jblocks[k].transpose() * r;
                for a in 0..3 {
                    grad[first + 3 * k + a] -= g[a];
                }
            }
        }
        // Light Levenberg damping keeps the sweeps stable on sparse ends.
        for i in 0..n3 {
            *normal.diag_mut(i) += 1e-12;
        }
        normal
            .cholesky_in_place()
            .map_err(|_| SplineError::InsufficientCoverage { segment: 0, t_start: grid.t0 })?;
        normal.solve_in_place(&mut grad);
        for i in 0..grid.count {
            let step = Vector3::new(grad[3 * i], grad[3 * i + 1], grad[3 * i + 2]);
            spline.cps[i] = spline.cps[i] * Rotation::exp(step);
        }
        if (prev_cost - cost).abs() <= 1e-14 * cost.max(1.0) {
            break;
        }
        prev_cost = cost;
    }
    Ok(spline)
}
