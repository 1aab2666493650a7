//! Trajectory comparison: absolute rotation/translation RMSE (ARE/ATE) and
//! inter-frame relative RMSE (RRE/RTE), with nearest-timestamp association
//! and optional closed-form rigid alignment.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Pose, Rotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no timestamp matches within {max_dt} s")]
    NoMatches { max_dt: f64 },
    #[error("degenerate point set: alignment rotation unobservable")]
    Degenerate,
}

/// Comparison mode: `Direct` assumes both trajectories share a frame;
/// `Aligned` removes the best rigid transform first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Direct,
    Aligned,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub are_deg: f64,
    pub ate_mm: f64,
    pub rre_deg: f64,
    pub rte_mm: f64,
    pub n_matched: usize,
    /// Rigid transform applied to the estimate (identity in direct mode).
    pub alignment: Pose,
}

impl MetricReport {
    /// Machine-readable line-delimited key=value form.
    pub fn to_key_values(&self) -> String {
        format!(
            "are_deg={:.9}\nate_mm={:.9}\nrre_deg={:.9}\nrte_mm={:.9}\nn_matched={}\n",
            self.are_deg, self.ate_mm, self.rre_deg, self.rte_mm, self.n_matched
        )
    }

    pub fn to_plain_text(&self) -> String {
        format!(
            "matched poses: {}\nARE: {:.6} deg\nATE: {:.6} mm\nRRE: {:.6} deg\nRTE: {:.6} mm\n",
            self.n_matched, self.are_deg, self.ate_mm, self.rre_deg, self.rte_mm
        )
    }
}

/// One-to-one nearest-timestamp association within `max_dt` seconds. Both
/// inputs must be time-sorted; each index appears at most once.
pub fn associate(
    a: &[(f64, Pose)],
    b: &[(f64, Pose)],
    max_dt: f64,
) -> Result<Vec<(usize, usize)>, MetricsError> {
    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    let mut last_j: Option<usize> = None;
    for (i, (ta, _)) in a.iter().enumerate() {
        while j0 + 1 < b.len() && b[j0 + 1].0 <= *ta {
            j0 += 1;
        }
        // nearest of the two bracketing candidates
        let mut best: Option<(f64, usize)> = None;
        for j in [j0, (j0 + 1).min(b.len().saturating_sub(1))] {
            let dt = (b[j].0 - ta).abs();
            if dt <= max_dt && best.map_or(true, |(d, _)| dt < d) {
                best = Some((dt, j));
            }
        }
        if let Some((_, j)) = best {
            if last_j != Some(j) {
                pairs.push((i, j));
                last_j = Some(j);
            }
        }
    }
    if pairs.is_empty() {
        return Err(MetricsError::NoMatches { max_dt });
    }
    Ok(pairs)
}

/// Closed-form least-squares rigid alignment of the matched positions:
/// returns `X` minimizing `sum || X * p_a - p_b ||^2` (rotation from the SVD
/// of the cross-covariance, translation from the centroids, no scale).
pub fn align_rigid(
    a: &[(f64, Pose)],
    b: &[(f64, Pose)],
    matched: &[(usize, usize)],
) -> Result<Pose, MetricsError> {
    if matched.len() < 3 {
        return Err(MetricsError::Degenerate);
    }
    let n = matched.len() as f64;
    let mut ca = Vector3::zeros();
    let mut cb = Vector3::zeros();
    for (i, j) in matched {
        ca += a[*i].1.trans;
        cb += b[*j].1.trans;
    }
    ca /= n;
    cb /= n;
    let mut cov = Matrix3::zeros();
    for (i, j) in matched {
        cov += (b[*j].1.trans - cb) * (a[*i].1.trans - ca).transpose();
    }
    let svd = cov.svd(true, true);
    // collinear (or coincident) points leave >= 2 near-zero singular values
    if svd.singular_values[1] <= 1e-9 * svd.singular_values[0].max(1e-300) {
        return Err(MetricsError::Degenerate);
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(u * d * vt);
    let t = cb - r * ca;
    Ok(Pose::new(r, t))
}

/// ARE/ATE over matched poses and RRE/RTE over consecutive matched frames
/// (stride in matched pairs, default 1).
pub fn compute_metrics(
    est: &[(f64, Pose)],
    reference: &[(f64, Pose)],
    mode: Mode,
    max_dt: f64,
    rel_stride: usize,
) -> Result<MetricReport, MetricsError> {
    let matched = associate(est, reference, max_dt)?;
    let alignment = match mode {
        Mode::Direct => Pose::identity(),
        Mode::Aligned => align_rigid(est, reference, &matched)?,
    };
    let est_al: Vec<Pose> = matched.iter().map(|(i, _)| alignment.compose(&est[*i].1)).collect();
    let refs: Vec<Pose> = matched.iter().map(|(_, j)| reference[*j].1).collect();

    let mut sq_r = 0.0;
    let mut sq_p = 0.0;
    for (e, r) in est_al.iter().zip(&refs) {
        sq_r += (r.rot.transpose() * e.rot).log().norm_squared();
        sq_p += (e.trans - r.trans).norm_squared();
    }
    let n = est_al.len() as f64;
    let are = (sq_r / n).sqrt();
    let ate = (sq_p / n).sqrt();

    let stride = rel_stride.max(1);
    let mut sq_rr = 0.0;
    let mut sq_rt = 0.0;
    let mut n_rel = 0usize;
    let mut k = 0;
    while k + stride < est_al.len() {
        let rel_e = est_al[k].relative_to(&est_al[k + stride]);
        let rel_r = refs[k].relative_to(&refs[k + stride]);
        let err = rel_r.inverse().compose(&rel_e);
        sq_rr += err.rot.log().norm_squared();
        sq_rt += err.trans.norm_squared();
        n_rel += 1;
        k += stride;
    }
    let (rre, rte) = if n_rel > 0 {
        ((sq_rr / n_rel as f64).sqrt(), (sq_rt / n_rel as f64).sqrt())
    } else {
        (0.0, 0.0)
    };

    Ok(MetricReport {
        are_deg: are.to_degrees(),
        ate_mm: ate * 1e3,
        rre_deg: rre.to_degrees(),
        rte_mm: rte * 1e3,
        n_matched: matched.len(),
        alignment,
    })
}
