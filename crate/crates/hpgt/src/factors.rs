//! Measurement factors binding the sensor streams to the continuous-time
//! state: MoCap absolute pose, DUT relative pose with screw-congruence
//! weights, gyroscope, accelerometer, and bias random-walk factors.
//!
//! Every factor returns the whitened residual together with analytic
//! Jacobian blocks keyed by [`ParamBlock`]. Residual blocks are ordered
//! rotation first, translation second, everywhere. Evaluation is pure given
//! an immutable state snapshot, so blocks can be evaluated concurrently.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::geometry::{right_jacobian_inv, screw_invariants, skew, Pose, Rotation};
use crate::io::{DutSample, ImuSample, MoCapSample, NoiseSpec};
use crate::spline::{EuclidSpline, SplineError, So3Spline, TimeOffsetSpline};

/// Pair-selection thresholds: rotation (rad), translation (m), duration (s).
pub const DUT_ROT_THRESHOLD: f64 = 5.0 * std::f64::consts::PI / 180.0;
pub const DUT_TRANS_THRESHOLD: f64 = 0.1;
pub const DUT_TIME_THRESHOLD: f64 = 0.5;
/// Floor for the screw-congruence weights.
pub const W_MIN: f64 = 1e-3;

/// Time-invariant estimated quantities.
#[derive(Debug, Clone)]
pub struct CalibState {
    /// MoCap marker body `M` in the rigid body frame `B`.
    pub t_b_m: Pose,
    /// IMU frame `I` in `B`; held at identity (gauge) during estimation.
    pub t_b_i: Pose,
    /// DUT frame `D` in `B`.
    pub t_b_d: Pose,
    /// Gravity-aligned world frame `W` expressed as the pose of `W` in the
    /// MoCap frame `P` is its inverse; stored as `T^W_P` (pose of `P` in `W`).
    /// Only the roll/pitch tilt is estimated; yaw and translation are gauge.
    pub t_w_p: Pose,
    /// Gyroscope-to-accelerometer axis misalignment.
    pub r_w_a: Rotation,
    /// Upper-triangular gyroscope intrinsic matrix.
    pub m_w: Matrix3<f64>,
    /// Upper-triangular accelerometer intrinsic matrix.
    pub m_a: Matrix3<f64>,
    /// Gravity magnitude (m/s^2); the world gravity vector is `(0, 0, -g_w)`.
    pub g_w: f64,
}

impl CalibState {
    /// Identity extrinsics and intrinsics with standard gravity.
    pub fn identity() -> Self {
        CalibState {
            t_b_m: Pose::identity(),
            t_b_i: Pose::identity(),
            t_b_d: Pose::identity(),
            t_w_p: Pose::identity(),
            r_w_a: Rotation::identity(),
            m_w: Matrix3::identity(),
            m_a: Matrix3::identity(),
            g_w: 9.81,
        }
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.g_w)
    }
}

/// All time-varying estimated quantities.
#[derive(Debug, Clone)]
pub struct SplineBundle {
    /// Body orientation `R^W_B(t)`.
    pub rot: So3Spline,
    /// Body position `p^W_B(t)`.
    pub trans: EuclidSpline<3>,
    /// Gyroscope bias (rad/s).
    pub bias_w: EuclidSpline<3>,
    /// Accelerometer bias (m/s^2).
    pub bias_a: EuclidSpline<3>,
    /// MoCap clock offset: `t = tau_M + off_M(tau_M)`.
    pub off_m: TimeOffsetSpline,
    /// IMU clock offset; held at zero (the IMU clock is the global clock).
    pub off_i: TimeOffsetSpline,
    /// DUT clock offset.
    pub off_d: TimeOffsetSpline,
}

/// Full state snapshot consumed by the factors.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub bundle: SplineBundle,
    pub calib: CalibState,
}

/// One selected DUT relative-pose interval with its congruence weights.
#[derive(Debug, Clone, Copy)]
pub struct DutPair {
    pub i: usize,
    pub j: usize,
    pub weight_r: f64,
    pub weight_p: f64,
}

/// Whitening constants for the residuals, all per-axis.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    /// MoCap rotation noise (rad) and translation noise (m) per sample.
    pub mocap_sigma_r: f64,
    pub mocap_sigma_p: f64,
    /// IMU white noise per sample (rad/s, m/s^2).
    pub gyr_sigma: f64,
    pub acc_sigma: f64,
    /// Bias random-walk densities (rad/s/sqrt(s), m/s^2/sqrt(s)).
    pub gyr_rw_density: f64,
    pub acc_rw_density: f64,
    /// Base sigma of a DUT relative pose (rad, m) before weighting.
    pub dut_sigma_r: f64,
    pub dut_sigma_p: f64,
}

impl NoiseModel {
    /// Converts the per-sample stream noise description, turning the
    /// per-step random walk at `imu_rate_hz` into a continuous density.
    pub fn from_spec(spec: &NoiseSpec, imu_rate_hz: f64) -> Self {
        NoiseModel {
            mocap_sigma_r: spec.mocap_sigma_r,
            mocap_sigma_p: spec.mocap_sigma_p,
            gyr_sigma: spec.gyr_nd,
            acc_sigma: spec.acc_nd,
            gyr_rw_density: spec.gyr_rw * imu_rate_hz.sqrt(),
            acc_rw_density: spec.acc_rw * imu_rate_hz.sqrt(),
            dut_sigma_r: 0.05_f64.to_radians(),
            dut_sigma_p: 2e-3,
        }
    }

    /// All-ones whitening, so residuals come back in physical units.
    pub fn unit() -> Self {
        NoiseModel {
            mocap_sigma_r: 1.0,
            mocap_sigma_p: 1.0,
            gyr_sigma: 1.0,
            acc_sigma: 1.0,
            gyr_rw_density: 1.0,
            acc_rw_density: 1.0,
            dut_sigma_r: 1.0,
            dut_sigma_p: 1.0,
        }
    }
}

/// Identity of one optimizable parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamBlock {
    /// Orientation control point, right-perturbed: `cp <- cp * Exp(eps)`.
    RotCp(usize),
    TransCp(usize),
    BiasWCp(usize),
    BiasACp(usize),
    OffMCp(usize),
    OffICp(usize),
    OffDCp(usize),
    /// `R^B_M <- R^B_M * Exp(eps)`.
    TbmRot,
    TbmTrans,
    TbdRot,
    TbdTrans,
    /// Roll/pitch tilt of the world frame: `R^W_P <- Exp((e0, e1, 0)) R^W_P`.
    TwpTilt,
    /// Gravity magnitude.
    Gravity,
    /// `R^w_a <- R^w_a * Exp(eps)`.
    Rwa,
    /// Upper-triangular entries in order (0,0),(0,1),(0,2),(1,1),(1,2),(2,2).
    Mw,
    Ma,
}

impl ParamBlock {
    pub fn dim(&self) -> usize {
        match self {
            ParamBlock::RotCp(_)
            | ParamBlock::TransCp(_)
            | ParamBlock::BiasWCp(_)
            | ParamBlock::BiasACp(_)
            | ParamBlock::TbmRot
            | ParamBlock::TbmTrans
            | ParamBlock::TbdRot
            | ParamBlock::TbdTrans
            | ParamBlock::Rwa => 3,
            ParamBlock::OffMCp(_) | ParamBlock::OffICp(_) | ParamBlock::OffDCp(_) => 1,
            ParamBlock::TwpTilt => 2,
            ParamBlock::Gravity => 1,
            ParamBlock::Mw | ParamBlock::Ma => 6,
        }
    }
}

/// Whitened residual and its Jacobian blocks.
#[derive(Debug, Clone)]
pub struct FactorEval {
    pub r: DVector<f64>,
    pub jacs: Vec<(ParamBlock, DMatrix<f64>)>,
}

const TRI_INDEX: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Jacobian of `M v` with respect to the six upper-triangular entries of `M`.
fn tri_jacobian(v: &Vector3<f64>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(3, 6);
    for (c, &(i, k)) in TRI_INDEX.iter().enumerate() {
        j[(i, c)] = v[k];
    }
    j
}

/// Applies a local perturbation to one parameter block, returning the moved
/// state. This is both the finite-difference probe and the solver's update
/// map; the perturbation conventions are documented on [`ParamBlock`].
pub fn apply_delta(state: &SystemState, block: ParamBlock, delta: &DVector<f64>) -> SystemState {
    let mut out = state.clone();
    apply_delta_in_place(&mut out, block, delta.as_slice());
    out
}

/// In-place variant of [`apply_delta`]; `delta` may be any slice of the
/// block's dimension.
pub fn apply_delta_in_place(out: &mut SystemState, block: ParamBlock, delta: &[f64]) {
    assert_eq!(delta.len(), block.dim(), "delta length must match block");
    let v3 = |d: &[f64]| Vector3::new(d[0], d[1], d[2]);
    match block {
        ParamBlock::RotCp(i) => {
            out.bundle.rot.cps[i] = out.bundle.rot.cps[i] * Rotation::exp(v3(delta));
        }
        ParamBlock::TransCp(i) => out.bundle.trans.cps[i] += v3(delta),
        ParamBlock::BiasWCp(i) => out.bundle.bias_w.cps[i] += v3(delta),
        ParamBlock::BiasACp(i) => out.bundle.bias_a.cps[i] += v3(delta),
        ParamBlock::OffMCp(i) => out.bundle.off_m.inner.cps[i][0] += delta[0],
        ParamBlock::OffICp(i) => out.bundle.off_i.inner.cps[i][0] += delta[0],
        ParamBlock::OffDCp(i) => out.bundle.off_d.inner.cps[i][0] += delta[0],
        ParamBlock::TbmRot => {
            out.calib.t_b_m.rot = out.calib.t_b_m.rot * Rotation::exp(v3(delta));
        }
        ParamBlock::TbmTrans => out.calib.t_b_m.trans += v3(delta),
        ParamBlock::TbdRot => {
            out.calib.t_b_d.rot = out.calib.t_b_d.rot * Rotation::exp(v3(delta));
        }
        ParamBlock::TbdTrans => out.calib.t_b_d.trans += v3(delta),
        ParamBlock::TwpTilt => {
            let tilt = Vector3::new(delta[0], delta[1], 0.0);
            out.calib.t_w_p.rot = Rotation::exp(tilt) * out.calib.t_w_p.rot;
        }
        ParamBlock::Gravity => out.calib.g_w += delta[0],
        ParamBlock::Rwa => {
            out.calib.r_w_a = out.calib.r_w_a * Rotation::exp(v3(delta));
        }
        ParamBlock::Mw => {
            for (c, &(i, k)) in TRI_INDEX.iter().enumerate() {
                out.calib.m_w[(i, k)] += delta[c];
            }
        }
        ParamBlock::Ma => {
            for (c, &(i, k)) in TRI_INDEX.iter().enumerate() {
                out.calib.m_a[(i, k)] += delta[c];
            }
        }
    }
}

/// MoCap absolute pose factor.
///
/// `r_R = Log(R~^T * R^P_W R^W_B(t) R^B_M)`, `r_p = p_pred - p~`, with
/// `t = tau + off_M(tau)`; whitened per channel.
pub fn mocap_residual(
    m: &MoCapSample,
    state: &SystemState,
    noise: &NoiseModel,
) -> Result<FactorEval, SplineError> {
    let cal = &state.calib;
    let (off_first, off_w) = state.bundle.off_m.control_weights(m.tau)?;
    let t = state.bundle.off_m.map_time(m.tau)?;

    let rj = state.bundle.rot.eval_jacobians(t)?;
    let (tfirst, tw) = state.bundle.trans.control_weights(t, 0)?;
    debug_assert_eq!(tfirst, rj.eval.first);
    let p = state.bundle.trans.eval(t, 0)?;
    let pdot = state.bundle.trans.eval(t, 1)?;

    let r = &rj.eval.r;
    let omega = rj.eval.omega;
    let t_p_w = cal.t_w_p.inverse();
    let r_pw = t_p_w.rot.matrix().clone_owned();
    let r_bm = &cal.t_b_m.rot;

    let pred_rot = t_p_w.rot * (*r * *r_bm);
    let r_rot = (m.pose.rot.transpose() * pred_rot).log();
    let a = right_jacobian_inv(&r_rot);

    // Body-frame point carried by the marker frame, expressed in W.
    let v = *r * cal.t_b_m.trans + p;
    let r_p = r_pw * v + t_p_w.trans - m.pose.trans;

    let inv_sr = 1.0 / noise.mocap_sigma_r;
    let inv_sp = 1.0 / noise.mocap_sigma_p;
    let mut res = DVector::zeros(6);
    for k in 0..3 {
        res[k] = r_rot[k] * inv_sr;
        res[3 + k] = r_p[k] * inv_sp;
    }

    let mut jacs = Vec::with_capacity(11);
    let rot_top = a * r_bm.transpose().matrix();
    let trans_rot = -(r_pw * r.matrix() * skew(&cal.t_b_m.trans));
    for k in 0..4 {
        let mut j = DMatrix::zeros(6, 3);
        let top = rot_top * rj.dphi_dcp[k] * inv_sr;
        let bot = trans_rot * rj.dphi_dcp[k] * inv_sp;
        j.view_mut((0, 0), (3, 3)).copy_from(&top);
        j.view_mut((3, 0), (3, 3)).copy_from(&bot);
        jacs.push((ParamBlock::RotCp(rj.eval.first + k), j));

        let mut jt = DMatrix::zeros(6, 3);
        jt.view_mut((3, 0), (3, 3))
            .copy_from(&(r_pw * (tw[k] * inv_sp)));
        jacs.push((ParamBlock::TransCp(tfirst + k), jt));
    }

    let mut j_tbm_rot = DMatrix::zeros(6, 3);
    j_tbm_rot.view_mut((0, 0), (3, 3)).copy_from(&(a * inv_sr));
    jacs.push((ParamBlock::TbmRot, j_tbm_rot));

    let mut j_tbm_trans = DMatrix::zeros(6, 3);
    j_tbm_trans
        .view_mut((3, 0), (3, 3))
        .copy_from(&(r_pw * r.matrix() * inv_sp));
    jacs.push((ParamBlock::TbmTrans, j_tbm_trans));

    // World-frame tilt: R^W_P <- Exp((e0,e1,0)) R^W_P with p^W_P fixed.
    let mut sel = DMatrix::zeros(3, 2);
    sel[(0, 0)] = 1.0;
    sel[(1, 1)] = 1.0;
    let body_rot_t = (*r * *r_bm).transpose().matrix().clone_owned();
    let mut j_tilt = DMatrix::zeros(6, 2);
    j_tilt
        .view_mut((0, 0), (3, 2))
        .copy_from(&(-(a * body_rot_t) * &sel * inv_sr));
    j_tilt
        .view_mut((3, 0), (3, 2))
        .copy_from(&(r_pw * skew(&(v - cal.t_w_p.trans)) * &sel * inv_sp));
    jacs.push((ParamBlock::TwpTilt, j_tilt));

    // Chain rule through the mapped time.
    let dr_rot_dt = rot_top * omega;
    let dr_p_dt = r_pw * (r.matrix() * skew(&omega) * cal.t_b_m.trans + pdot);
    for s in 0..2 {
        let mut j = DMatrix::zeros(6, 1);
        for k in 0..3 {
            j[(k, 0)] = dr_rot_dt[k] * off_w[s] * inv_sr;
            j[(3 + k, 0)] = dr_p_dt[k] * off_w[s] * inv_sp;
        }
        jacs.push((ParamBlock::OffMCp(off_first + s), j));
    }

    Ok(FactorEval { r: res, jacs })
}

/// Greedy left-to-right DUT interval selection: from anchor `i`, advance `j`
/// until relative rotation, relative translation, or elapsed time crosses its
/// threshold, emit `(i, j)` and continue from `j`. Weights start at 1.
pub fn select_dut_pairs(dut: &[DutSample]) -> Vec<DutPair> {
    let mut out = Vec::new();
    if dut.len() < 2 {
        return out;
    }
    let mut i = 0;
    while i + 1 < dut.len() {
        let mut emitted = false;
        for j in (i + 1)..dut.len() {
            let rel = dut[i].pose.relative_to(&dut[j].pose);
            if rel.rot.angle() >= DUT_ROT_THRESHOLD
                || rel.trans.norm() >= DUT_TRANS_THRESHOLD
                || dut[j].tau - dut[i].tau >= DUT_TIME_THRESHOLD - 1e-9
            {
                out.push(DutPair {
                    i,
                    j,
                    weight_r: 1.0,
                    weight_p: 1.0,
                });
                i = j;
                emitted = true;
                break;
            }
        }
        if !emitted {
            break;
        }
    }
    out
}

/// Screw-congruence weights of a DUT relative pose against the reference
/// relative pose of the body trajectory over the same interval.
///
/// `w_R = exp(-((theta_D - theta_B)/theta_B)^2)` and the analogue on the
/// screw translation, both clamped to `[W_MIN, 1]`. A degenerate screw on
/// either pose falls back to `(W_MIN, W_MIN)`.
pub fn dut_weights(dut_rel: &Pose, ref_rel: &Pose) -> (f64, f64) {
    let (sd, sb) = match (screw_invariants(dut_rel), screw_invariants(ref_rel)) {
        (Ok(d), Ok(b)) => (d, b),
        _ => return (W_MIN, W_MIN),
    };
    let gauss = |x: f64, x_ref: f64| -> f64 {
        if x_ref.abs() < 1e-12 {
            return W_MIN;
        }
        let z = (x - x_ref) / x_ref;
        (-z * z).exp().clamp(W_MIN, 1.0)
    };
    (gauss(sd.theta, sb.theta), gauss(sd.d, sb.d))
}

/// DUT relative pose factor over one selected interval.
///
/// Predicts `T^{D_i}_{D_j} = (T^B_D)^-1 T^W_B(t_i)^-1 T^W_B(t_j) T^B_D` and
/// compares against the measured relative pose in the DUT odometry frame.
/// The trajectory control points are deliberately held out of the Jacobian
/// blocks: the factor constrains only `T^B_D` and the DUT clock offset.
pub fn dut_relative_residual(
    dut: &[DutSample],
    pair: &DutPair,
    state: &SystemState,
    noise: &NoiseModel,
) -> Result<FactorEval, SplineError> {
    let a_s = &dut[pair.i];
    let b_s = &dut[pair.j];
    let (off_i_first, off_i_w) = state.bundle.off_d.control_weights(a_s.tau)?;
    let (off_j_first, off_j_w) = state.bundle.off_d.control_weights(b_s.tau)?;
    let t_i = state.bundle.off_d.map_time(a_s.tau)?;
    let t_j = state.bundle.off_d.map_time(b_s.tau)?;

    let ev_i = state.bundle.rot.eval_rates(t_i)?;
    let ev_j = state.bundle.rot.eval_rates(t_j)?;
    let p_i = state.bundle.trans.eval(t_i, 0)?;
    let p_j = state.bundle.trans.eval(t_j, 0)?;
    let pdot_i = state.bundle.trans.eval(t_i, 1)?;
    let pdot_j = state.bundle.trans.eval(t_j, 1)?;

    let r_i = ev_i.r;
    let r_j = ev_j.r;
    let rd = state.calib.t_b_d.rot;
    let pd = state.calib.t_b_d.trans;

    let q = r_i.transpose() * r_j;
    let s = r_i.transpose() * (p_j - p_i);
    let rrel = rd.transpose() * q * rd;
    let w_vec = q * pd + s - pd;
    let prel = rd.transpose() * w_vec;

    // Measured relative pose; the arbitrary odometry frame cancels.
    let e = b_s.pose.rot.transpose() * a_s.pose.rot;
    let r_rot = (e * rrel).log();
    let r_p = prel - (a_s.pose.rot.transpose() * (b_s.pose.trans - a_s.pose.trans));

    let a_jr = right_jacobian_inv(&r_rot);
    let inv_sr = pair.weight_r / noise.dut_sigma_r;
    let inv_sp = pair.weight_p / noise.dut_sigma_p;

    let mut res = DVector::zeros(6);
    for k in 0..3 {
        res[k] = r_rot[k] * inv_sr;
        res[3 + k] = r_p[k] * inv_sp;
    }

    let mut jacs: Vec<(ParamBlock, DMatrix<f64>)> = Vec::with_capacity(4);

    let mut j_rot = DMatrix::zeros(6, 3);
    j_rot
        .view_mut((0, 0), (3, 3))
        .copy_from(&((a_jr * (Matrix3::identity() - rrel.transpose().matrix())) * inv_sr));
    j_rot
        .view_mut((3, 0), (3, 3))
        .copy_from(&(skew(&prel) * inv_sp));
    jacs.push((ParamBlock::TbdRot, j_rot));

    let mut j_trans = DMatrix::zeros(6, 3);
    j_trans
        .view_mut((3, 0), (3, 3))
        .copy_from(&((rd.transpose().matrix() * (q.matrix() - Matrix3::identity())) * inv_sp));
    jacs.push((ParamBlock::TbdTrans, j_trans));

    // Time sensitivities through both mapped endpoints.
    let rd_t = rd.transpose().matrix().clone_owned();
    let dr_rot_dti = -(a_jr * rrel.transpose().matrix() * &rd_t * ev_i.omega);
    let dr_rot_dtj = a_jr * &rd_t * ev_j.omega;
    let dw_dti = -skew(&ev_i.omega) * (q * pd + s) - r_i.transpose() * pdot_i;
    let dw_dtj = q.matrix() * skew(&ev_j.omega) * pd + r_i.transpose() * pdot_j;
    let dr_p_dti = &rd_t * dw_dti;
    let dr_p_dtj = &rd_t * dw_dtj;

    // The two endpoint windows can overlap on the coarse offset grid, so the
    // columns are accumulated per control point.
    let mut add_time = |first: usize, wgt: [f64; 2], drr: &Vector3<f64>, drp: &Vector3<f64>| {
        for s_idx in 0..2 {
            let block = ParamBlock::OffDCp(first + s_idx);
            let mut col = DMatrix::zeros(6, 1);
            for k in 0..3 {
                col[(k, 0)] = drr[k] * wgt[s_idx] * inv_sr;
                col[(3 + k, 0)] = drp[k] * wgt[s_idx] * inv_sp;
            }
            if let Some(existing) = jacs.iter_mut().find(|(b, _)| *b == block) {
                existing.1 += col;
            } else {
                jacs.push((block, col));
            }
        }
    };
    add_time(off_i_first, off_i_w, &dr_rot_dti, &dr_p_dti);
    add_time(off_j_first, off_j_w, &dr_rot_dtj, &dr_p_dtj);

    Ok(FactorEval { r: res, jacs })
}

/// Gyroscope factor: `r = M_w R^w_a (R^B_I)^T omega(t) + b_w(t) - omega~`.
pub fn gyro_residual(
    s: &ImuSample,
    state: &SystemState,
    noise: &NoiseModel,
) -> Result<FactorEval, SplineError> {
    let cal = &state.calib;
    let (off_first, off_w) = state.bundle.off_i.control_weights(s.tau)?;
    let t = state.bundle.off_i.map_time(s.tau)?;

    let rj = state.bundle.rot.eval_jacobians(t)?;
    let (bfirst, bw) = state.bundle.bias_w.control_weights(t, 0)?;
    let bias = state.bundle.bias_w.eval(t, 0)?;
    let bias_dot = state.bundle.bias_w.eval(t, 1)?;

    let r_bi_t = cal.t_b_i.rot.transpose().matrix().clone_owned();
    let omega_i = &r_bi_t * rj.eval.omega;
    let front = cal.m_w * cal.r_w_a.matrix();
    let r = front * omega_i + bias - s.omega;

    let inv_s = 1.0 / noise.gyr_sigma;
    let res = DVector::from_iterator(3, r.iter().map(|x| x * inv_s));

    let mut jacs = Vec::with_capacity(9);
    let chain = front * &r_bi_t;
    for k in 0..4 {
        let j = DMatrix::from_column_slice(3, 3, (chain * rj.domega_dcp[k] * inv_s).as_slice());
        jacs.push((ParamBlock::RotCp(rj.eval.first + k), j));
    }
    for s_idx in 0..2 {
        let j = DMatrix::from_diagonal_element(3, 3, bw[s_idx] * inv_s);
        jacs.push((ParamBlock::BiasWCp(bfirst + s_idx), j));
    }

    jacs.push((ParamBlock::Mw, tri_jacobian(&(cal.r_w_a * omega_i)) * inv_s));

    let j_rwa = -(cal.m_w * cal.r_w_a.matrix() * skew(&omega_i)) * inv_s;
    jacs.push((ParamBlock::Rwa, DMatrix::from_column_slice(3, 3, j_rwa.as_slice())));

    let drdt = chain * rj.eval.omega_dot + bias_dot;
    for s_idx in 0..2 {
        let mut col = DMatrix::zeros(3, 1);
        for k in 0..3 {
            col[(k, 0)] = drdt[k] * off_w[s_idx] * inv_s;
        }
        jacs.push((ParamBlock::OffICp(off_first + s_idx), col));
    }

    Ok(FactorEval { r: res, jacs })
}

/// Accelerometer factor:
/// `a_I = (R^W_B R^B_I)^-1 (Rddot p^B_I + pddot - g^W)`,
/// `r = M_a a_I + b_a(t) - a~`.
///
/// The analytic Jacobians are exact for the estimation configuration
/// `p^B_I = 0`; a lever arm changes only the residual value.
pub fn accel_residual(
    s: &ImuSample,
    state: &SystemState,
    noise: &NoiseModel,
) -> Result<FactorEval, SplineError> {
    let cal = &state.calib;
    let t = state.bundle.off_i.map_time(s.tau)?;

    let rj = state.bundle.rot.eval_jacobians(t)?;
    let (tfirst, ddw) = state.bundle.trans.control_weights(t, 2)?;
    let pdd = state.bundle.trans.eval(t, 2)?;
    let (bfirst, bw) = state.bundle.bias_a.control_weights(t, 0)?;
    let bias = state.bundle.bias_a.eval(t, 0)?;

    let r = &rj.eval.r;
    let r_bi_t = cal.t_b_i.rot.transpose().matrix().clone_owned();
    let u = rj.eval.r_ddot() * cal.t_b_i.trans + pdd - cal.gravity_vector();
    let r_t_u = r.transpose() * u;
    let a_i = &r_bi_t * r_t_u;
    let res_v = cal.m_a * a_i + bias - s.accel;

    let inv_s = 1.0 / noise.acc_sigma;
    let res = DVector::from_iterator(3, res_v.iter().map(|x| x * inv_s));

    let mut jacs = Vec::with_capacity(11);
    let rot_chain = cal.m_a * &r_bi_t * skew(&r_t_u);
    let trans_chain = cal.m_a * &r_bi_t * r.transpose().matrix();
    for k in 0..4 {
        let j = rot_chain * rj.dphi_dcp[k] * inv_s;
        jacs.push((
            ParamBlock::RotCp(rj.eval.first + k),
            DMatrix::from_column_slice(3, 3, j.as_slice()),
        ));
        let jt = trans_chain * (ddw[k] * inv_s);
        jacs.push((
            ParamBlock::TransCp(tfirst + k),
            DMatrix::from_column_slice(3, 3, jt.as_slice()),
        ));
    }
    for s_idx in 0..2 {
        let j = DMatrix::from_diagonal_element(3, 3, bw[s_idx] * inv_s);
        jacs.push((ParamBlock::BiasACp(bfirst + s_idx), j));
    }

    // d u / d g_w = (0, 0, 1).
    let g_col = trans_chain * Vector3::new(0.0, 0.0, 1.0) * inv_s;
    let mut j_g = DMatrix::zeros(3, 1);
    for k in 0..3 {
        j_g[(k, 0)] = g_col[k];
    }
    jacs.push((ParamBlock::Gravity, j_g));

    jacs.push((ParamBlock::Ma, tri_jacobian(&a_i) * inv_s));

    Ok(FactorEval { r: res, jacs })
}

/// Which bias spline a random-walk factor constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasKind {
    Gyro,
    Accel,
}

/// Wiener-process prior on one knot interval of a bias spline:
/// `r = (cp_{i+1} - cp_i) / sqrt(dt)`, whitened by the random-walk density.
pub fn bias_rw_residual(
    state: &SystemState,
    kind: BiasKind,
    i: usize,
    noise: &NoiseModel,
) -> FactorEval {
    let (spline, density, mk): (_, f64, fn(usize) -> ParamBlock) = match kind {
        BiasKind::Gyro => (&state.bundle.bias_w, noise.gyr_rw_density, ParamBlock::BiasWCp),
        BiasKind::Accel => (&state.bundle.bias_a, noise.acc_rw_density, ParamBlock::BiasACp),
    };
    let dt = spline.grid.dt;
    let scale = 1.0 / (dt.sqrt() * density);
    let d = (spline.cps[i + 1] - spline.cps[i]) * scale;
    let res = DVector::from_column_slice(d.as_slice());
    let jacs = vec![
        (mk(i), DMatrix::from_diagonal_element(3, 3, -scale)),
        (mk(i + 1), DMatrix::from_diagonal_element(3, 3, scale)),
    ];
    FactorEval { r: res, jacs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_truth, sample_set, truth_state, SimConfig};
    use nalgebra::Vector1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn noiseless_setup(seed: u64) -> (crate::sim::SimTruth, SystemState, NoiseModel) {
        let config = SimConfig {
            duration: 10.0,
            noise_scale: 0.0,
            ..SimConfig::default()
        };
        let truth = make_truth(&config, seed).unwrap();
        let state = truth_state(&truth);
        let noise = NoiseModel::from_spec(&config.noise, config.imu_hz);
        (truth, state, noise)
    }

    /// Randomly nudges every kind of parameter so residuals and curvature
    /// terms are all non-trivial at the linearization point.
    fn jostle(state: &SystemState, seed: u64) -> SystemState {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut s = state.clone();
        let r3 = |scale: f64, rng: &mut ChaCha12Rng| {
            DVector::from_fn(3, |_, _| scale * (rng.gen::<f64>() - 0.5))
        };
        for i in 0..s.bundle.rot.cps.len() {
            let d = r3(2e-3, &mut rng);
            s = apply_delta(&s, ParamBlock::RotCp(i), &d);
            let d = r3(2e-3, &mut rng);
            s = apply_delta(&s, ParamBlock::TransCp(i), &d);
        }
        for (block, scale) in [
            (ParamBlock::TbmRot, 1e-2),
            (ParamBlock::TbmTrans, 1e-2),
            (ParamBlock::TbdRot, 1e-2),
            (ParamBlock::TbdTrans, 1e-2),
            (ParamBlock::Rwa, 5e-3),
        ] {
            let d = r3(scale, &mut rng);
            s = apply_delta(&s, block, &d);
        }
        let d = DVector::from_fn(2, |_, _| 2e-3 * (rng.gen::<f64>() - 0.5));
        s = apply_delta(&s, ParamBlock::TwpTilt, &d);
        s = apply_delta(&s, ParamBlock::Gravity, &DVector::from_element(1, 0.01));
        let d6 = DVector::from_fn(6, |_, _| 4e-3 * (rng.gen::<f64>() - 0.5));
        s = apply_delta(&s, ParamBlock::Mw, &d6);
        let d6 = DVector::from_fn(6, |_, _| 4e-3 * (rng.gen::<f64>() - 0.5));
        s = apply_delta(&s, ParamBlock::Ma, &d6);
        for i in 0..s.bundle.off_m.inner.cps.len() {
            let d = DVector::from_element(1, 3e-4 * (rng.gen::<f64>() - 0.5));
            s = apply_delta(&s, ParamBlock::OffMCp(i), &d);
        }
        for i in 0..s.bundle.off_d.inner.cps.len() {
            let d = DVector::from_element(1, 3e-4 * (rng.gen::<f64>() - 0.5));
            s = apply_delta(&s, ParamBlock::OffDCp(i), &d);
        }
        for i in 0..s.bundle.bias_w.cps.len() {
            let d = r3(1e-3, &mut rng);
            s = apply_delta(&s, ParamBlock::BiasWCp(i), &d);
            let d = r3(1e-2, &mut rng);
            s = apply_delta(&s, ParamBlock::BiasACp(i), &d);
        }
        s
    }

    fn check_fd<F>(state: &SystemState, eval: &FactorEval, f: F, step: f64, tol: f64)
    where
        F: Fn(&SystemState) -> DVector<f64>,
    {
        for (block, jac) in &eval.jacs {
            for c in 0..block.dim() {
                let mut d = DVector::zeros(block.dim());
                d[c] = step;
                let rp = f(&apply_delta(state, *block, &d));
                d[c] = -step;
                let rm = f(&apply_delta(state, *block, &d));
                let fd = (rp - rm) / (2.0 * step);
                let analytic = jac.column(c).clone_owned();
                let scale = analytic.norm().max(fd.norm()).max(1.0);
                let err = (&fd - &analytic).norm();
                assert!(
                    err <= tol * scale,
                    "block {block:?} col {c}: fd {fd:?} vs analytic {analytic:?} (err {err:.3e})"
                );
            }
        }
    }

    #[test]
    fn residuals_vanish_at_generating_state() {
        for seed in 0..10u64 {
            let (truth, state, _) = noiseless_setup(seed);
            let noise = NoiseModel::unit();
            let set = sample_set(&truth);
            let mut worst: f64 = 0.0;
            for m in set.mocap.iter().step_by(17) {
                let e = mocap_residual(m, &state, &noise).unwrap();
                worst = worst.max(e.r.amax());
            }
            for s in set.imu.iter().step_by(23) {
                let e = gyro_residual(s, &state, &noise).unwrap();
                worst = worst.max(e.r.amax());
                let e = accel_residual(s, &state, &noise).unwrap();
                worst = worst.max(e.r.amax());
            }
            for pair in select_dut_pairs(&set.dut) {
                let e = dut_relative_residual(&set.dut, &pair, &state, &noise).unwrap();
                worst = worst.max(e.r.amax());
            }
            assert!(worst < 1e-9, "seed {seed}: worst residual {worst:.3e}");
        }
    }

    #[test]
    fn mocap_jacobians_match_finite_differences() {
        let (truth, state, noise) = noiseless_setup(1);
        let state = jostle(&state, 11);
        let set = sample_set(&truth);
        for idx in [40usize, 311, 977, 1700, 2531] {
            let m = &set.mocap[idx];
            let e = mocap_residual(m, &state, &noise).unwrap();
            check_fd(&state, &e, |s| mocap_residual(m, s, &noise).unwrap().r, 1e-6, 1e-5);
        }
    }

    #[test]
    fn mocap_whitening_definition() {
        let (truth, state, noise) = noiseless_setup(2);
        let set = sample_set(&truth);
        let mut m = set.mocap[123];
        m.pose.trans -= Vector3::new(noise.mocap_sigma_p, 0.0, 0.0);
        let e = mocap_residual(&m, &state, &noise).unwrap();
        let expected = DVector::from_column_slice(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((e.r - expected).amax() < 1e-6);
    }

    #[test]
    fn gyro_accel_jacobians_match_finite_differences() {
        let (truth, state, noise) = noiseless_setup(3);
        let state = jostle(&state, 13);
        let set = sample_set(&truth);
        for idx in [77usize, 1033, 2414, 3901, 4600] {
            let s = &set.imu[idx];
            let e = gyro_residual(s, &state, &noise).unwrap();
            check_fd(&state, &e, |st| gyro_residual(s, st, &noise).unwrap().r, 1e-6, 1e-5);
            let e = accel_residual(s, &state, &noise).unwrap();
            check_fd(&state, &e, |st| accel_residual(s, st, &noise).unwrap().r, 1e-6, 1e-5);
        }
    }

    #[test]
    fn dut_jacobians_match_finite_differences_and_hold_out_trajectory() {
        let (truth, state, noise) = noiseless_setup(4);
        let state = jostle(&state, 17);
        let set = sample_set(&truth);
        let pairs = select_dut_pairs(&set.dut);
        assert!(pairs.len() > 4);
        for pair in pairs.iter().step_by(pairs.len() / 4) {
            let mut pair = *pair;
            pair.weight_r = 0.8;
            pair.weight_p = 0.6;
            let e = dut_relative_residual(&set.dut, &pair, &state, &noise).unwrap();
            for (block, _) in &e.jacs {
                assert!(
                    !matches!(block, ParamBlock::RotCp(_) | ParamBlock::TransCp(_)),
                    "trajectory control points must be held out"
                );
            }
            check_fd(
                &state,
                &e,
                |st| dut_relative_residual(&set.dut, &pair, st, &noise).unwrap().r,
                1e-6,
                1e-5,
            );
        }
    }

    #[test]
    fn select_pairs_time_trigger_static() {
        let dut: Vec<DutSample> = (0..901)
            .map(|k| DutSample {
                tau: k as f64 / 90.0,
                pose: Pose::identity(),
            })
            .collect();
        let pairs = select_dut_pairs(&dut);
        assert_eq!(pairs.len(), 20);
        for p in &pairs {
            assert_eq!(p.j - p.i, 45, "0.5 s at 90 Hz is 45 frames");
        }
    }

    #[test]
    fn select_pairs_rotation_trigger() {
        let rate = 20.0_f64.to_radians();
        let dut: Vec<DutSample> = (0..901)
            .map(|k| {
                let tau = k as f64 / 90.0;
                DutSample {
                    tau,
                    pose: Pose::new(Rotation::exp(Vector3::new(0.0, 0.0, rate * tau)), Vector3::zeros()),
                }
            })
            .collect();
        let pairs = select_dut_pairs(&dut);
        assert!(!pairs.is_empty());
        for p in &pairs {
            assert_eq!(p.j - p.i, 23, "5 deg at 20 deg/s and 90 Hz is 23 frames");
        }
    }

    #[test]
    fn select_pairs_empty() {
        assert!(select_dut_pairs(&[]).is_empty());
    }

    #[test]
    fn weights_closed_form() {
        let rel_b = Pose::new(
            Rotation::exp(Vector3::new(0.02, 0.1, 0.04)),
            Vector3::new(0.05, -0.02, 0.01),
        );
        let (wr, wp) = dut_weights(&rel_b, &rel_b);
        assert!((wr - 1.0).abs() < 1e-12 && (wp - 1.0).abs() < 1e-12);

        let rel_d = Pose::new(
            Rotation::exp(Vector3::new(0.04, 0.2, 0.08)),
            2.0 * rel_b.trans,
        );
        let (wr, _) = dut_weights(&rel_d, &rel_b);
        assert!((wr - (-1.0f64).exp()).abs() < 1e-9, "doubled angle gives exp(-1), got {wr}");
    }

    #[test]
    fn weights_invariant_to_conjugation() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut v3 = |s: f64| Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * s;
            let rel_d = Pose::new(Rotation::exp(v3(0.6)), v3(0.4));
            let rel_b = Pose::new(Rotation::exp(v3(0.6)), v3(0.4));
            let g = Pose::new(Rotation::exp(v3(3.0)), v3(2.0));
            let conj = |p: &Pose| g.compose(p).compose(&g.inverse());
            let (wr, wp) = dut_weights(&rel_d, &rel_b);
            let (wr2, wp2) = dut_weights(&conj(&rel_d), &conj(&rel_b));
            assert!((wr - wr2).abs() < 1e-9 && (wp - wp2).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_degenerate_reference_falls_back() {
        let rel_b = Pose::new(Rotation::identity(), Vector3::new(0.2, 0.0, 0.0));
        let rel_d = Pose::new(Rotation::exp(Vector3::new(0.0, 0.0, 0.1)), Vector3::new(0.2, 0.0, 0.0));
        assert_eq!(dut_weights(&rel_d, &rel_b), (W_MIN, W_MIN));
    }

    fn constant_rate_state(omega_z: f64) -> SystemState {
        let (_, mut state, _) = noiseless_setup(6);
        let grid = state.bundle.rot.grid;
        let cps = (0..grid.count)
            .map(|i| Rotation::exp(Vector3::new(0.0, 0.0, omega_z * grid.knot_time(i))))
            .collect();
        state.bundle.rot = So3Spline::new(grid, cps).unwrap();
        let tgrid = state.bundle.trans.grid;
        state.bundle.trans =
            EuclidSpline::constant(tgrid, 4, Vector3::new(0.3, -0.1, 0.2)).unwrap();
        state.bundle.bias_w = EuclidSpline::constant(state.bundle.bias_w.grid, 2, Vector3::zeros()).unwrap();
        state.bundle.bias_a = EuclidSpline::constant(state.bundle.bias_a.grid, 2, Vector3::zeros()).unwrap();
        state
    }

    #[test]
    fn gyro_constant_rate_oracle() {
        let omega_z = 0.7;
        let state = constant_rate_state(omega_z);
        let noise = NoiseModel::unit();
        let pred = state.calib.m_w * (state.calib.r_w_a * Vector3::new(0.0, 0.0, omega_z));
        let s = ImuSample { tau: 3.21, omega: pred, accel: Vector3::zeros() };
        let e = gyro_residual(&s, &state, &noise).unwrap();
        assert!(e.r.amax() < 1e-9, "residual {:?}", e.r);
    }

    #[test]
    fn accel_gravity_only_static() {
        let mut state = constant_rate_state(0.0);
        state.calib.m_a = Matrix3::identity();
        let noise = NoiseModel::unit();
        let r_wb = state.bundle.rot.eval(2.5).unwrap();
        let meas = -(r_wb.transpose() * state.calib.gravity_vector());
        let s = ImuSample { tau: 2.5, omega: Vector3::zeros(), accel: meas };
        let e = accel_residual(&s, &state, &noise).unwrap();
        assert!(e.r.amax() < 1e-9);
    }

    #[test]
    fn accel_centripetal_lever_arm_oracle() {
        let omega_z = 0.9;
        let mut state = constant_rate_state(omega_z);
        state.calib.m_a = Matrix3::identity();
        state.calib.t_b_i = Pose::new(Rotation::identity(), Vector3::new(0.1, 0.05, 0.0));
        let noise = NoiseModel::unit();
        let tau = 4.03;
        let w = Vector3::new(0.0, 0.0, omega_z);
        let r_wb = state.bundle.rot.eval(tau).unwrap();
        let expected = skew(&w) * (skew(&w) * state.calib.t_b_i.trans)
            - r_wb.transpose() * state.calib.gravity_vector();
        let s = ImuSample { tau, omega: Vector3::zeros(), accel: Vector3::zeros() };
        let e = accel_residual(&s, &state, &noise).unwrap();
        let got = Vector3::new(e.r[0], e.r[1], e.r[2]);
        assert!((got - expected).amax() < 1e-6, "got {got:?} expected {expected:?}");
    }

    #[test]
    fn bias_random_walk_whitening() {
        let (_, mut state, noise) = noiseless_setup(7);
        let n = state.bundle.bias_w.cps.len();
        state.bundle.bias_w = EuclidSpline::constant(state.bundle.bias_w.grid, 2, Vector3::new(0.2, -0.1, 0.05)).unwrap();
        for i in 0..n - 1 {
            let e = bias_rw_residual(&state, BiasKind::Gyro, i, &noise);
            assert!(e.r.amax() < 1e-15);
        }
        let dt = state.bundle.bias_a.grid.dt;
        let step = noise.acc_rw_density * dt.sqrt();
        state.bundle.bias_a.cps[3] = state.bundle.bias_a.cps[2] + Vector3::new(step, 0.0, 0.0);
        let e = bias_rw_residual(&state, BiasKind::Accel, 2, &noise);
        assert!((e.r[0] - 1.0).abs() < 1e-12 && e.r[1].abs() < 1e-15);
        for (block, jac) in &e.jacs {
            assert!(matches!(block, ParamBlock::BiasACp(_)));
            assert_eq!(jac.nrows(), 3);
        }
    }

    #[test]
    fn offset_cp_probe_moves_mapped_time() {
        let (_, state, _) = noiseless_setup(8);
        let tau = 3.7;
        let before = state.bundle.off_m.map_time(tau).unwrap();
        let (first, w) = state.bundle.off_m.control_weights(tau).unwrap();
        let d = DVector::from_element(1, 1e-3);
        let moved = apply_delta(&state, ParamBlock::OffMCp(first), &d);
        let after = moved.bundle.off_m.map_time(tau).unwrap();
        assert!((after - before - 1e-3 * w[0]).abs() < 1e-12);
        let _ = Vector1::new(0.0);
    }
}
