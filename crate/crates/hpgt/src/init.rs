//! Linear initialization of the time-invariant states and the motion spline:
//! IMU preintegration, quaternion hand-eye rotation, a translation-plus-
//! gravity linear system, pose-to-pose hand-eye, and spline seeding.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::factors::{CalibState, SplineBundle, SystemState};
use crate::geometry::{quat_left, quat_right, Pose, Rotation, UnitQuaternion};
use crate::io::{ImuSample, MeasurementSet};
use crate::spline::{fit_euclid, fit_so3, KnotGrid, SplineError, TimeOffsetSpline};

pub const GRAVITY_NOMINAL: f64 = 9.81;
/// Keyframe spacing for the linear initialization stage (s).
pub const KEYFRAME_SPACING: f64 = 0.25;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("too few samples for {0}")]
    TooFewSamples(&'static str),
    #[error("degenerate motion: rotation axes insufficiently excited (gap {gap:.3e})")]
    DegenerateMotion { gap: f64 },
    #[error("rank-deficient linear system (conditioning {cond:.3e})")]
    RankDeficient { cond: f64 },
    #[error("gravity magnitude {got:.3} m/s^2 outside 5% of nominal")]
    GravityMagnitude { got: f64 },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Midpoint-rule IMU preintegration over one keyframe interval, independent
/// of any world frame or gravity.
#[derive(Debug, Clone)]
pub struct Preintegration {
    /// Relative rotation of the last sample frame in the first.
    pub dr: Rotation,
    /// Double-integrated specific force (m).
    pub alpha: Vector3<f64>,
    /// Integrated specific force (m/s).
    pub beta: Vector3<f64>,
    /// Integration span (s).
    pub dt: f64,
}

/// Bias-corrected midpoint integration of an IMU slice.
pub fn preintegrate(
    imu: &[ImuSample],
    bias_w: Vector3<f64>,
    bias_a: Vector3<f64>,
) -> Result<Preintegration, InitError> {
    if imu.len() < 2 {
        return Err(InitError::TooFewSamples("preintegration"));
    }
    let mut dr = Rotation::identity();
    let mut alpha = Vector3::zeros();
    let mut beta = Vector3::zeros();
    for k in 0..imu.len() - 1 {
        let h = imu[k + 1].tau - imu[k].tau;
        let omega_mid = 0.5 * (imu[k].omega + imu[k + 1].omega) - bias_w;
        let dr_next = dr * Rotation::exp(omega_mid * h);
        let a_mid = 0.5 * (dr * (imu[k].accel - bias_a) + dr_next * (imu[k + 1].accel - bias_a));
        alpha += beta * h + 0.5 * a_mid * h * h;
        beta += a_mid * h;
        dr = dr_next;
    }
    Ok(Preintegration {
        dr,
        alpha,
        beta,
        dt: imu[imu.len() - 1].tau - imu[0].tau,
    })
}

/// Solves the rotational hand-eye problem `A X = X B` from relative rotation
/// pairs `(a, b)` by stacking the quaternion operator differences into a
/// `4N x 4` nullspace problem. Returns the extrinsic quaternion and the
/// conditioning score (ratio of the two smallest singular values).
pub fn init_rotation_handeye(
    rel_pairs: &[(Rotation, Rotation)],
) -> Result<(UnitQuaternion, f64), InitError> {
    if rel_pairs.len() < 2 {
        return Err(InitError::TooFewSamples("hand-eye rotation"));
    }
    let mut m = DMatrix::zeros(4 * rel_pairs.len(), 4);
    for (k, (a, b)) in rel_pairs.iter().enumerate() {
        let qa = a.to_quaternion();
        let qb = b.to_quaternion();
        let block = quat_left(&qa) - quat_right(&qb);
        for r in 0..4 {
            for c in 0..4 {
                m[(4 * k + r, c)] = block[(r, c)];
            }
        }
    }
    let svd = m.svd(false, true);
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| sv[i].partial_cmp(&sv[j]).unwrap());
    let smallest = sv[order[0]];
    let second = sv[order[1]];
    let scale = sv[order[3]];
    let gap = second / smallest.max(1e-300);
    // A second near-zero singular value means the nullspace is not unique
    // (parallel axes, or no rotation at all).
    if second < 10.0 * smallest || second <= 1e-10 * scale.max(1e-300) {
        return Err(InitError::DegenerateMotion { gap });
    }
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let x = vt.row(order[0]);
    let q = UnitQuaternion::new_normalize(x[0], x[1], x[2], x[3]).hemisphere_normalized();
    Ok((q, gap))
}

/// One keyframe: MoCap pose measurement at a global-clock timestamp.
#[derive(Debug, Clone, Copy)]
pub struct Keyframe {
    pub t: f64,
    /// Measured `T^P_M` at `t`.
    pub pose: Pose,
}

/// Solution of the stacked translation-and-gravity linear system.
#[derive(Debug, Clone)]
pub struct TranslationGravity {
    pub p_m_i: Vector3<f64>,
    /// Gravity acceleration in the MoCap frame (points down).
    pub g_p: Vector3<f64>,
    /// Keyframe velocities of the IMU frame in `P`.
    pub velocities: Vec<Vector3<f64>>,
    pub residual_rms: f64,
}

/// Stacks the per-interval kinematic constraints into one least-squares
/// problem in the lever arm, the gravity vector, and the chained keyframe
/// velocities. `preints[k]` spans `keys[k] .. keys[k+1]`.
pub fn init_translation_gravity(
    keys: &[Keyframe],
    preints: &[Preintegration],
    r_m_i: &Rotation,
) -> Result<TranslationGravity, InitError> {
    let n = keys.len();
    if n < 4 || preints.len() != n - 1 {
        return Err(InitError::TooFewSamples("translation/gravity system"));
    }
    // Unknowns: [p_M_I (3), g (3), v_0 .. v_{n-1} (3 each)].
    let dim = 6 + 3 * n;
    let rows = 6 * (n - 1);
    let mut a = DMatrix::<f64>::zeros(rows, dim);
    let mut b = DVector::<f64>::zeros(rows);
    for k in 0..n - 1 {
        let ri = keys[k].pose.rot.matrix().clone_owned();
        let rj = keys[k + 1].pose.rot.matrix().clone_owned();
        let dt = preints[k].dt;
        let row = 6 * k;
        let set3 = |a: &mut DMatrix<f64>, r0: usize, c0: usize, m: &Matrix3<f64>| {
            for r in 0..3 {
                for c in 0..3 {
                    a[(r0 + r, c0 + c)] = m[(r, c)];
                }
            }
        };
        set3(&mut a, row, 0, &(rj - ri));
        set3(&mut a, row, 3, &(Matrix3::identity() * (0.5 * dt * dt)));
        set3(&mut a, row, 6 + 3 * k, &(-Matrix3::identity() * dt));
        set3(&mut a, row + 3, 3, &(Matrix3::identity() * dt));
        set3(&mut a, row + 3, 6 + 3 * k, &(-Matrix3::identity()));
        set3(&mut a, row + 3, 6 + 3 * (k + 1), &Matrix3::identity());

        let ri_rot = keys[k].pose.rot * *r_m_i;
        let rhs_p = ri_rot * preints[k].alpha + keys[k].pose.trans - keys[k + 1].pose.trans;
        let rhs_v = ri_rot * preints[k].beta;
        for r in 0..3 {
            b[row + r] = rhs_p[r];
            b[row + 3 + r] = rhs_v[r];
        }
    }

    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.amax();
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = max_sv / min_sv.max(1e-300);
    if min_sv < 1e-8 * max_sv {
        return Err(InitError::RankDeficient { cond });
    }
    let x = svd.solve(&b, 0.0).expect("svd solve");
    let residual_rms = ((&a * &x - &b).norm_squared() / rows as f64).sqrt();

    // The stacked system solves for the upward alignment vector; gravity
    // acceleration is its negation.
    let g_p = -Vector3::new(x[3], x[4], x[5]);
    let velocities = (0..n)
        .map(|k| Vector3::new(x[6 + 3 * k], x[7 + 3 * k], x[8 + 3 * k]))
        .collect();
    Ok(TranslationGravity {
        p_m_i: Vector3::new(x[0], x[1], x[2]),
        g_p,
        velocities,
        residual_rms,
    })
}

/// Pose interpolation on a time-stamped trajectory: geodesic in rotation,
/// linear in translation.
fn interp_pose(traj: &[(f64, Pose)], t: f64) -> Option<Pose> {
    if traj.is_empty() || t < traj[0].0 || t > traj[traj.len() - 1].0 {
        return None;
    }
    let idx = traj.partition_point(|(tt, _)| *tt <= t);
    if idx == 0 {
        return Some(traj[0].1);
    }
    if idx >= traj.len() {
        return Some(traj[traj.len() - 1].1);
    }
    let (t0, p0) = traj[idx - 1];
    let (t1, p1) = traj[idx];
    let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    let dr = (p0.rot.transpose() * p1.rot).log();
    Some(Pose::new(
        p0.rot * Rotation::exp(dr * u),
        p0.trans * (1.0 - u) + p1.trans * u,
    ))
}

/// Pose-to-pose hand-eye calibration `A X = X B` between two trajectories.
///
/// Relative-pose pairs are selected on stream `b` with the same excitation
/// thresholds as the DUT factor pairing; stream `a` is interpolated at
/// `tau_b + offset`. Returns `X`, the pose of `b`'s body in `a`'s body.
pub fn init_handeye_pose_to_pose(
    traj_a: &[(f64, Pose)],
    traj_b: &[(f64, Pose)],
    offset: f64,
) -> Result<Pose, InitError> {
    use crate::factors::select_dut_pairs;
    use crate::io::DutSample;

    if traj_a.len() < 2 || traj_b.len() < 2 {
        return Err(InitError::TooFewSamples("pose-to-pose hand-eye"));
    }
    let as_samples: Vec<DutSample> = traj_b
        .iter()
        .map(|(t, p)| DutSample { tau: *t, pose: *p })
        .collect();
    let pairs = select_dut_pairs(&as_samples);
    let mut rel_pairs = Vec::new();
    let mut rels = Vec::new();
    for pr in &pairs {
        let (ti, pi) = traj_b[pr.i];
        let (tj, pj) = traj_b[pr.j];
        let (Some(ai), Some(aj)) = (
            interp_pose(traj_a, ti + offset),
            interp_pose(traj_a, tj + offset),
        ) else {
            continue;
        };
        let a_rel = ai.relative_to(&aj);
        let b_rel = pi.relative_to(&pj);
        rel_pairs.push((a_rel.rot, b_rel.rot));
        rels.push((a_rel, b_rel));
    }
    if rel_pairs.len() < 2 {
        return Err(InitError::TooFewSamples("pose-to-pose hand-eye"));
    }
    let (q_x, _gap) = init_rotation_handeye(&rel_pairs)?;
    let r_x = q_x.to_rotation();

    // (R_a - I) p_X = R_X p_b - p_a stacked over pairs.
    let mut m = DMatrix::<f64>::zeros(3 * rels.len(), 3);
    let mut rhs = DVector::<f64>::zeros(3 * rels.len());
    for (k, (a_rel, b_rel)) in rels.iter().enumerate() {
        let block = a_rel.rot.matrix() - Matrix3::identity();
        let v = r_x * b_rel.trans - a_rel.trans;
        for r in 0..3 {
            for c in 0..3 {
                m[(3 * k + r, c)] = block[(r, c)];
            }
            rhs[3 * k + r] = v[r];
        }
    }
    let svd = m.svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.amax();
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_sv < 1e-6 * max_sv {
        return Err(InitError::DegenerateMotion {
            gap: max_sv / min_sv.max(1e-300),
        });
    }
    let p_x = svd.solve(&rhs, 0.0).expect("svd solve");
    Ok(Pose::new(r_x, Vector3::new(p_x[0], p_x[1], p_x[2])))
}

/// All time-invariant initial estimates.
#[derive(Debug, Clone)]
pub struct InitResult {
    /// Rotation of the IMU frame in the marker frame.
    pub r_m_i: Rotation,
    /// Lever arm of the IMU frame in the marker frame.
    pub p_m_i: Vector3<f64>,
    /// Gravity acceleration in the MoCap frame (points down).
    pub g_p: Vector3<f64>,
    /// DUT frame in the marker frame.
    pub t_m_d: Pose,
    /// Constant clock offsets onto the global (IMU) clock.
    pub off_m: f64,
    pub off_d: f64,
    pub handeye_gap: f64,
    pub residual_rms: f64,
}

/// Runs the full linear initialization given the constant clock offsets from
/// cross-correlation: keyframing, preintegration, rotational and
/// translational hand-eye, and the gravity gate.
pub fn initialize(set: &MeasurementSet, off_m: f64, off_d: f64) -> Result<InitResult, InitError> {
    if set.imu.len() < 2 || set.mocap.len() < 2 {
        return Err(InitError::TooFewSamples("initialization"));
    }
    // MoCap trajectory on the global clock.
    let mocap_global: Vec<(f64, Pose)> = set
        .mocap
        .iter()
        .map(|m| (m.tau + off_m, m.pose))
        .collect();

    // Keyframes on IMU sample times so the preintegration spans match the
    // MoCap poses exactly.
    let imu_dt = (set.imu[set.imu.len() - 1].tau - set.imu[0].tau) / (set.imu.len() - 1) as f64;
    let step = (KEYFRAME_SPACING / imu_dt).round().max(1.0) as usize;
    let mut keys = Vec::new();
    let mut key_idx = Vec::new();
    let mut k = 0;
    while k < set.imu.len() {
        let t = set.imu[k].tau;
        if let Some(pose) = interp_pose(&mocap_global, t) {
            keys.push(Keyframe { t, pose });
            key_idx.push(k);
        }
        k += step;
    }
    if keys.len() < 4 {
        return Err(InitError::TooFewSamples("keyframes"));
    }

    let mut preints = Vec::with_capacity(keys.len() - 1);
    let mut rel_pairs = Vec::with_capacity(keys.len() - 1);
    for w in 0..keys.len() - 1 {
        let pre = preintegrate(
            &set.imu[key_idx[w]..=key_idx[w + 1]],
            Vector3::zeros(),
            Vector3::zeros(),
        )?;
        let a = keys[w].pose.rot.transpose() * keys[w + 1].pose.rot;
        rel_pairs.push((a, pre.dr));
        preints.push(pre);
    }

    let (q_m_i, handeye_gap) = init_rotation_handeye(&rel_pairs)?;
    let r_m_i = q_m_i.to_rotation();
    let tg = init_translation_gravity(&keys, &preints, &r_m_i)?;
    let g_norm = tg.g_p.norm();
    if (g_norm - GRAVITY_NOMINAL).abs() > 0.05 * GRAVITY_NOMINAL {
        return Err(InitError::GravityMagnitude { got: g_norm });
    }

    let dut_traj: Vec<(f64, Pose)> = set.dut.iter().map(|d| (d.tau, d.pose)).collect();
    // Match a(tau_b + offset) with a keyed on the global clock.
    let t_m_d = init_handeye_pose_to_pose(&mocap_global, &dut_traj, off_d)?;

    Ok(InitResult {
        r_m_i,
        p_m_i: tg.p_m_i,
        g_p: tg.g_p,
        t_m_d,
        off_m,
        off_d,
        handeye_gap,
        residual_rms: tg.residual_rms,
    })
}

/// Rotation taking the measured gravity direction to `-z` along the shortest
/// arc; the yaw of the resulting world frame is an arbitrary gauge choice.
fn gravity_alignment(g_p: &Vector3<f64>) -> Rotation {
    let down = Vector3::new(0.0, 0.0, -1.0);
    let dir = g_p.normalize();
    let cross = dir.cross(&down);
    let s = cross.norm();
    let c = dir.dot(&down);
    if s < 1e-12 {
        if c > 0.0 {
            return Rotation::identity();
        }
        return Rotation::exp(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
    }
    Rotation::exp(cross / s * s.atan2(c))
}

/// Knot spacings of the estimated splines (seconds).
#[derive(Debug, Clone, Copy)]
pub struct KnotSpacing {
    /// Motion splines (orientation and position), order 4.
    pub motion: f64,
    /// Bias splines, order 2.
    pub bias: f64,
    /// Clock-offset splines, order 2.
    pub offset: f64,
}

impl Default for KnotSpacing {
    fn default() -> Self {
        KnotSpacing { motion: 0.05, bias: 5.0, offset: 20.0 }
    }
}

/// Builds the full initial state: motion splines fit to MoCap poses mapped
/// through the initial extrinsics and offsets, constant offset splines, zero
/// biases, identity intrinsics, and a gravity-aligned world frame.
pub fn seed_state(
    set: &MeasurementSet,
    init: &InitResult,
    knots: KnotSpacing,
) -> Result<SystemState, InitError> {
    let motion_knot_dt = knots.motion;
    // Body frame B is the IMU frame: T_B_M = (T_M_I)^-1.
    let t_m_i = Pose::new(init.r_m_i, init.p_m_i);
    let t_b_m = t_m_i.inverse();
    let t_b_d = t_b_m.compose(&init.t_m_d);
    let r_w_p = gravity_alignment(&init.g_p);
    let t_w_p = Pose::new(r_w_p, Vector3::zeros());

    // Trajectory samples in the world frame at mapped timestamps.
    let mut rot_samples = Vec::with_capacity(set.mocap.len());
    let mut trans_samples = Vec::with_capacity(set.mocap.len());
    let mut t_lo = f64::INFINITY;
    let mut t_hi = f64::NEG_INFINITY;
    let t_m_b = t_b_m.inverse();
    for m in &set.mocap {
        let t = m.tau + init.off_m;
        let pose_b = t_w_p.compose(&m.pose).compose(&t_m_b);
        rot_samples.push((t, pose_b.rot));
        trans_samples.push((t, pose_b.trans));
        t_lo = t_lo.min(t);
        t_hi = t_hi.max(t);
    }
    // The trajectory is only observable where MoCap coverage exists, and the
    // fit needs samples in every knot segment, so the grid covers exactly the
    // mapped MoCap span. Measurements of other streams that map outside it
    // are skipped (and counted) during solving. The origin snaps down to the
    // knot lattice so grids built from datasets with different clock offsets
    // share one lattice; the first segment still contains the first sample.
    let t0 = (t_lo / motion_knot_dt).floor() * motion_knot_dt;
    let grid = KnotGrid::covering(t0, t_hi, motion_knot_dt, 4);
    let rot = fit_so3(&rot_samples, grid)?;
    let trans = fit_euclid(&trans_samples, grid, 4)?;

    let bias_grid = KnotGrid::covering(t_lo - 0.5, t_hi + 0.5, knots.bias, 2);
    let bias_w = crate::spline::EuclidSpline::constant(bias_grid, 2, Vector3::zeros())?;
    let bias_a = crate::spline::EuclidSpline::constant(bias_grid, 2, Vector3::zeros())?;

    let off_span = |taus: &mut dyn Iterator<Item = f64>, off0: f64| -> TimeOffsetSpline {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in taus {
            lo = lo.min(t);
            hi = hi.max(t);
        }
        // Stretch the knot spacing so the grid divides the span exactly: a
        // trailing segment with only a sliver of data would leave its last
        // control point nearly unconstrained (offsets carry no smoothness
        // prior), free to bend the offset near the end of the recording.
        let span = (hi - lo) + 0.2;
        let segments = (span / knots.offset).round().max(1.0);
        TimeOffsetSpline::constant(lo - 0.1, hi + 0.1, span / segments, off0)
    };
    let off_m = off_span(&mut set.mocap.iter().map(|m| m.tau), init.off_m);
    let off_i = off_span(&mut set.imu.iter().map(|s| s.tau), 0.0);
    let off_d = off_span(&mut set.dut.iter().map(|d| d.tau), init.off_d);

    let bundle = SplineBundle {
        rot,
        trans,
        bias_w,
        bias_a,
        off_m,
        off_i,
        off_d,
    };
    let calib = CalibState {
        t_b_m,
        t_b_i: Pose::identity(),
        t_b_d,
        t_w_p,
        r_w_a: Rotation::identity(),
        m_w: Matrix3::identity(),
        m_a: Matrix3::identity(),
        g_w: init.g_p.norm(),
    };
    Ok(SystemState { bundle, calib })
}
