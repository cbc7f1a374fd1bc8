//! Visual-inertial alignment: metric scale, gravity and velocities from
//! up-to-scale camera poses and preintegrated IMU deltas.

use nalgebra::{DMatrix, DVector, Matrix3x2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preint::Preintegration;
use crate::quat::{quat_mul, rot_z, tangent_basis, yaw_of, Mat3, UnitQuat, Vec3};
use crate::state::{Extrinsics, FrameState};

/// Condition number above which the system is treated as rank deficient.
pub const MAX_CONDITION: f64 = 1e8;
pub const REFINE_TOLERANCE: f64 = 1e-6;
pub const REFINE_MAX_ITERATIONS: usize = 10;

/// Camera pose relative to the first camera, with translation known only up to scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpToScalePose {
    pub frame_id: usize,
    pub t: f64,
    /// Rotation of camera `k` into camera 0.
    pub q: UnitQuat,
    /// Position of camera `k` in camera 0, divided by the unknown scale.
    pub p: Vec3,
}

/// Body pose in the first camera frame, split so that the metric body
/// position is `s·cam_position − lever`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyPose {
    /// Rotation of body `k` into camera 0.
    pub q: UnitQuat,
    /// Up-to-scale camera position.
    pub cam_position: Vec3,
    /// `R_{b_k}^{c_0}·p_c^b`, metric.
    pub lever: Vec3,
}

impl BodyPose {
    pub fn position(&self, scale: f64) -> Vec3 {
        scale * self.cam_position - self.lever
    }
}

pub fn camera_to_imu(poses: &[UpToScalePose], ext: &Extrinsics) -> Vec<BodyPose> {
    poses
        .iter()
        .map(|c| {
            let q = quat_mul(&c.q, &ext.q_c_b.inverse());
            BodyPose { q, cam_position: c.p, lever: q.rotate(&ext.p_c_b) }
        })
        .collect()
}

/// Stacks six rows per consecutive pair against the unknowns
/// `(v_0, …, v_n, g, s)`, velocities in their own body frames and gravity in
/// camera 0.
pub fn build_alignment_system(
    deltas: &[Preintegration],
    poses: &[BodyPose],
    ext: &Extrinsics,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if poses.len() < 2 {
        return Err(Error::InvalidArgument(format!("alignment needs at least 2 frames, got {}", poses.len())));
    }
    if deltas.len() != poses.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} frames need {} preintegrated intervals, got {}",
            poses.len(),
            poses.len() - 1,
            deltas.len()
        )));
    }
    let n = poses.len();
    let cols = 3 * n + 4;
    let mut a = DMatrix::zeros(6 * (n - 1), cols);
    let mut b = DVector::zeros(6 * (n - 1));
    let gc = 3 * n;
    for (k, d) in deltas.iter().enumerate() {
        let dt = d.dt_total;
        let rk = poses[k].q.to_rotation_matrix();
        let rk1 = poses[k + 1].q.to_rotation_matrix();
        let rkt = rk.transpose();
        let rel = rkt * rk1;
        let row = 6 * k;
        let mut put = |r: usize, c: usize, m: &Mat3| a.fixed_view_mut::<3, 3>(r, c).copy_from(m);
        put(row, 3 * k, &(-dt * Mat3::identity()));
        put(row, gc, &(0.5 * dt * dt * rkt));
        put(row + 3, 3 * k, &(-Mat3::identity()));
        put(row + 3, 3 * (k + 1), &rel);
        put(row + 3, gc, &(dt * rkt));
        a.fixed_view_mut::<3, 1>(row, cols - 1)
            .copy_from(&(rkt * (poses[k + 1].cam_position - poses[k].cam_position)));
        b.fixed_rows_mut::<3>(row).copy_from(&(d.alpha - ext.p_c_b + rel * ext.p_c_b));
        b.fixed_rows_mut::<3>(row + 3).copy_from(&d.beta);
    }
    Ok((a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Per-frame velocity in its own body frame, m/s.
    pub velocities: Vec<Vec3>,
    /// Gravity in the first camera frame, m/s².
    pub gravity: Vec3,
    pub scale: f64,
    pub residual_norm: f64,
    /// Condition number of the column-equilibrated system.
    pub condition: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn equilibrated_condition(a: &DMatrix<f64>) -> f64 {
    let mut scaled = a.clone();
    for mut c in scaled.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    let sv = scaled.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if a.nrows() < a.ncols() {
        return Err(Error::DegenerateMotion(format!("{} equations for {} unknowns", a.nrows(), a.ncols())));
    }
    let cond = equilibrated_condition(a);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::DegenerateMotion(format!("alignment system condition {cond:.3e} exceeds {MAX_CONDITION:.0e}")));
    }
    let x = a
        .clone()
        .svd(true, true)
        .solve(b, 0.0)
        .map_err(|e| Error::DegenerateMotion(e.to_string()))?;
    Ok((x, cond))
}

fn unpack(x: &DVector<f64>, n: usize) -> (Vec<Vec3>, f64) {
    let v = (0..n).map(|k| Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2])).collect();
    (v, x[x.len() - 1])
}

/// Unconstrained least-squares solve of the stacked system.
pub fn solve_alignment(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<AlignmentResult> {
    let (x, condition) = least_squares(a, b)?;
    let n = (a.ncols() - 4) / 3;
    let (velocities, scale) = unpack(&x, n);
    if !(scale > 0.0) {
        return Err(Error::InitializationFailed(format!("recovered scale {scale:.3e} is not positive")));
    }
    let gravity = Vec3::new(x[3 * n], x[3 * n + 1], x[3 * n + 2]);
    Ok(AlignmentResult {
        velocities,
        gravity,
        scale,
        residual_norm: (a * &x - b).norm(),
        condition,
        converged: true,
        iterations: 0,
    })
}

/// Re-solves with gravity constrained to magnitude `g_mag`, two tangent
/// parameters per iteration.
pub fn refine_gravity(a: &DMatrix<f64>, b: &DVector<f64>, g0: &Vec3, g_mag: f64) -> Result<AlignmentResult> {
    if !(g0.norm() > 0.0) {
        return Err(Error::InvalidArgument("initial gravity is zero".into()));
    }
    let n = (a.ncols() - 4) / 3;
    let gc = 3 * n;
    let mut g = g0.normalize() * g_mag;
    let mut result = None;
    for it in 1..=REFINE_MAX_ITERATIONS {
        let (b1, b2) = tangent_basis(&g.normalize());
        let basis = Matrix3x2::from_columns(&[b1, b2]);
        let mut ar = DMatrix::zeros(a.nrows(), a.ncols() - 1);
        ar.columns_mut(0, gc).copy_from(&a.columns(0, gc));
        let ag = a.columns(gc, 3);
        ar.columns_mut(gc, 2).copy_from(&(ag * basis));
        ar.column_mut(gc + 2).copy_from(&a.column(gc + 3));
        let br = b - ag * g;
        let (x, condition) = least_squares(&ar, &br)?;
        let w = nalgebra::Vector2::new(x[gc], x[gc + 1]);
        g = (g + basis * w).normalize() * g_mag;
        let (velocities, scale) = unpack(&x, n);
        let done = w.norm() < REFINE_TOLERANCE;
        let full = DVector::from_iterator(a.ncols(), x.iter().take(gc).copied().chain(g.iter().copied()).chain([scale]));
        result = Some(AlignmentResult {
            velocities,
            gravity: g,
            scale,
            residual_norm: (a * &full - b).norm(),
            condition,
            converged: done,
            iterations: it,
        });
        if done {
            break;
        }
    }
    let result = result.expect("at least one iteration");
    if !result.converged {
        log::warn!("gravity refinement stopped after {REFINE_MAX_ITERATIONS} iterations without converging");
    }
    if !(result.scale > 0.0) {
        return Err(Error::InitializationFailed(format!("refined scale {:.3e} is not positive", result.scale)));
    }
    Ok(result)
}

/// Rotation from camera 0 into a world frame whose `+z` is along gravity
/// and in which the first body frame has zero yaw.
pub fn world_frame_from_gravity(g_c0: &Vec3, q_b0_c0: &UnitQuat) -> Result<Mat3> {
    let n = g_c0.norm();
    if !(n > 0.0) {
        return Err(Error::InvalidArgument("gravity vector is zero".into()));
    }
    let u = g_c0 / n;
    let z = Vec3::z();
    let axis = u.cross(&z);
    let s = axis.norm();
    let c = u.dot(&z);
    let tilt = if s < 1e-12 {
        if c > 0.0 {
            Mat3::identity()
        } else {
            UnitQuat::from_axis_angle(&Vec3::x(), std::f64::consts::PI).to_rotation_matrix()
        }
    } else {
        UnitQuat::from_axis_angle(&(axis / s), s.atan2(c)).to_rotation_matrix()
    };
    let yaw = yaw_of(&(tilt * q_b0_c0.to_rotation_matrix()));
    Ok(rot_z(-yaw) * tilt)
}

/// Full alignment: build, solve, refine gravity.
pub fn align(deltas: &[Preintegration], poses: &[BodyPose], ext: &Extrinsics, g_mag: f64) -> Result<AlignmentResult> {
    let (a, b) = build_alignment_system(deltas, poses, ext)?;
    let first = solve_alignment(&a, &b)?;
    refine_gravity(&a, &b, &first.gravity, g_mag)
}

/// World-frame states implied by an alignment, the first body at the origin.
/// Biases are set to the supplied values.
pub fn initial_states(
    result: &AlignmentResult,
    poses: &[BodyPose],
    ba: &Vec3,
    bg: &Vec3,
) -> Result<(Vec<FrameState>, Mat3)> {
    let r_wc = world_frame_from_gravity(&result.gravity, &poses[0].q)?;
    let q_wc = UnitQuat::from_rotation_matrix(&r_wc);
    let origin = poses[0].position(result.scale);
    let states = poses
        .iter()
        .zip(&result.velocities)
        .map(|(p, v)| {
            let q = quat_mul(&q_wc, &p.q);
            FrameState { p: r_wc * (p.position(result.scale) - origin), q, v: q.rotate(v), ba: *ba, bg: *bg }
        })
        .collect();
    Ok((states, r_wc))
}
