use serde::{Deserialize, Serialize};

use crate::quat::{Pose, UnitQuat, Vec3};

/// Body state in the world frame: position, attitude, velocity and IMU biases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub p: Vec3,
    pub q: UnitQuat,
    pub v: Vec3,
    pub ba: Vec3,
    pub bg: Vec3,
}

impl FrameState {
    pub fn new(p: Vec3, q: UnitQuat, v: Vec3) -> Self {
        Self { p, q, v, ba: Vec3::zeros(), bg: Vec3::zeros() }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }

    /// `[px, py, pz, qw, qx, qy, qz]`
    pub fn pose_params(&self) -> Vec<f64> {
        let q = self.q.to_array();
        vec![self.p.x, self.p.y, self.p.z, q[0], q[1], q[2], q[3]]
    }

    /// `[vx, vy, vz, bax, bay, baz, bgx, bgy, bgz]`
    pub fn speed_bias_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(9);
        out.extend_from_slice(self.v.as_slice());
        out.extend_from_slice(self.ba.as_slice());
        out.extend_from_slice(self.bg.as_slice());
        out
    }

    pub fn from_params(pose: &[f64], speed_bias: &[f64]) -> Self {
        let (p, q) = pose_from_params(pose);
        Self {
            p,
            q,
            v: Vec3::from_column_slice(&speed_bias[0..3]),
            ba: Vec3::from_column_slice(&speed_bias[3..6]),
            bg: Vec3::from_column_slice(&speed_bias[6..9]),
        }
    }
}

/// Splits a 7-element pose block. The quaternion is renormalized.
pub fn pose_from_params(pose: &[f64]) -> (Vec3, UnitQuat) {
    (
        Vec3::new(pose[0], pose[1], pose[2]),
        UnitQuat::new_normalize(pose[3], pose[4], pose[5], pose[6]),
    )
}

pub fn pose_to_params(p: &Vec3, q: &UnitQuat) -> Vec<f64> {
    let q = q.to_array();
    vec![p.x, p.y, p.z, q[0], q[1], q[2], q[3]]
}

/// Camera-to-body transform: `p_c_b` is the camera centre in the body frame
/// and `q_c_b` rotates camera-frame vectors into the body frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub p_c_b: Vec3,
    pub q_c_b: UnitQuat,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self { p_c_b: Vec3::zeros(), q_c_b: UnitQuat::identity() }
    }
}

impl Extrinsics {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q_c_b, self.p_c_b)
    }

    pub fn params(&self) -> Vec<f64> {
        pose_to_params(&self.p_c_b, &self.q_c_b)
    }

    pub fn from_params(x: &[f64]) -> Self {
        let (p_c_b, q_c_b) = pose_from_params(x);
        Self { p_c_b, q_c_b }
    }
}
