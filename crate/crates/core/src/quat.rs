//! Hamilton quaternions (scalar first), rotation vectors and rigid poses.
//!
//! Every attitude update in the crate goes through [`boxplus`]: the increment
//! is a body-frame (right) perturbation, `q' = q ⊗ δq(δθ)`, and all analytic
//! Jacobians are written against that convention.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Tolerance on the norm of a quaternion handed in from outside.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Below this rotation angle the exp/log maps switch to series expansions.
const SMALL_ANGLE: f64 = 1e-6;

/// Unit quaternion `(w, x, y, z)`, Hamilton product convention.
/// Serialized as `[w, x, y, z]`; deserialization rejects non-unit input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl From<UnitQuat> for [f64; 4] {
    fn from(q: UnitQuat) -> Self {
        q.to_array()
    }
}

impl TryFrom<[f64; 4]> for UnitQuat {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new_checked(c[0], c[1], c[2], c[3])
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuat {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Normalizes whatever is given. Panics on a zero or non-finite quaternion.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n.is_finite() && n > 0.0, "cannot normalize quaternion ({w}, {x}, {y}, {z})");
        Self { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    /// Accepts components whose norm is within [`UNIT_TOLERANCE`] of one and
    /// renormalizes them.
    pub fn new_checked(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "quaternion ({w}, {x}, {y}, {z}) has norm {n}, expected 1"
            )));
        }
        if (n - 1.0).abs() <= 2.0 * f64::EPSILON {
            // already unit to rounding; keep the bits so text round trips are exact
            return Ok(Self { w, x, y, z });
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        match s {
            [w, x, y, z] => Self::new_checked(*w, *x, *y, *z),
            _ => Err(Error::InvalidArgument(format!("quaternion needs 4 components, got {}", s.len()))),
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_coords(c: &Vector4<f64>) -> Self {
        Self::new_normalize(c[0], c[1], c[2], c[3])
    }

    pub fn norm(&self) -> f64 {
        self.coords().norm()
    }

    pub fn conj(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Same as [`conj`](Self::conj) for a unit quaternion.
    pub fn inverse(&self) -> Self {
        self.conj()
    }

    /// Representative with a non-negative scalar part. Only used at output
    /// boundaries; arithmetic never canonicalizes.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn negated(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn to_rotation_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the result is canonical (`w >= 0`).
    pub fn from_rotation_matrix(r: &Mat3) -> Self {
        let trace = r.trace();
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [0.25 * s, (r[(2, 1)] - r[(1, 2)]) / s, (r[(0, 2)] - r[(2, 0)]) / s, (r[(1, 0)] - r[(0, 1)]) / s]
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            [(r[(2, 1)] - r[(1, 2)]) / s, 0.25 * s, (r[(0, 1)] + r[(1, 0)]) / s, (r[(0, 2)] + r[(2, 0)]) / s]
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            [(r[(0, 2)] - r[(2, 0)]) / s, (r[(0, 1)] + r[(1, 0)]) / s, 0.25 * s, (r[(1, 2)] + r[(2, 1)]) / s]
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            [(r[(1, 0)] - r[(0, 1)]) / s, (r[(0, 2)] + r[(2, 0)]) / s, (r[(1, 2)] + r[(2, 1)]) / s, 0.25 * s]
        };
        Self::new_normalize(q[0], q[1], q[2], q[3]).canonical()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_rotation_matrix() * v
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    /// ZYX yaw angle of the rotation, in radians.
    pub fn yaw(&self) -> f64 {
        yaw_of(&self.to_rotation_matrix())
    }

    fn raw_mul(p: &Self, q: &Self) -> [f64; 4] {
        [
            p.w * q.w - p.x * q.x - p.y * q.y - p.z * q.z,
            p.w * q.x + p.x * q.w + p.y * q.z - p.z * q.y,
            p.w * q.y - p.x * q.z + p.y * q.w + p.z * q.x,
            p.w * q.z + p.x * q.y - p.y * q.x + p.z * q.w,
        ]
    }
}

impl std::ops::Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        quat_mul(&self, &rhs)
    }
}

/// Hamilton product `p ⊗ q`, renormalized.
pub fn quat_mul(p: &UnitQuat, q: &UnitQuat) -> UnitQuat {
    let r = UnitQuat::raw_mul(p, q);
    UnitQuat::new_normalize(r[0], r[1], r[2], r[3])
}

/// Product of two (possibly non-unit) coefficient vectors, no normalization.
pub fn quat_mul_raw(p: &Vector4<f64>, q: &Vector4<f64>) -> Vector4<f64> {
    left_qmat_raw(p) * q
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn left_qmat_raw(q: &Vector4<f64>) -> Mat4 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

fn right_qmat_raw(q: &Vector4<f64>) -> Mat4 {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Mat4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// `L[q]` with `L[q]·p = q ⊗ p`.
pub fn left_qmat(q: &UnitQuat) -> Mat4 {
    left_qmat_raw(&q.coords())
}

/// `R[q]` with `R[q]·p = p ⊗ q`.
pub fn right_qmat(q: &UnitQuat) -> Mat4 {
    right_qmat_raw(&q.coords())
}

/// Bottom-right 3×3 block of a quaternion-product matrix.
pub fn block3(m: &Mat4) -> Mat3 {
    m.fixed_view::<3, 3>(1, 1).into_owned()
}

/// Right-product matrix of the pure quaternion `(0, ω)`, so that
/// `omega_mat(ω)·q = q ⊗ (0, ω)` and `q̇ = ½·omega_mat(ω)·q`.
pub fn omega_mat(omega: &Vec3) -> Mat4 {
    right_qmat_raw(&Vector4::new(0.0, omega.x, omega.y, omega.z))
}

/// `(0, v)`, not normalized. Only meaningful as an operand of [`quat_mul_raw`].
pub fn pure(v: &Vec3) -> Vector4<f64> {
    Vector4::new(0.0, v.x, v.y, v.z)
}

/// First-order quaternion `normalize(1, δθ/2)`.
pub fn small_angle_quat(dtheta: &Vec3) -> UnitQuat {
    UnitQuat::new_normalize(1.0, 0.5 * dtheta.x, 0.5 * dtheta.y, 0.5 * dtheta.z)
}

pub fn so3_exp(phi: &Vec3) -> UnitQuat {
    let angle = phi.norm();
    let half = 0.5 * angle;
    let (w, k) = if angle < SMALL_ANGLE {
        // sin(θ/2)/θ ≈ ½ − θ²/48
        (1.0 - angle * angle / 8.0, 0.5 - angle * angle / 48.0)
    } else {
        (half.cos(), half.sin() / angle)
    };
    UnitQuat::new_normalize(w, k * phi.x, k * phi.y, k * phi.z)
}

/// Rotation vector with magnitude in `[0, π]`.
pub fn so3_log(q: &UnitQuat) -> Vec3 {
    let q = q.canonical();
    let v = q.vec();
    let s = v.norm();
    if s < SMALL_ANGLE {
        // θ/sin(θ/2) ≈ 2 + θ²/12 with θ ≈ 2s
        return v * (2.0 / q.w) * (1.0 + s * s / (3.0 * q.w * q.w));
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

/// Body-frame attitude update `q ⊗ δq(δθ)`.
pub fn boxplus(q: &UnitQuat, dtheta: &Vec3) -> UnitQuat {
    if *dtheta == Vec3::zeros() {
        *q
    } else if dtheta.norm() < 0.5 {
        quat_mul(q, &small_angle_quat(dtheta))
    } else {
        quat_mul(q, &so3_exp(dtheta))
    }
}

/// Inverse of [`boxplus`]: the `δθ` with `boxplus(from, δθ) = to`.
pub fn boxminus(from: &UnitQuat, to: &UnitQuat) -> Vec3 {
    let d = quat_mul(&from.inverse(), to).canonical();
    let candidate = d.vec() * (2.0 / d.w());
    if d.w() > 0.0 && candidate.norm() < 0.5 {
        candidate
    } else {
        so3_log(&d)
    }
}

/// Orthonormal pair spanning the plane orthogonal to `n`.
///
/// The helper axis is `x` unless `n` is within ~25° of it, in which case `z`
/// is used, so the basis is a smooth function of `n` away from that switch.
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let n = n.normalize();
    let e = if n.x.abs() > 0.9 { Vec3::z() } else { Vec3::x() };
    let b1 = n.cross(&e).normalize();
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// ZYX yaw of a rotation matrix.
pub fn yaw_of(r: &Mat3) -> f64 {
    r[(1, 0)].atan2(r[(0, 0)])
}

pub fn rot_z(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid transform mapping points from the body frame into the reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuat, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: UnitQuat::identity(), translation: Vec3::zeros() }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        rotation: quat_mul(&a.rotation, &b.rotation),
        translation: a.rotation.rotate(&b.translation) + a.translation,
    }
}

/// `(R, p)⁻¹ = (Rᵀ, −Rᵀp)`.
pub fn pose_inverse(a: &Pose) -> Pose {
    let inv = a.rotation.inverse();
    Pose { rotation: inv, translation: -inv.rotate(&a.translation) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuat {
        UnitQuat::new_normalize(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn assert_quat_eq(a: &UnitQuat, b: &UnitQuat, tol: f64) {
        assert_relative_eq!(a.coords(), b.coords(), epsilon = tol);
    }

    #[test]
    fn product_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_quat(&mut rng);
        assert_quat_eq(&quat_mul(&UnitQuat::identity(), &q), &q, 1e-15);
        assert_quat_eq(&quat_mul(&q, &q.conj()), &UnitQuat::identity(), 1e-15);

        let z90 = UnitQuat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let z180 = quat_mul(&z90, &z90);
        assert_relative_eq!(z180.coords(), Vector4::new(0.0, 0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn non_unit_input_is_rejected() {
        assert!(UnitQuat::new_checked(1.0, 0.1, 0.0, 0.0).is_err());
        assert!(UnitQuat::new_checked(1.0 + 1e-8, 0.0, 0.0, 0.0).is_ok());
        assert!(UnitQuat::from_slice(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn conjugate_rules() {
        assert_eq!(UnitQuat::identity().conj(), UnitQuat::identity());
        let q = UnitQuat::new_checked(std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
        assert_relative_eq!(q.conj().coords(), Vector4::new(q.w(), 0.0, 0.0, -q.vec().z), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = random_quat(&mut rng);
            let q = random_quat(&mut rng);
            assert_quat_eq(&quat_mul(&q, &q.inverse()), &UnitQuat::identity(), 1e-14);
            assert_quat_eq(&quat_mul(&p, &q).conj(), &quat_mul(&q.conj(), &p.conj()), 1e-14);
        }
    }

    #[test]
    fn product_matrices_match_hamilton_product() {
        assert_relative_eq!(left_qmat(&UnitQuat::identity()), Mat4::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_quat(&mut rng);
            let q = random_quat(&mut rng);
            assert_relative_eq!(left_qmat(&q) * p.coords(), quat_mul(&q, &p).coords(), epsilon = 1e-14);
            assert_relative_eq!(right_qmat(&q) * p.coords(), quat_mul(&p, &q).coords(), epsilon = 1e-14);
            // L[q⁻¹]₃ₓ₃ = R[q]₃ₓ₃
            assert_relative_eq!(block3(&left_qmat(&q.inverse())), block3(&right_qmat(&q)), epsilon = 1e-12);
            // left and right products commute (associativity)
            let lr = left_qmat(&p) * right_qmat(&q);
            let rl = right_qmat(&q) * left_qmat(&p);
            assert_relative_eq!(lr, rl, epsilon = 1e-12);
        }
    }

    #[test]
    fn skew_and_omega() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        assert_eq!(skew(&Vec3::x()) * Vec3::y(), Vec3::z());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let v = random_vec(&mut rng, 3.0);
            assert_relative_eq!(skew(&v).transpose(), -skew(&v));
            assert_relative_eq!(skew(&v) * v, Vec3::zeros(), epsilon = 1e-14);
            let q = random_quat(&mut rng);
            let expected = quat_mul_raw(&q.coords(), &pure(&v));
            assert_relative_eq!(omega_mat(&v) * q.coords(), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn cross_product_is_not_associative_with_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_quat(&mut rng).to_rotation_matrix() * 2.0;
        let b = random_quat(&mut rng).to_rotation_matrix();
        let p = random_vec(&mut rng, 1.0);
        let lhs = a * skew(&p) * b;
        let rhs = skew(&(a * p)) * b;
        assert!((lhs - rhs).norm() > 1e-3);
    }

    #[test]
    fn rotation_by_sandwich_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            let v = random_vec(&mut rng, 5.0);
            let sandwich = quat_mul_raw(&quat_mul_raw(&q.coords(), &pure(&v)), &q.conj().coords());
            let r = q.to_rotation_matrix();
            assert_relative_eq!(r * v, Vec3::new(sandwich[1], sandwich[2], sandwich[3]), epsilon = 1e-12);
            assert_relative_eq!(r * r.transpose(), Mat3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
            let back = UnitQuat::from_rotation_matrix(&r);
            assert_quat_eq(&back, &q.canonical(), 1e-12);
        }
    }

    #[test]
    fn small_angle_quaternion() {
        assert_eq!(small_angle_quat(&Vec3::zeros()), UnitQuat::identity());
        let q = small_angle_quat(&Vec3::new(2e-3, 0.0, 0.0));
        assert_relative_eq!(q.w(), 1.0, epsilon = 1e-6);
        assert_relative_eq!(q.vec().x, 1e-3, epsilon = 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = random_vec(&mut rng, 0.0578); // |d| <= 0.1
            let diff = (small_angle_quat(&d).coords() - so3_exp(&d).coords()).norm();
            assert!(diff < d.norm().powi(3), "{diff} vs {}", d.norm().powi(3));
        }
    }

    #[test]
    fn exp_log_round_trip() {
        assert_eq!(so3_exp(&Vec3::zeros()), UnitQuat::identity());
        let q = so3_exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let c = std::f64::consts::FRAC_PI_4.cos();
        assert_relative_eq!(q.coords(), Vector4::new(c, 0.0, 0.0, c), epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let axis = random_vec(&mut rng, 1.0).normalize();
            // log-uniform magnitudes so that the series branch gets exercised
            let mag = if i % 2 == 0 {
                10f64.powf(rng.random_range(-9.0..0.0))
            } else {
                rng.random_range(1e-9..3.1)
            };
            let phi = axis * mag;
            worst = worst.max((so3_log(&so3_exp(&phi)) - phi).norm());
        }
        assert!(worst < 1e-8, "worst round trip error {worst}");
    }

    #[test]
    fn boxplus_is_right_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let q = random_quat(&mut rng);
            assert_eq!(boxplus(&q, &Vec3::zeros()), q);
            let d = random_vec(&mut rng, 0.0578);
            let r = boxplus(&q, &d).to_rotation_matrix();
            let first_order = q.to_rotation_matrix() * (Mat3::identity() + skew(&d));
            assert!((r - first_order).norm() < 2.0 * d.norm_squared());
            let back = boxplus(&boxplus(&q, &d), &(-d));
            assert_quat_eq(&back, &q, 1e-9);
            assert_relative_eq!(boxminus(&q, &boxplus(&q, &d)), d, epsilon = 1e-12);
        }
    }

    #[test]
    fn pose_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let a = Pose::new(random_quat(&mut rng), random_vec(&mut rng, 10.0));
            let b = Pose::new(random_quat(&mut rng), random_vec(&mut rng, 10.0));
            let id = pose_compose(&Pose::identity(), &b);
            assert_quat_eq(&id.rotation, &b.rotation, 1e-15);
            let e = pose_compose(&a, &pose_inverse(&a));
            assert_relative_eq!(e.translation, Vec3::zeros(), epsilon = 1e-10);
            assert_quat_eq(&e.rotation.canonical(), &UnitQuat::identity(), 1e-10);
            let e = pose_compose(&pose_inverse(&a), &a);
            assert_relative_eq!(e.translation, Vec3::zeros(), epsilon = 1e-10);
            let p = random_vec(&mut rng, 3.0);
            let chained = a.transform_point(&b.transform_point(&p));
            assert_relative_eq!(pose_compose(&a, &b).transform_point(&p), chained, epsilon = 1e-10);
        }
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = random_vec(&mut rng, 1.0).normalize();
            let (b1, b2) = tangent_basis(&n);
            assert!(b1.dot(&n).abs() < 1e-12 && b2.dot(&n).abs() < 1e-12 && b1.dot(&b2).abs() < 1e-12);
            assert!((b1.norm() - 1.0).abs() < 1e-12 && (b2.norm() - 1.0).abs() < 1e-12);
        }
        let (b1, _) = tangent_basis(&Vec3::x());
        assert!(b1.norm() > 0.99);
    }

    #[test]
    fn yaw_extraction() {
        let q = so3_exp(&Vec3::new(0.0, 0.0, 0.7));
        assert_relative_eq!(q.yaw(), 0.7, epsilon = 1e-14);
        assert_relative_eq!(yaw_of(&rot_z(-2.0)), -2.0, epsilon = 1e-14);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = UnitQuat> {
            (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
                .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
                .prop_map(|(w, x, y, z)| UnitQuat::new_normalize(w, x, y, z))
        }

        proptest! {
            #[test]
            fn products_stay_unit(p in quat(), q in quat()) {
                prop_assert!((quat_mul(&p, &q).norm() - 1.0).abs() < 1e-12);
                prop_assert!((boxplus(&p, &q.vec()).norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
