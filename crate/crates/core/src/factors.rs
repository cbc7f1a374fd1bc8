//! IMU preintegration and inverse-depth vision residuals with analytic
//! Jacobians, plus whitening.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preint::{idx, Mat15, Preintegration};
use crate::quat::{block3, left_qmat, quat_mul, right_qmat, skew, tangent_basis, Mat3, Pose, UnitQuat, Vec3};
use crate::solver::{BlockKind, Factor, FactorEval};
use crate::state::{pose_from_params, Extrinsics, FrameState};

pub type Vec15 = SVector<f64, 15>;
pub type Mat15x6 = SMatrix<f64, 15, 6>;
pub type Mat15x9 = SMatrix<f64, 15, 9>;
pub type Mat2x6 = SMatrix<f64, 2, 6>;
pub type Mat2x3 = SMatrix<f64, 2, 3>;

/// Square-root information `L` (lower triangular, `LᵀL = P⁻¹`).
///
/// Eigenvalues of `P` below `1e-12·λ_max` are raised to that floor first so
/// that near-empty intervals do not produce unbounded weights.
pub fn sqrt_information(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("covariance has non-finite entries".into()));
    }
    let sym = 0.5 * (p + p.transpose());
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) {
        return Err(Error::InvalidArgument("covariance is zero".into()));
    }
    let floor = 1e-12 * max;
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let regular = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let regular = 0.5 * (&regular + regular.transpose());
    let chol = regular
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("regularized covariance is not positive definite".into()))?;
    let c = chol.l();
    let n = c.nrows();
    let inv = c
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::InvalidArgument("singular covariance factor".into()))?;
    Ok(inv)
}

/// Applies `L` to a residual and its Jacobian blocks.
pub fn whiten(
    residual: &DVector<f64>,
    jacobians: &[DMatrix<f64>],
    sqrt_info: &DMatrix<f64>,
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
    if sqrt_info.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("square-root information has non-finite entries".into()));
    }
    Ok((sqrt_info * residual, jacobians.iter().map(|j| sqrt_info * j).collect()))
}

/// Unwhitened IMU Jacobian blocks with respect to
/// `(p_k, θ_k)`, `(v_k, ba_k, bg_k)`, `(p_k+1, θ_k+1)`, `(v_k+1, ba_k+1, bg_k+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuJacobians {
    pub pose_i: Mat15x6,
    pub speed_bias_i: Mat15x9,
    pub pose_j: Mat15x6,
    pub speed_bias_j: Mat15x9,
}

#[derive(Clone, Debug)]
pub struct ImuFactor {
    pub delta: Preintegration,
    pub gravity: Vec3,
    pub sqrt_info: Mat15,
}

impl ImuFactor {
    pub fn new(delta: Preintegration, gravity: Vec3) -> Result<Self> {
        if !(delta.dt_total > 0.0) {
            return Err(Error::InvalidArgument("IMU factor over an empty interval".into()));
        }
        let l = sqrt_information(&DMatrix::from_column_slice(15, 15, delta.cov.as_slice()))?;
        let sqrt_info = Mat15::from_column_slice(l.as_slice());
        Ok(Self { delta, gravity, sqrt_info })
    }

    /// Error quaternion `γ̂⁻¹ ⊗ q_i⁻¹ ⊗ q_j` at the bias-corrected `γ̂`, with
    /// the sign that gives a non-negative scalar part.
    fn attitude_error(&self, gamma: &UnitQuat, si: &FrameState, sj: &FrameState) -> (UnitQuat, f64) {
        let e = quat_mul(&quat_mul(&gamma.inverse(), &si.q.inverse()), &sj.q);
        if e.w() < 0.0 {
            (e.negated(), -1.0)
        } else {
            (e, 1.0)
        }
    }

    /// Derivative of `2·vec(γ̂⁻¹ ⊗ q_i⁻¹ ⊗ q_j)` with respect to `bg_i`, before
    /// the sign fix. Differentiates the normalized correction quaternion
    /// exactly; at the linearization bias it equals `−L[q_j⁻¹ ⊗ q_i ⊗ γ̂]₃ₓ₃·J`.
    fn attitude_gyro_bias_block(&self, si: &FrameState, sj: &FrameState) -> Mat3 {
        let jg = self.delta.jac_block(idx::THETA, idx::BG);
        let phi = 0.5 * jg * (si.bg - self.delta.lin_bg);
        let s = (1.0 + phi.norm_squared()).sqrt();
        let c = quat_mul(&quat_mul(&self.delta.gamma.inverse(), &si.q.inverse()), &sj.q);
        // d/dφ of the conjugate correction (1, −φ)/s
        let mut dq = SMatrix::<f64, 4, 3>::zeros();
        dq.fixed_view_mut::<3, 3>(1, 0).copy_from(&(-Mat3::identity() / s));
        let unnorm = nalgebra::Vector4::new(1.0, -phi.x, -phi.y, -phi.z);
        dq -= unnorm * phi.transpose() / (s * s * s);
        right_qmat(&c).fixed_rows::<3>(1) * dq * jg
    }

    /// Unwhitened residual `(δα, δθ, δβ, δba, δbg)`.
    pub fn residual(&self, si: &FrameState, sj: &FrameState) -> Vec15 {
        let (alpha, beta, gamma) = self.delta.correct_for_bias(&si.ba, &si.bg);
        let dt = self.delta.dt_total;
        let rt = si.q.to_rotation_matrix().transpose();
        let (e, _) = self.attitude_error(&gamma, si, sj);
        let mut r = Vec15::zeros();
        r.fixed_rows_mut::<3>(idx::ALPHA)
            .copy_from(&(rt * (sj.p - si.p - si.v * dt + 0.5 * self.gravity * dt * dt) - alpha));
        r.fixed_rows_mut::<3>(idx::THETA).copy_from(&(2.0 * e.vec()));
        r.fixed_rows_mut::<3>(idx::BETA).copy_from(&(rt * (sj.v - si.v + self.gravity * dt) - beta));
        r.fixed_rows_mut::<3>(idx::BA).copy_from(&(sj.ba - si.ba));
        r.fixed_rows_mut::<3>(idx::BG).copy_from(&(sj.bg - si.bg));
        r
    }

    pub fn jacobians(&self, si: &FrameState, sj: &FrameState) -> ImuJacobians {
        let (_, _, gamma) = self.delta.correct_for_bias(&si.ba, &si.bg);
        let dt = self.delta.dt_total;
        let rt = si.q.to_rotation_matrix().transpose();
        let (e, sign) = self.attitude_error(&gamma, si, sj);
        let d = &self.delta;
        let (a, t, b, ba, bg) = (idx::ALPHA, idx::THETA, idx::BETA, idx::BA, idx::BG);

        let mut j0 = Mat15x6::zeros();
        j0.fixed_view_mut::<3, 3>(a, 0).copy_from(&(-rt));
        j0.fixed_view_mut::<3, 3>(a, 3)
            .copy_from(&skew(&(rt * (sj.p - si.p - si.v * dt + 0.5 * self.gravity * dt * dt))));
        let qj_inv_qi = quat_mul(&sj.q.inverse(), &si.q);
        j0.fixed_view_mut::<3, 3>(t, 3)
            .copy_from(&(-sign * block3(&(left_qmat(&qj_inv_qi) * right_qmat(&gamma)))));
        j0.fixed_view_mut::<3, 3>(b, 3).copy_from(&skew(&(rt * (sj.v - si.v + self.gravity * dt))));

        let mut j1 = Mat15x9::zeros();
        j1.fixed_view_mut::<3, 3>(a, 0).copy_from(&(-rt * dt));
        j1.fixed_view_mut::<3, 3>(a, 3).copy_from(&(-d.jac_block(a, ba)));
        j1.fixed_view_mut::<3, 3>(a, 6).copy_from(&(-d.jac_block(a, bg)));
        j1.fixed_view_mut::<3, 3>(t, 6).copy_from(&(sign * self.attitude_gyro_bias_block(si, sj)));
        j1.fixed_view_mut::<3, 3>(b, 0).copy_from(&(-rt));
        j1.fixed_view_mut::<3, 3>(b, 3).copy_from(&(-d.jac_block(b, ba)));
        j1.fixed_view_mut::<3, 3>(b, 6).copy_from(&(-d.jac_block(b, bg)));
        j1.fixed_view_mut::<3, 3>(ba, 3).copy_from(&(-Mat3::identity()));
        j1.fixed_view_mut::<3, 3>(bg, 6).copy_from(&(-Mat3::identity()));

        let mut j2 = Mat15x6::zeros();
        j2.fixed_view_mut::<3, 3>(a, 0).copy_from(&rt);
        j2.fixed_view_mut::<3, 3>(t, 3).copy_from(&block3(&left_qmat(&e)));

        let mut j3 = Mat15x9::zeros();
        j3.fixed_view_mut::<3, 3>(b, 0).copy_from(&rt);
        j3.fixed_view_mut::<3, 3>(ba, 3).copy_from(&Mat3::identity());
        j3.fixed_view_mut::<3, 3>(bg, 6).copy_from(&Mat3::identity());

        ImuJacobians { pose_i: j0, speed_bias_i: j1, pose_j: j2, speed_bias_j: j3 }
    }
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

impl Factor for ImuFactor {
    fn residual_dim(&self) -> usize {
        15
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        vec![BlockKind::Pose, BlockKind::SpeedBias, BlockKind::Pose, BlockKind::SpeedBias]
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let si = FrameState::from_params(params[0], params[1]);
        let sj = FrameState::from_params(params[2], params[3]);
        let r = self.sqrt_info * self.residual(&si, &sj);
        let jacs = if jacobians {
            let j = self.jacobians(&si, &sj);
            vec![
                to_dmatrix(&(self.sqrt_info * j.pose_i)),
                to_dmatrix(&(self.sqrt_info * j.speed_bias_i)),
                to_dmatrix(&(self.sqrt_info * j.pose_j)),
                to_dmatrix(&(self.sqrt_info * j.speed_bias_j)),
            ]
        } else {
            Vec::new()
        };
        Ok(FactorEval { residual: DVector::from_column_slice(r.as_slice()), jacobians: jacs })
    }

    fn name(&self) -> &'static str {
        "imu"
    }
}

/// One observation of a landmark on the normalized image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureObs {
    pub frame: usize,
    pub u: f64,
    pub v: f64,
}

impl FeatureObs {
    /// `(u, v, 1)`.
    pub fn point(&self) -> Vec3 {
        Vec3::new(self.u, self.v, 1.0)
    }

    pub fn bearing(&self) -> Vec3 {
        self.point().normalize()
    }
}

/// A landmark parameterized by inverse depth along its anchor observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub id: u64,
    /// Frame of the first observation.
    pub anchor: usize,
    pub inv_depth: f64,
    /// Observations ordered by frame, the first one in the anchor frame.
    pub observations: Vec<FeatureObs>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VisionMode {
    /// Unit-bearing difference projected on the tangent plane of the measurement.
    #[default]
    Tangent,
    /// Difference on the normalized image plane.
    Plane,
}

/// Landmark in camera `j`, from its anchor point `(u, v, 1)` in camera `i`.
pub fn transform_feature(anchor_point: &Vec3, inv_depth: f64, pose_i: &Pose, pose_j: &Pose, ext: &Extrinsics) -> Vec3 {
    let r_bc = ext.q_c_b.to_rotation_matrix();
    let p_ci = anchor_point / inv_depth;
    let p_bi = r_bc * p_ci + ext.p_c_b;
    let p_w = pose_i.rotation.rotate(&p_bi) + pose_i.translation;
    let p_bj = pose_j.rotation.to_rotation_matrix().transpose() * (p_w - pose_j.translation);
    r_bc.transpose() * (p_bj - ext.p_c_b)
}

/// Unwhitened vision Jacobian blocks with respect to `(p_i, θ_i)`,
/// `(p_j, θ_j)`, the extrinsic `(p, θ)` and the inverse depth.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionJacobians {
    pub pose_i: Mat2x6,
    pub pose_j: Mat2x6,
    pub extrinsic: Mat2x6,
    pub inv_depth: Vector2<f64>,
}

#[derive(Clone, Debug)]
pub struct VisionFactor {
    pub anchor_point: Vec3,
    pub measured: Vec3,
    pub mode: VisionMode,
    /// Isotropic weight applied to the residual (focal length over pixel sigma).
    pub weight: f64,
    basis: (Vec3, Vec3),
}

impl VisionFactor {
    pub fn new(anchor: &FeatureObs, obs: &FeatureObs, mode: VisionMode, weight: f64) -> Result<Self> {
        if anchor.frame == obs.frame {
            return Err(Error::InvalidArgument(format!(
                "vision factor between frame {} and itself",
                obs.frame
            )));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::InvalidArgument(format!("vision weight {weight} must be positive")));
        }
        Ok(Self {
            anchor_point: anchor.point(),
            measured: obs.point(),
            mode,
            weight,
            basis: tangent_basis(&obs.bearing()),
        })
    }

    pub fn point_in_camera(&self, pose_i: &Pose, pose_j: &Pose, ext: &Extrinsics, inv_depth: f64) -> Vec3 {
        transform_feature(&self.anchor_point, inv_depth, pose_i, pose_j, ext)
    }

    fn reduce(&self, p: &Vec3) -> Result<(Vector2<f64>, Mat2x3)> {
        match self.mode {
            VisionMode::Tangent => {
                let (b1, b2) = self.basis;
                let n = p.norm();
                let diff = p / n - self.measured.normalize();
                let r = Vector2::new(b1.dot(&diff), b2.dot(&diff));
                let d = (Mat3::identity() - p * p.transpose() / (n * n)) / n;
                let bt = Mat2x3::from_rows(&[b1.transpose(), b2.transpose()]);
                Ok((r, bt * d))
            }
            VisionMode::Plane => {
                if p.z <= 1e-6 {
                    return Err(Error::BehindCamera { depth: p.z });
                }
                let r = Vector2::new(p.x / p.z - self.measured.x, p.y / p.z - self.measured.y);
                let z2 = p.z * p.z;
                let d = Mat2x3::new(1.0 / p.z, 0.0, -p.x / z2, 0.0, 1.0 / p.z, -p.y / z2);
                Ok((r, d))
            }
        }
    }

    /// Unwhitened 2-vector residual.
    pub fn residual(&self, pose_i: &Pose, pose_j: &Pose, ext: &Extrinsics, inv_depth: f64) -> Result<Vector2<f64>> {
        Ok(self.reduce(&self.point_in_camera(pose_i, pose_j, ext, inv_depth))?.0)
    }

    pub fn evaluate_raw(
        &self,
        pose_i: &Pose,
        pose_j: &Pose,
        ext: &Extrinsics,
        inv_depth: f64,
    ) -> Result<(Vector2<f64>, VisionJacobians)> {
        let r_bc = ext.q_c_b.to_rotation_matrix();
        let r_i = pose_i.rotation.to_rotation_matrix();
        let r_j = pose_j.rotation.to_rotation_matrix();
        let p_ci = self.anchor_point / inv_depth;
        let p_bi = r_bc * p_ci + ext.p_c_b;
        let p_w = r_i * p_bi + pose_i.translation;
        let p_bj = r_j.transpose() * (p_w - pose_j.translation);
        let p = r_bc.transpose() * (p_bj - ext.p_c_b);
        let (r, dr) = self.reduce(&p)?;

        let cj = r_bc.transpose() * r_j.transpose();
        let m = cj * r_i * r_bc;

        let mut ji = SMatrix::<f64, 3, 6>::zeros();
        ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&cj);
        ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-cj * r_i * skew(&p_bi)));

        let mut jj = SMatrix::<f64, 3, 6>::zeros();
        jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-cj));
        jj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r_bc.transpose() * skew(&p_bj)));

        let mut je = SMatrix::<f64, 3, 6>::zeros();
        je.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r_bc.transpose() * (r_j.transpose() * r_i - Mat3::identity())));
        je.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&p) - m * skew(&p_ci)));

        let jl = -m * self.anchor_point / (inv_depth * inv_depth);

        Ok((
            r,
            VisionJacobians { pose_i: dr * ji, pose_j: dr * jj, extrinsic: dr * je, inv_depth: dr * jl },
        ))
    }
}

impl Factor for VisionFactor {
    fn residual_dim(&self) -> usize {
        2
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        vec![BlockKind::Pose, BlockKind::Pose, BlockKind::Pose, BlockKind::InverseDepth]
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let (pi, qi) = pose_from_params(params[0]);
        let (pj, qj) = pose_from_params(params[1]);
        let ext = Extrinsics::from_params(params[2]);
        let pose_i = Pose::new(qi, pi);
        let pose_j = Pose::new(qj, pj);
        let lambda = params[3][0];
        let w = self.weight;
        if jacobians {
            let (r, j) = self.evaluate_raw(&pose_i, &pose_j, &ext, lambda)?;
            Ok(FactorEval {
                residual: DVector::from_column_slice((r * w).as_slice()),
                jacobians: vec![
                    to_dmatrix(&(j.pose_i * w)),
                    to_dmatrix(&(j.pose_j * w)),
                    to_dmatrix(&(j.extrinsic * w)),
                    DMatrix::from_column_slice(2, 1, (j.inv_depth * w).as_slice()),
                ],
            })
        } else {
            let r = self.residual(&pose_i, &pose_j, &ext, lambda)?;
            Ok(FactorEval { residual: DVector::from_column_slice((r * w).as_slice()), jacobians: Vec::new() })
        }
    }

    fn name(&self) -> &'static str {
        "vision"
    }
}

/// Holds the position and heading of one pose at reference values. The
/// window cost is otherwise invariant to a global translation and a rotation
/// about gravity.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeFactor {
    pub position: Vec3,
    pub yaw: f64,
    pub weight: f64,
}

impl GaugeFactor {
    pub fn new(position: Vec3, yaw: f64, weight: f64) -> Self {
        Self { position, yaw, weight }
    }

    pub fn residual(&self, p: &Vec3, q: &UnitQuat) -> SVector<f64, 4> {
        let dp = p - self.position;
        let dyaw = wrap_angle(q.yaw() - self.yaw);
        SVector::<f64, 4>::new(dp.x, dp.y, dp.z, dyaw) * self.weight
    }

    /// Derivative of the residual with respect to `[δp, δθ]` (right attitude perturbation).
    pub fn jacobian(&self, q: &UnitQuat) -> SMatrix<f64, 4, 6> {
        let r = q.to_rotation_matrix();
        let (c, s) = (r[(0, 0)], r[(1, 0)]);
        let den = c * c + s * s;
        // first column of R·[δθ]× is (row_k · (0, δz, −δy))
        let d_s = Vec3::new(0.0, -r[(1, 2)], r[(1, 1)]);
        let d_c = Vec3::new(0.0, -r[(0, 2)], r[(0, 1)]);
        let dyaw = (d_s * c - d_c * s) / den;
        let mut j = SMatrix::<f64, 4, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
        j.fixed_view_mut::<1, 3>(3, 3).copy_from(&dyaw.transpose());
        j * self.weight
    }
}

fn wrap_angle(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

impl Factor for GaugeFactor {
    fn residual_dim(&self) -> usize {
        4
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        vec![BlockKind::Pose]
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let (p, q) = pose_from_params(params[0]);
        let r = self.residual(&p, &q);
        let jacs = if jacobians { vec![to_dmatrix(&self.jacobian(&q))] } else { Vec::new() };
        Ok(FactorEval { residual: DVector::from_column_slice(r.as_slice()), jacobians: jacs })
    }

    fn name(&self) -> &'static str {
        "gauge"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{self, Draw};
    use crate::preint::{preint_batch, ImuSample, NoiseParams};
    use crate::quat::{boxplus, so3_exp};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn static_samples(n: usize, dt: f64, g: f64) -> Vec<ImuSample> {
        (0..=n).map(|k| ImuSample::new(k as f64 * dt, Vec3::zeros(), Vec3::new(0.0, 0.0, g))).collect()
    }

    #[test]
    fn stationary_residual_vanishes() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let d = preint_batch(&static_samples(20, 0.005, 9.81), Vec3::zeros(), Vec3::zeros(), &NoiseParams::default()).unwrap();
        let f = ImuFactor::new(d, g).unwrap();
        let s = FrameState::new(Vec3::new(1.0, 2.0, 3.0), UnitQuat::identity(), Vec3::zeros());
        assert!(f.residual(&s, &s).amax() < 1e-12);
    }

    #[test]
    fn bias_rows_are_differences() {
        let g = Vec3::new(0.0, 0.0, 9.81);
        let d = preint_batch(&static_samples(20, 0.005, 9.81), Vec3::zeros(), Vec3::zeros(), &NoiseParams::default()).unwrap();
        let f = ImuFactor::new(d, g).unwrap();
        let s = FrameState::new(Vec3::zeros(), UnitQuat::identity(), Vec3::zeros());
        let mut sj = s;
        sj.bg = Vec3::new(1e-3, 0.0, 0.0);
        let r0 = f.residual(&s, &s);
        let r1 = f.residual(&s, &sj);
        let diff = r1 - r0;
        assert_relative_eq!(diff.fixed_rows::<3>(idx::BG).into_owned(), sj.bg, epsilon = 1e-15);
        assert_eq!(diff.fixed_rows::<12>(0).amax(), 0.0);
    }

    #[test]
    fn linear_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = check::random_imu_draw(&mut rng);
        let j = draw.factor.jacobians(&draw.si, &draw.sj);
        let rt = draw.si.q.to_rotation_matrix().transpose();
        assert_eq!(j.speed_bias_j.fixed_view::<3, 3>(idx::BETA, 0).into_owned(), rt);
        assert_eq!(j.speed_bias_i.fixed_view::<3, 3>(idx::BA, 3).into_owned(), -Mat3::identity());
        assert_eq!(j.speed_bias_i.fixed_view::<3, 3>(idx::BG, 6).into_owned(), -Mat3::identity());
        assert_eq!(j.speed_bias_j.fixed_view::<3, 3>(idx::BA, 3).into_owned(), Mat3::identity());
        assert_eq!(j.speed_bias_j.fixed_view::<3, 3>(idx::BG, 6).into_owned(), Mat3::identity());
    }

    #[test]
    fn imu_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let draw = check::random_imu_draw(&mut rng);
            for res in check::imu_gate(&draw, None) {
                assert!(res.passed, "{res:?}");
            }
        }
    }

    #[test]
    fn vision_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [VisionMode::Tangent, VisionMode::Plane] {
            for _ in 0..20 {
                let draw = check::random_vision_draw(&mut rng, mode);
                for res in check::vision_gate(&draw, None).unwrap() {
                    assert!(res.passed, "{res:?}");
                }
            }
        }
    }

    #[test]
    fn imu_gauge_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let Draw { factor, si, sj } = check::random_imu_draw(&mut rng);
        let r = factor.residual(&si, &sj);
        let yaw = UnitQuat::from_axis_angle(&Vec3::z(), rng.random_range(-3.0..3.0));
        let t = Vec3::new(3.0, -1.0, 2.0);
        let move_state = |s: &FrameState| FrameState {
            p: yaw.rotate(&s.p) + t,
            q: quat_mul(&yaw, &s.q),
            v: yaw.rotate(&s.v),
            ..*s
        };
        let r2 = factor.residual(&move_state(&si), &move_state(&sj));
        assert!((r - r2).amax() < 1e-9);

        let roll = UnitQuat::from_axis_angle(&Vec3::x(), 0.3);
        let tilt = |s: &FrameState| FrameState { p: roll.rotate(&s.p), q: quat_mul(&roll, &s.q), v: roll.rotate(&s.v), ..*s };
        let r3 = factor.residual(&tilt(&si), &tilt(&sj));
        assert!((r - r3).amax() > 1e-3);
    }

    fn identity_case(t: Vec3) -> (VisionFactor, Pose, Pose) {
        let anchor = FeatureObs { frame: 0, u: 0.1, v: -0.2 };
        let obs = FeatureObs { frame: 1, u: 0.0, v: 0.0 };
        let f = VisionFactor::new(&anchor, &obs, VisionMode::Tangent, 1.0).unwrap();
        (f, Pose::identity(), Pose::new(UnitQuat::identity(), t))
    }

    #[test]
    fn transform_with_identity_rotations() {
        let t = Vec3::new(0.3, -0.1, 0.2);
        let (f, pi, pj) = identity_case(t);
        let ext = Extrinsics::default();
        let p = f.point_in_camera(&pi, &pj, &ext, 0.25);
        assert_relative_eq!(p, f.anchor_point / 0.25 - t, epsilon = 1e-14);
        let p2 = f.point_in_camera(&pi, &pj, &ext, 0.5);
        assert_relative_eq!(p2 + t, (p + t) / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn same_frame_is_rejected() {
        let a = FeatureObs { frame: 2, u: 0.0, v: 0.0 };
        assert!(VisionFactor::new(&a, &a, VisionMode::Tangent, 1.0).is_err());
    }

    #[test]
    fn residual_modes() {
        let anchor = FeatureObs { frame: 0, u: 0.0, v: 0.0 };
        let obs = FeatureObs { frame: 1, u: 0.0, v: 0.0 };
        let plane = VisionFactor::new(&anchor, &obs, VisionMode::Plane, 1.0).unwrap();
        // point (0.1, 0, 1) in camera j
        let pose_j = Pose::new(UnitQuat::identity(), Vec3::new(-0.1, 0.0, 0.0));
        let r = plane.residual(&Pose::identity(), &pose_j, &Extrinsics::default(), 1.0).unwrap();
        assert_relative_eq!(r, Vector2::new(0.1, 0.0), epsilon = 1e-15);

        let tangent = VisionFactor::new(&anchor, &obs, VisionMode::Tangent, 1.0).unwrap();
        let r = tangent.residual(&Pose::identity(), &Pose::identity(), &Extrinsics::default(), 0.37).unwrap();
        assert!(r.amax() < 1e-15);

        let behind = Pose::new(UnitQuat::identity(), Vec3::new(0.0, 0.0, 3.0));
        assert!(matches!(plane.residual(&Pose::identity(), &behind, &Extrinsics::default(), 0.5), Err(Error::BehindCamera { .. })));
        assert!(tangent.residual(&Pose::identity(), &behind, &Extrinsics::default(), 0.5).is_ok());
    }

    #[test]
    fn translation_blocks_are_opposite_without_rotation() {
        let (f, pi, pj) = identity_case(Vec3::zeros());
        let (_, j) = f.evaluate_raw(&pi, &pj, &Extrinsics::default(), 0.5).unwrap();
        let ti = j.pose_i.fixed_view::<2, 3>(0, 0).into_owned();
        let tj = j.pose_j.fixed_view::<2, 3>(0, 0).into_owned();
        assert_relative_eq!(ti, -tj, epsilon = 1e-15);
    }

    #[test]
    fn vision_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = check::random_vision_draw(&mut rng, VisionMode::Tangent);
        let g = Pose::new(so3_exp(&Vec3::new(0.3, -0.7, 1.1)), Vec3::new(4.0, -2.0, 1.0));
        let r = draw.factor.residual(&draw.pose_i, &draw.pose_j, &draw.ext, draw.inv_depth).unwrap();
        let r2 = draw
            .factor
            .residual(&g.compose(&draw.pose_i), &g.compose(&draw.pose_j), &draw.ext, draw.inv_depth)
            .unwrap();
        assert!((r - r2).amax() < 1e-10);
    }

    #[test]
    fn whitening() {
        let r = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let j = vec![DMatrix::from_fn(3, 2, |i, k| (i + k) as f64)];
        let (wr, wj) = whiten(&r, &j, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(wr, r);
        assert_eq!(wj, j);

        let l = sqrt_information(&(DMatrix::identity(3, 3) * 4.0)).unwrap();
        assert_relative_eq!(l, DMatrix::identity(3, 3) * 0.5, epsilon = 1e-15);
        let (wr, _) = whiten(&r, &j, &l).unwrap();
        assert_relative_eq!(wr.norm_squared(), r.norm_squared() / 4.0, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a = DMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
            let p = a.transpose() * a + DMatrix::identity(5, 5) * 0.01;
            let r = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let l = sqrt_information(&p).unwrap();
            for i in 0..5 {
                for k in i + 1..5 {
                    assert_eq!(l[(i, k)], 0.0);
                }
            }
            let mahalanobis = (r.transpose() * p.clone().try_inverse().unwrap() * &r)[0];
            assert!(((&l * &r).norm_squared() - mahalanobis).abs() < 1e-9 * mahalanobis.max(1.0));
        }
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 0)] = f64::NAN;
        assert!(whiten(&DVector::zeros(2), &[], &bad).is_err());
    }

    #[test]
    fn near_empty_interval_has_finite_weight() {
        let samples = [ImuSample::new(0.0, Vec3::zeros(), Vec3::z()), ImuSample::new(1e-6, Vec3::zeros(), Vec3::z())];
        let d = preint_batch(&samples, Vec3::zeros(), Vec3::zeros(), &NoiseParams::default()).unwrap();
        let f = ImuFactor::new(d, Vec3::zeros()).unwrap();
        assert!(f.sqrt_info.iter().all(|v| v.is_finite()));
        let _ = boxplus(&UnitQuat::identity(), &Vec3::zeros());
    }

    #[test]
    fn gauge_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = so3_exp(&Vec3::from_fn(|_, _| rng.random_range(-1.2..1.2)));
            let p = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let f = GaugeFactor::new(Vec3::new(0.1, 0.2, 0.3), 0.4, 7.0);
            let x = crate::state::pose_to_params(&p, &q);
            let j = f.jacobian(&q);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let plus = crate::solver::block_plus(BlockKind::Pose, &x, &d);
                d[k] = -h;
                let minus = crate::solver::block_plus(BlockKind::Pose, &x, &d);
                let eval = |v: &[f64]| f.evaluate(&[v], false).unwrap().residual;
                let col = (eval(&plus) - eval(&minus)) / (2.0 * h);
                for i in 0..4 {
                    assert!((col[i] - j[(i, k)]).abs() < 1e-6, "{i} {k} {} {}", col[i], j[(i, k)]);
                }
            }
        }
        let f = GaugeFactor::new(Vec3::zeros(), std::f64::consts::PI - 0.01, 1.0);
        let q = UnitQuat::from_axis_angle(&Vec3::z(), -std::f64::consts::PI + 0.01);
        assert!((f.residual(&Vec3::zeros(), &q)[3] - 0.02).abs() < 1e-12);
    }
}
