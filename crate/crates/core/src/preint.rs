//! IMU preintegration between two keyframes.
//!
//! The error state is ordered `(δα, δθ, δβ, δba, δbg)`; see [`idx`].

use nalgebra::{SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{omega_mat, quat_mul, skew, small_angle_quat, so3_exp, Mat3, UnitQuat, Vec3};
use crate::state::FrameState;

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Mat15x18 = SMatrix<f64, 15, 18>;
pub type Mat15x12 = SMatrix<f64, 15, 12>;

/// Row/column offsets of the 15-dimensional error state.
pub mod idx {
    pub const ALPHA: usize = 0;
    pub const THETA: usize = 3;
    pub const BETA: usize = 6;
    pub const BA: usize = 9;
    pub const BG: usize = 12;
}

pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Bias change beyond which first-order correction is reported as unreliable.
pub const BIAS_CORRECTION_WARN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vec3, accel: Vec3) -> Self {
        Self { t, gyro, accel }
    }
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    /// Accelerometer white noise, m/s²/√Hz.
    pub acc: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub gyro: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub acc_bias: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub gyro_bias: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { acc: 2e-2, gyro: 2e-3, acc_bias: 1e-4, gyro_bias: 1e-4 }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self { acc: 0.0, gyro: 0.0, acc_bias: 0.0, gyro_bias: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("acc", self.acc),
            ("gyro", self.gyro),
            ("acc_bias", self.acc_bias),
            ("gyro_bias", self.gyro_bias),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("noise density {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Preintegrated IMU deltas expressed in the first body frame of the interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Preintegration {
    pub dt_total: f64,
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: UnitQuat,
    pub lin_ba: Vec3,
    pub lin_bg: Vec3,
    /// Covariance of the error state.
    pub cov: Mat15,
    /// Jacobian of the final error state with respect to the initial one.
    pub jac: Mat15,
    pub max_dt: f64,
    /// Raw samples consumed so far, kept for repropagation and splicing.
    pub samples: Vec<ImuSample>,
}

/// Linear interpolation of a sample pair at `t`.
pub fn interpolate(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let s = (t - a.t) / (b.t - a.t);
    ImuSample::new(t, a.gyro + (b.gyro - a.gyro) * s, a.accel + (b.accel - a.accel) * s)
}

/// Samples covering `[t0, t1]`, with interpolated end points where the
/// interval does not start or stop on a sample.
pub fn samples_between(imu: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    const EPS: f64 = 1e-9;
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("empty interval [{t0}, {t1}]")));
    }
    match (imu.first(), imu.last()) {
        (Some(first), Some(last)) if first.t <= t0 + EPS && last.t >= t1 - EPS => {}
        _ => return Err(Error::InvalidArgument(format!("interval [{t0}, {t1}] is not covered by the IMU stream"))),
    }
    let lo = imu.partition_point(|s| s.t < t0 - EPS);
    let hi = imu.partition_point(|s| s.t <= t1 + EPS);
    let mut out = Vec::with_capacity(hi - lo + 2);
    if (imu[lo].t - t0).abs() > EPS {
        out.push(interpolate(&imu[lo - 1], &imu[lo], t0));
    }
    out.extend_from_slice(&imu[lo..hi]);
    if (imu[hi - 1].t - t1).abs() > EPS {
        out.push(interpolate(&imu[hi - 1], &imu[hi], t1));
    }
    Ok(out)
}

/// Fresh accumulator linearized at the given biases.
pub fn preint_reset(lin_ba: Vec3, lin_bg: Vec3) -> Preintegration {
    Preintegration {
        dt_total: 0.0,
        alpha: Vec3::zeros(),
        beta: Vec3::zeros(),
        gamma: UnitQuat::identity(),
        lin_ba,
        lin_bg,
        cov: Mat15::zeros(),
        jac: Mat15::identity(),
        max_dt: DEFAULT_MAX_DT,
        samples: Vec::new(),
    }
}

/// Folds [`Preintegration::push`] over consecutive sample pairs.
pub fn preint_batch(samples: &[ImuSample], lin_ba: Vec3, lin_bg: Vec3, noise: &NoiseParams) -> Result<Preintegration> {
    preint_batch_with_max_dt(samples, lin_ba, lin_bg, noise, DEFAULT_MAX_DT)
}

pub fn preint_batch_with_max_dt(
    samples: &[ImuSample],
    lin_ba: Vec3,
    lin_bg: Vec3,
    noise: &NoiseParams,
    max_dt: f64,
) -> Result<Preintegration> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("preintegration needs at least 2 samples, got {}", samples.len())));
    }
    let mut d = preint_reset(lin_ba, lin_bg);
    d.max_dt = max_dt;
    for pair in samples.windows(2) {
        d.push(&pair[0], &pair[1], noise)?;
    }
    Ok(d)
}

impl Preintegration {
    /// Integrates one mid-point step from `s0` to `s1`.
    pub fn push(&mut self, s0: &ImuSample, s1: &ImuSample, noise: &NoiseParams) -> Result<()> {
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "IMU timestamps must increase: {} then {}",
                s0.t, s1.t
            )));
        }
        if dt > self.max_dt {
            return Err(Error::Gap { t: s0.t, gap: dt, max_dt: self.max_dt });
        }

        let r0 = self.gamma.to_rotation_matrix();
        let w = 0.5 * (s0.gyro + s1.gyro) - self.lin_bg;
        let gamma1 = quat_mul(&self.gamma, &so3_exp(&(w * dt)));
        let r1 = gamma1.to_rotation_matrix();
        let a0 = s0.accel - self.lin_ba;
        let a1 = s1.accel - self.lin_ba;
        let acc = 0.5 * (r0 * a0 + r1 * a1);

        self.alpha += self.beta * dt + 0.5 * acc * dt * dt;
        self.beta += acc * dt;
        self.gamma = gamma1;
        self.dt_total += dt;

        let (f, g) = discrete_transition(&r0, &r1, &a0, &a1, &w, dt);
        self.jac = f * self.jac;
        if noise.acc > 0.0 || noise.gyro > 0.0 || noise.acc_bias > 0.0 || noise.gyro_bias > 0.0 {
            let qd = discrete_noise(noise, dt);
            let mut gq = g;
            for (c, q) in qd.iter().enumerate() {
                gq.column_mut(c).scale_mut(*q);
            }
            self.cov = f * self.cov * f.transpose() + gq * g.transpose();
        } else {
            self.cov = f * self.cov * f.transpose();
        }
        self.cov = 0.5 * (self.cov + self.cov.transpose());

        if self.samples.last().map(|s| s.t) != Some(s0.t) {
            self.samples.push(*s0);
        }
        self.samples.push(*s1);
        Ok(())
    }

    /// First-order correction of `(α, β, γ)` for a change of linearization biases.
    pub fn correct_for_bias(&self, ba: &Vec3, bg: &Vec3) -> (Vec3, Vec3, UnitQuat) {
        let dba = ba - self.lin_ba;
        let dbg = bg - self.lin_bg;
        if dba.norm() > BIAS_CORRECTION_WARN || dbg.norm() > BIAS_CORRECTION_WARN {
            static WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);
            let level = if WARNED.swap(true, std::sync::atomic::Ordering::Relaxed) { log::Level::Debug } else { log::Level::Warn };
            log::log!(
                level,
                "bias change |dba| = {:.3e}, |dbg| = {:.3e} is large for first-order correction",
                dba.norm(),
                dbg.norm()
            );
        }
        let alpha = self.alpha + self.jac_block(idx::ALPHA, idx::BA) * dba + self.jac_block(idx::ALPHA, idx::BG) * dbg;
        let beta = self.beta + self.jac_block(idx::BETA, idx::BA) * dba + self.jac_block(idx::BETA, idx::BG) * dbg;
        let gamma = quat_mul(&self.gamma, &small_angle_quat(&(self.jac_block(idx::THETA, idx::BG) * dbg)));
        (alpha, beta, gamma)
    }

    /// 3×3 block of the bias Jacobian at `(row, col)` offsets.
    pub fn jac_block(&self, row: usize, col: usize) -> Mat3 {
        self.jac.fixed_view::<3, 3>(row, col).into_owned()
    }

    /// Integrates the stored samples again from scratch at new linearization biases.
    pub fn repropagate(&self, ba: Vec3, bg: Vec3, noise: &NoiseParams) -> Result<Preintegration> {
        preint_batch_with_max_dt(&self.samples, ba, bg, noise, self.max_dt)
    }

    /// Predicts the state at the end of the interval from the state at its start.
    pub fn predict(&self, start: &FrameState, gravity: &Vec3) -> FrameState {
        let t = self.dt_total;
        let r = start.q.to_rotation_matrix();
        FrameState {
            p: start.p + start.v * t - 0.5 * gravity * t * t + r * self.alpha,
            v: start.v - gravity * t + r * self.beta,
            q: quat_mul(&start.q, &self.gamma),
            ba: start.ba,
            bg: start.bg,
        }
    }
}

/// Discrete state transition `F` (15×15) and noise map `G` (15×18) of one
/// mid-point step. Noise columns: `(n_a0, n_g0, n_a1, n_g1, n_ba, n_bg)`.
///
/// The attitude error is carried through the exact step rotation
/// `exp(ω̄δt)ᵀ` and its right Jacobian; to first order in `δt` these reduce to
/// `I − [ω̄]×δt` and `I`.
pub fn discrete_transition(r0: &Mat3, r1: &Mat3, a0: &Vec3, a1: &Vec3, w: &Vec3, dt: f64) -> (Mat15, Mat15x18) {
    let i3 = Mat3::identity();
    let dt2 = dt * dt;
    let a0x = skew(a0);
    let a1x = skew(a1);
    let rot_step = r1.transpose() * r0;
    let jr_dt = right_jacobian(&(w * dt)) * dt;
    let r1a1x = r1 * a1x;

    let mut f = Mat15::identity();
    let set = |m: &mut Mat15, r: usize, c: usize, b: Mat3| m.fixed_view_mut::<3, 3>(r, c).copy_from(&b);
    set(&mut f, 0, 3, -0.25 * dt2 * r0 * a0x - 0.25 * dt2 * r1a1x * rot_step);
    set(&mut f, 0, 6, i3 * dt);
    set(&mut f, 0, 9, -0.25 * dt2 * (r0 + r1));
    set(&mut f, 0, 12, 0.25 * dt2 * r1a1x * jr_dt);
    set(&mut f, 3, 3, rot_step);
    set(&mut f, 3, 12, -jr_dt);
    set(&mut f, 6, 3, -0.5 * dt * r0 * a0x - 0.5 * dt * r1a1x * rot_step);
    set(&mut f, 6, 9, -0.5 * dt * (r0 + r1));
    set(&mut f, 6, 12, 0.5 * dt * r1a1x * jr_dt);

    let mut g = Mat15x18::zeros();
    let mut setg = |r: usize, c: usize, b: Mat3| g.fixed_view_mut::<3, 3>(r, c).copy_from(&b);
    let g01 = dt2 / 8.0 * r1a1x * jr_dt;
    let g21 = dt / 4.0 * r1a1x * jr_dt;
    setg(0, 0, -0.25 * dt2 * r0);
    setg(0, 3, g01);
    setg(0, 6, -0.25 * dt2 * r1);
    setg(0, 9, g01);
    setg(3, 3, -0.5 * jr_dt);
    setg(3, 9, -0.5 * jr_dt);
    setg(6, 0, -0.5 * dt * r0);
    setg(6, 3, g21);
    setg(6, 6, -0.5 * dt * r1);
    setg(6, 9, g21);
    setg(9, 12, dt * i3);
    setg(12, 15, dt * i3);
    (f, g)
}

/// Right Jacobian of SO(3) at `φ`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let k = skew(phi);
    let (c1, c2) = if angle < 1e-4 {
        (0.5 - angle * angle / 24.0, 1.0 / 6.0 - angle * angle / 120.0)
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    };
    Mat3::identity() - c1 * k + c2 * k * k
}

/// Per-column variances of the discrete noise vector for a step of `dt`.
///
/// Densities are converted to per-step variances by dividing by `dt`; the
/// bias columns of `G` carry a factor `dt`, giving random-walk growth `σ²·dt`.
pub fn discrete_noise(noise: &NoiseParams, dt: f64) -> [f64; 18] {
    let mut q = [0.0; 18];
    let vars = [noise.acc, noise.gyro, noise.acc, noise.gyro, noise.acc_bias, noise.gyro_bias];
    for (k, s) in vars.iter().enumerate() {
        for j in 0..3 {
            q[3 * k + j] = s * s / dt;
        }
    }
    q
}

/// Continuous-time error-state matrices in the ordering
/// `(δα, δβ, δθ, δba, δbg)` with noise `(n_a, n_ω, n_ba, n_bω)`.
pub fn continuous_ft_gt(r: &Mat3, accel: &Vec3, gyro: &Vec3, ba: &Vec3, bg: &Vec3) -> (Mat15, Mat15x12) {
    let i3 = Mat3::identity();
    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&i3);
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r * skew(&(accel - ba))));
    f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-r));
    f.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-skew(&(gyro - bg))));
    f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-i3));

    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r));
    g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-i3));
    g.fixed_view_mut::<3, 3>(9, 6).copy_from(&i3);
    g.fixed_view_mut::<3, 3>(12, 9).copy_from(&i3);
    (f, g)
}

/// Permutation `P` with `P·x_cont = x_disc`, mapping the `(α, β, θ, …)`
/// ordering to `(α, θ, β, …)`.
pub fn continuous_to_discrete_permutation() -> Mat15 {
    let mut p = Mat15::zeros();
    let blocks = [(0, 0), (3, 6), (6, 3), (9, 9), (12, 12)];
    for (disc, cont) in blocks {
        for k in 0..3 {
            p[(disc + k, cont + k)] = 1.0;
        }
    }
    p
}

type Derivative = (Vec3, Vec3, Vector4<f64>);

fn world_derivative(v: &Vec3, q: &Vector4<f64>, gyro: &Vec3, accel: &Vec3, gravity: &Vec3) -> Derivative {
    let qn = q.normalize();
    let rot = UnitQuat::from_coords(&qn).to_rotation_matrix();
    (*v, rot * accel - gravity, 0.5 * omega_mat(gyro) * q)
}

/// World-frame RK4 integration of `ṗ = v`, `v̇ = R(ã − ba) − g`,
/// `q̇ = ½ q ⊗ (ω̃ − bg)` for a continuous signal `t ↦ (ω̃, ã)`.
pub fn reference_propagate_signal<F>(
    signal: F,
    t0: f64,
    t1: f64,
    steps: usize,
    initial: &FrameState,
    gravity: &Vec3,
) -> FrameState
where
    F: Fn(f64) -> (Vec3, Vec3),
{
    let h = (t1 - t0) / steps as f64;
    let mut p = initial.p;
    let mut v = initial.v;
    let mut q = initial.q.coords();
    let input = |t: f64| {
        let (w, a) = signal(t);
        (w - initial.bg, a - initial.ba)
    };
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let (w1, a1) = input(t);
        let (w2, a2) = input(t + 0.5 * h);
        let (w4, a4) = input(t + h);
        let k1 = world_derivative(&v, &q, &w1, &a1, gravity);
        let k2 = world_derivative(&(v + 0.5 * h * k1.1), &(q + 0.5 * h * k1.2), &w2, &a2, gravity);
        let k3 = world_derivative(&(v + 0.5 * h * k2.1), &(q + 0.5 * h * k2.2), &w2, &a2, gravity);
        let k4 = world_derivative(&(v + h * k3.1), &(q + h * k3.2), &w4, &a4, gravity);
        p += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        q += h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
        q.normalize_mut();
    }
    FrameState { p, v, q: UnitQuat::from_coords(&q), ba: initial.ba, bg: initial.bg }
}

/// Substeps per sample interval used by [`reference_propagate`].
pub const REFERENCE_SUBSTEPS: usize = 100;

/// [`reference_propagate_signal`] over linearly interpolated samples.
pub fn reference_propagate(samples: &[ImuSample], initial: &FrameState, gravity: &Vec3) -> Result<FrameState> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("propagation needs at least 2 samples, got {}", samples.len())));
    }
    let mut state = *initial;
    for pair in samples.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("IMU timestamps must increase: {} then {}", s0.t, s1.t)));
        }
        if dt > DEFAULT_MAX_DT {
            return Err(Error::Gap { t: s0.t, gap: dt, max_dt: DEFAULT_MAX_DT });
        }
        let lerp = |t: f64| {
            let u = (t - s0.t) / dt;
            (s0.gyro * (1.0 - u) + s1.gyro * u, s0.accel * (1.0 - u) + s1.accel * u)
        };
        state = reference_propagate_signal(lerp, s0.t, s1.t, REFERENCE_SUBSTEPS, &state, gravity);
    }
    Ok(state)
}
