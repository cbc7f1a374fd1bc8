//! Deterministic synthetic datasets: analytic trajectories, IMU, feature,
//! up-to-scale pose and GPS measurements.
//!
//! Ground-truth states are obtained by mid-point integration of the
//! noise-free IMU readings of the analytic trajectory, the same scheme the
//! preintegration uses, so that noiseless data make every residual vanish to
//! rounding error. They stay within integration error of the analytic curve.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::UpToScalePose;
use crate::error::{Error, Result};
pub use crate::global::Geodetic;
use crate::global::GpsFix;
use crate::preint::{ImuSample, NoiseParams};
use crate::quat::{quat_mul, rot_z, so3_exp, Mat3, UnitQuat, Vec3};
use crate::state::{Extrinsics, FrameState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    #[default]
    Circle,
    FigureEight,
    Sinusoid6dof,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// m; amplitude of the horizontal motion.
    pub radius: f64,
    /// s; period of the base motion.
    pub period: f64,
    /// m; amplitude of the vertical oscillation.
    pub vertical_amplitude: f64,
    /// rad; amplitude of roll and pitch oscillations.
    pub tilt_amplitude: f64,
    /// s
    pub duration: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Circle,
            radius: 5.0,
            period: 10.0,
            vertical_amplitude: 0.5,
            tilt_amplitude: 0.1,
            duration: 30.0,
        }
    }
}

/// Analytic kinematics at one instant. `a` is the world acceleration and
/// `omega` the body angular rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub p: Vec3,
    pub q: UnitQuat,
    pub v: Vec3,
    pub a: Vec3,
    pub omega: Vec3,
}

/// `offset + rate·t + Σ amp·sin(freq·t + phase)` with derivatives.
#[derive(Clone, Debug, Default)]
struct Signal {
    offset: f64,
    rate: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Signal {
    fn constant(offset: f64) -> Self {
        Self { offset, ..Default::default() }
    }

    fn sin(mut self, amp: f64, freq: f64, phase: f64) -> Self {
        self.terms.push((amp, freq, phase));
        self
    }

    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let mut x = self.offset + self.rate * t;
        let mut dx = self.rate;
        let mut ddx = 0.0;
        for &(a, f, ph) in &self.terms {
            let (s, c) = (f * t + ph).sin_cos();
            x += a * s;
            dx += a * f * c;
            ddx -= a * f * f * s;
        }
        (x, dx, ddx)
    }
}

enum Heading {
    Signal(Signal),
    /// Yaw follows the horizontal velocity direction.
    Velocity,
}

struct Motion {
    position: [Signal; 3],
    roll: Signal,
    pitch: Signal,
    heading: Heading,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("trajectory.{name} must be positive, got {v}")))
            }
        };
        positive("radius", self.radius)?;
        positive("period", self.period)?;
        positive("duration", self.duration)?;
        if !(self.vertical_amplitude.is_finite() && self.tilt_amplitude.is_finite()) {
            return Err(Error::Config("trajectory amplitudes must be finite".into()));
        }
        Ok(())
    }

    fn motion(&self) -> Motion {
        let w = 2.0 * std::f64::consts::PI / self.period;
        let (r, h, tilt) = (self.radius, self.vertical_amplitude, self.tilt_amplitude);
        let half_pi = std::f64::consts::FRAC_PI_2;
        // h·sin²(ωt)
        let bob = Signal::constant(0.5 * h).sin(0.5 * h, 2.0 * w, -half_pi);
        match self.kind {
            TrajectoryKind::Circle => Motion {
                position: [Signal::default().sin(r, w, half_pi), Signal::default().sin(r, w, 0.0), bob],
                roll: Signal::default().sin(tilt, 2.0 * w, 0.0),
                pitch: Signal::default().sin(tilt, 3.0 * w, 0.0),
                heading: Heading::Signal(Signal { offset: half_pi, rate: w, terms: Vec::new() }),
            },
            TrajectoryKind::FigureEight => Motion {
                position: [Signal::default().sin(r, w, 0.0), Signal::default().sin(0.5 * r, 2.0 * w, 0.0), bob],
                roll: Signal::default().sin(tilt, 2.0 * w, 0.0),
                pitch: Signal::default().sin(tilt, 3.0 * w, 0.0),
                heading: Heading::Velocity,
            },
            TrajectoryKind::Sinusoid6dof => Motion {
                position: [
                    Signal::default().sin(r, w, 0.0),
                    Signal::default().sin(0.8 * r, 1.3 * w, 0.5),
                    Signal::default().sin(h, 2.1 * w, 0.0),
                ],
                roll: Signal::default().sin(2.0 * tilt, 1.9 * w, 0.0),
                pitch: Signal::default().sin(2.0 * tilt, 2.3 * w, 0.4),
                heading: Heading::Signal(Signal::default().sin(1.0, 0.7 * w, 0.0)),
            },
            TrajectoryKind::Static => Motion {
                position: [Signal::default(), Signal::default(), Signal::default()],
                roll: Signal::default(),
                pitch: Signal::default(),
                heading: Heading::Signal(Signal::default()),
            },
        }
    }

    /// Closed-form pose and derivatives at `t ∈ [0, duration]`.
    pub fn sample(&self, t: f64) -> Result<Kinematics> {
        if !(t >= -1e-9 && t <= self.duration + 1e-9) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, {}]", self.duration)));
        }
        Ok(self.sample_unchecked(t))
    }

    fn sample_unchecked(&self, t: f64) -> Kinematics {
        let m = self.motion();
        let px = m.position[0].eval(t);
        let py = m.position[1].eval(t);
        let pz = m.position[2].eval(t);
        let p = Vec3::new(px.0, py.0, pz.0);
        let v = Vec3::new(px.1, py.1, pz.1);
        let a = Vec3::new(px.2, py.2, pz.2);
        let (roll, droll, _) = m.roll.eval(t);
        let (pitch, dpitch, _) = m.pitch.eval(t);
        let (yaw, dyaw) = match &m.heading {
            Heading::Signal(s) => {
                let (y, dy, _) = s.eval(t);
                (y, dy)
            }
            Heading::Velocity => {
                let n = v.x * v.x + v.y * v.y;
                (v.y.atan2(v.x), (v.x * a.y - v.y * a.x) / n)
            }
        };
        let q = quat_mul(
            &quat_mul(&UnitQuat::from_axis_angle(&Vec3::z(), yaw), &UnitQuat::from_axis_angle(&Vec3::y(), pitch)),
            &UnitQuat::from_axis_angle(&Vec3::x(), roll),
        );
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega = Vec3::new(droll - sp * dyaw, cr * dpitch + sr * cp * dyaw, -sr * dpitch + cr * cp * dyaw);
        Kinematics { p, q, v, a, omega }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    /// Hz
    pub imu_rate: f64,
    /// Hz
    pub cam_rate: f64,
    /// Hz
    pub gps_rate: f64,
    pub gravity: f64,
    pub imu_noise: NoiseParams,
    /// Initial accelerometer bias, m/s².
    pub accel_bias: Vec3,
    /// Initial gyroscope bias, rad/s.
    pub gyro_bias: Vec3,
    pub landmarks: usize,
    /// Box the landmarks are drawn from, m. Defaults to the inside of the
    /// circle: `±0.6·radius` horizontally, `[-2, 3]` vertically.
    pub landmark_box: Option<LandmarkBox>,
    /// Full field of view, degrees.
    pub fov_deg: f64,
    pub min_depth: f64,
    /// Feature noise in pixels; divided by `nominal_focal` for normalized coordinates.
    pub feature_noise_px: f64,
    pub nominal_focal: f64,
    pub extrinsics: Extrinsics,
    /// Scale dividing the up-to-scale camera positions.
    pub sfm_scale: f64,
    /// Declared GPS standard deviation, m, per axis.
    pub gps_std: f64,
    /// When false the fixes are exact but still carry `gps_std`.
    pub gps_noise: bool,
    /// Yaw of the local world frame in the GPS frame, degrees.
    pub gps_yaw_deg: f64,
    /// Origin of the local world frame in the GPS frame, m.
    pub gps_offset: Vec3,
    /// When set, `gps.csv` is written as latitude/longitude/altitude around this origin.
    pub gps_origin: Option<Geodetic>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkBox {
    pub min: Vec3,
    pub max: Vec3,
}

/// Camera looking out of the body's left side (towards the centre of the
/// circle), image `y` pointing down.
pub fn default_extrinsics() -> Extrinsics {
    let r = Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0);
    Extrinsics { p_c_b: Vec3::new(0.05, 0.02, -0.01), q_c_b: UnitQuat::from_rotation_matrix(&r) }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trajectory: TrajectorySpec::default(),
            imu_rate: 200.0,
            cam_rate: 10.0,
            gps_rate: 1.0,
            gravity: crate::GRAVITY,
            imu_noise: NoiseParams::default(),
            accel_bias: Vec3::new(0.05, -0.03, 0.02),
            gyro_bias: Vec3::new(3e-3, -2e-3, 1e-3),
            landmarks: 150,
            landmark_box: None,
            fov_deg: 90.0,
            min_depth: 0.2,
            feature_noise_px: 1.0,
            nominal_focal: 460.0,
            extrinsics: default_extrinsics(),
            sfm_scale: 2.5,
            gps_std: 0.5,
            gps_noise: true,
            gps_yaw_deg: 0.0,
            gps_offset: Vec3::zeros(),
            gps_origin: None,
        }
    }
}

impl SimConfig {
    /// Same geometry with every noise source and bias walk switched off.
    pub fn noiseless(mut self) -> Self {
        self.imu_noise = NoiseParams::zero();
        self.feature_noise_px = 0.0;
        self.gps_noise = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        for (name, v) in [("imu_rate", self.imu_rate), ("cam_rate", self.cam_rate), ("gps_rate", self.gps_rate)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.imu_rate < 2.0 * self.cam_rate {
            return Err(Error::Config("imu_rate must be at least twice cam_rate".into()));
        }
        let ratio = self.imu_rate / self.cam_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("imu_rate must be an integer multiple of cam_rate".into()));
        }
        if 1.0 / self.imu_rate > crate::preint::DEFAULT_MAX_DT {
            return Err(Error::Config(format!(
                "imu_rate {} gives a sample gap above {} s",
                self.imu_rate,
                crate::preint::DEFAULT_MAX_DT
            )));
        }
        self.imu_noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.feature_noise_px.is_finite() && self.feature_noise_px >= 0.0) {
            return Err(Error::Config(format!("feature_noise_px must be non-negative, got {}", self.feature_noise_px)));
        }
        for (name, v) in [
            ("gravity", self.gravity),
            ("fov_deg", self.fov_deg),
            ("min_depth", self.min_depth),
            ("nominal_focal", self.nominal_focal),
            ("sfm_scale", self.sfm_scale),
            ("gps_std", self.gps_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fov_deg >= 180.0 {
            return Err(Error::Config("fov_deg must be below 180".into()));
        }
        let b = self.landmark_region();
        if !(b.min.iter().all(|v| v.is_finite()) && b.max.iter().all(|v| v.is_finite()))
            || (0..3).any(|k| b.max[k] < b.min[k])
        {
            return Err(Error::Config("landmark region is empty".into()));
        }
        Ok(())
    }

    pub fn landmark_region(&self) -> LandmarkBox {
        let h = 0.6 * self.trajectory.radius;
        self.landmark_box.unwrap_or(LandmarkBox { min: Vec3::new(-h, -h, -2.0), max: Vec3::new(h, h, 3.0) })
    }

    pub fn gravity_vector(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.gravity)
    }

    fn samples_per_frame(&self) -> usize {
        (self.imu_rate / self.cam_rate).round() as usize
    }
}

/// Independent noise streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
enum Channel {
    Landmarks = 0,
    Accel = 1,
    Gyro = 2,
    AccelBias = 3,
    GyroBias = 4,
    Features = 5,
    Gps = 6,
}

fn channel_rng(seed: u64, channel: Channel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel as u64);
    rng
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// One feature observation with its true depth along the camera axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub feature_id: u64,
    pub u: f64,
    pub v: f64,
    /// True `z` of the landmark in the camera frame, m.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub id: usize,
    pub t: f64,
    /// Index of the IMU sample taken at the frame time.
    pub imu_index: usize,
    pub observations: Vec<Observation>,
}

/// True state at an IMU sample time (biases are the true, walking ones).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    pub state: FrameState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub imu: Vec<ImuSample>,
    pub truth: Vec<TruthSample>,
    pub frames: Vec<CameraFrame>,
    pub landmarks: Vec<Vec3>,
    pub sfm: Vec<UpToScalePose>,
    pub gps: Vec<GpsFix>,
}

impl Dataset {
    pub fn frame_truth(&self, frame: &CameraFrame) -> &FrameState {
        &self.truth[frame.imu_index].state
    }

    /// IMU samples from frame `a` to frame `b`, both ends included.
    pub fn imu_between(&self, a: &CameraFrame, b: &CameraFrame) -> &[ImuSample] {
        &self.imu[a.imu_index..=b.imu_index]
    }

    /// Length of the true path, m.
    pub fn path_length(&self) -> f64 {
        self.truth.windows(2).map(|w| (w[1].state.p - w[0].state.p).norm()).sum()
    }
}

/// Noise-free accelerometer reading for a world acceleration.
pub fn specific_force(q: &UnitQuat, a_world: &Vec3, gravity: &Vec3) -> Vec3 {
    q.to_rotation_matrix().transpose() * (a_world + gravity)
}

/// One mid-point step of world-frame kinematics under noise-free readings.
fn midpoint_step(s: &FrameState, m0: &ImuSample, m1: &ImuSample, gravity: &Vec3) -> FrameState {
    let dt = m1.t - m0.t;
    let q1 = quat_mul(&s.q, &so3_exp(&(0.5 * (m0.gyro + m1.gyro) * dt)));
    let acc = 0.5 * (s.q.to_rotation_matrix() * m0.accel + q1.to_rotation_matrix() * m1.accel) - gravity;
    FrameState { p: s.p + s.v * dt + 0.5 * acc * dt * dt, q: q1, v: s.v + acc * dt, ..*s }
}

/// Noise-free IMU readings and mid-point-consistent truth at `imu_rate`.
pub fn gen_truth(cfg: &SimConfig) -> Result<(Vec<ImuSample>, Vec<TruthSample>)> {
    cfg.validate()?;
    let g = cfg.gravity_vector();
    let n = (cfg.trajectory.duration * cfg.imu_rate + 1e-9).floor() as usize;
    let mut ideal = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / cfg.imu_rate;
        let kin = cfg.trajectory.sample_unchecked(t);
        ideal.push((ImuSample::new(t, kin.omega, specific_force(&kin.q, &kin.a, &g)), kin));
    }
    let k0 = ideal[0].1;
    let mut state = FrameState { p: k0.p, q: k0.q, v: k0.v, ba: cfg.accel_bias, bg: cfg.gyro_bias };
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(TruthSample { t: 0.0, state });
    for w in ideal.windows(2) {
        state = midpoint_step(&state, &w[0].0, &w[1].0, &g);
        truth.push(TruthSample { t: w[1].0.t, state });
    }
    Ok((ideal.into_iter().map(|(s, _)| s).collect(), truth))
}

/// Measured IMU stream: ideal readings plus walking biases and white noise.
/// Returns the samples and updates the truth biases in place.
pub fn gen_imu(cfg: &SimConfig, ideal: &[ImuSample], truth: &mut [TruthSample]) -> Vec<ImuSample> {
    let mut acc_rng = channel_rng(cfg.seed, Channel::Accel);
    let mut gyro_rng = channel_rng(cfg.seed, Channel::Gyro);
    let mut ba_rng = channel_rng(cfg.seed, Channel::AccelBias);
    let mut bg_rng = channel_rng(cfg.seed, Channel::GyroBias);
    let noise = &cfg.imu_noise;
    let sqrt_rate = cfg.imu_rate.sqrt();
    let sqrt_dt = (1.0 / cfg.imu_rate).sqrt();
    let mut ba = cfg.accel_bias;
    let mut bg = cfg.gyro_bias;
    let mut out = Vec::with_capacity(ideal.len());
    for (k, s) in ideal.iter().enumerate() {
        if k > 0 {
            if noise.acc_bias > 0.0 {
                ba += gaussian3(&mut ba_rng) * noise.acc_bias * sqrt_dt;
            }
            if noise.gyro_bias > 0.0 {
                bg += gaussian3(&mut bg_rng) * noise.gyro_bias * sqrt_dt;
            }
        }
        truth[k].state.ba = ba;
        truth[k].state.bg = bg;
        let mut accel = s.accel + ba;
        let mut gyro = s.gyro + bg;
        if noise.acc > 0.0 {
            accel += gaussian3(&mut acc_rng) * noise.acc * sqrt_rate;
        }
        if noise.gyro > 0.0 {
            gyro += gaussian3(&mut gyro_rng) * noise.gyro * sqrt_rate;
        }
        out.push(ImuSample::new(s.t, gyro, accel));
    }
    out
}

pub fn gen_landmarks(cfg: &SimConfig) -> Vec<Vec3> {
    let mut rng = channel_rng(cfg.seed, Channel::Landmarks);
    let b = cfg.landmark_region();
    (0..cfg.landmarks)
        .map(|_| Vec3::from_fn(|k, _| if b.max[k] > b.min[k] { rng.random_range(b.min[k]..b.max[k]) } else { b.min[k] }))
        .collect()
}

/// Landmark in the camera frame of a body state.
pub fn landmark_in_camera(state: &FrameState, ext: &Extrinsics, landmark: &Vec3) -> Vec3 {
    let p_b = state.q.to_rotation_matrix().transpose() * (landmark - state.p);
    ext.q_c_b.to_rotation_matrix().transpose() * (p_b - ext.p_c_b)
}

pub fn gen_features(cfg: &SimConfig, truth: &[TruthSample], landmarks: &[Vec3]) -> Vec<CameraFrame> {
    let mut rng = channel_rng(cfg.seed, Channel::Features);
    let step = cfg.samples_per_frame();
    let limit = (0.5 * cfg.fov_deg).to_radians().tan();
    let sigma = cfg.feature_noise_px / cfg.nominal_focal;
    let mut frames = Vec::new();
    for (id, k) in (0..truth.len()).step_by(step).enumerate() {
        let state = &truth[k].state;
        let mut observations = Vec::new();
        for (j, l) in landmarks.iter().enumerate() {
            let p = landmark_in_camera(state, &cfg.extrinsics, l);
            if p.z <= cfg.min_depth {
                continue;
            }
            let (u, v) = (p.x / p.z, p.y / p.z);
            if u.abs() > limit || v.abs() > limit {
                continue;
            }
            let (nu, nv) = if sigma > 0.0 {
                (rng.sample::<f64, _>(StandardNormal) * sigma, rng.sample::<f64, _>(StandardNormal) * sigma)
            } else {
                (0.0, 0.0)
            };
            observations.push(Observation { feature_id: j as u64, u: u + nu, v: v + nv, depth: p.z });
        }
        frames.push(CameraFrame { id, t: truth[k].t, imu_index: k, observations });
    }
    frames
}

/// Idealized up-to-scale camera poses relative to the first camera.
pub fn gen_sfm(cfg: &SimConfig, truth: &[TruthSample], frames: &[CameraFrame]) -> Vec<UpToScalePose> {
    let ext = &cfg.extrinsics;
    let cam = |s: &FrameState| (quat_mul(&s.q, &ext.q_c_b), s.p + s.q.rotate(&ext.p_c_b));
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let (q0, p0) = cam(&truth[first.imu_index].state);
    let r0t = q0.to_rotation_matrix().transpose();
    frames
        .iter()
        .map(|f| {
            let (q, p) = cam(&truth[f.imu_index].state);
            UpToScalePose { frame_id: f.id, t: f.t, q: quat_mul(&q0.inverse(), &q), p: r0t * (p - p0) / cfg.sfm_scale }
        })
        .collect()
}

/// Transform from the local world frame into the GPS frame planted by the config.
pub fn gps_transform(cfg: &SimConfig) -> (Mat3, Vec3) {
    (rot_z(cfg.gps_yaw_deg.to_radians()), cfg.gps_offset)
}

pub fn gen_gps(cfg: &SimConfig, truth: &[TruthSample]) -> Vec<GpsFix> {
    let mut rng = channel_rng(cfg.seed, Channel::Gps);
    let (r, t0) = gps_transform(cfg);
    let count = (cfg.trajectory.duration * cfg.gps_rate + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(count + 1);
    for k in 0..=count {
        let t = k as f64 / cfg.gps_rate;
        let idx = ((t * cfg.imu_rate).round() as usize).min(truth.len() - 1);
        let truth_t = truth[idx].t;
        let mut p = r * truth[idx].state.p + t0;
        if cfg.gps_noise {
            p += gaussian3(&mut rng) * cfg.gps_std;
        }
        out.push(GpsFix { t: truth_t, position: p, std: Vec3::repeat(cfg.gps_std) });
    }
    out
}

/// Generates the full dataset for a configuration.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    let (ideal, mut truth) = gen_truth(cfg)?;
    let imu = gen_imu(cfg, &ideal, &mut truth);
    let landmarks = gen_landmarks(cfg);
    let frames = gen_features(cfg, &truth, &landmarks);
    let sfm = gen_sfm(cfg, &truth, &frames);
    let gps = gen_gps(cfg, &truth);
    Ok(Dataset { config: cfg.clone(), imu, truth, frames, landmarks, sfm, gps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{FeatureObs, ImuFactor, VisionFactor, VisionMode};
    use crate::preint::{preint_batch, reference_propagate};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn flat_circle() -> TrajectorySpec {
        TrajectorySpec { vertical_amplitude: 0.0, tilt_amplitude: 0.0, ..Default::default() }
    }

    #[test]
    fn circle_kinematics() {
        let k = flat_circle().sample(0.0).unwrap();
        assert_relative_eq!(k.p, Vec3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(k.v.norm(), PI, epsilon = 1e-12);
        assert!(k.v.dot(&k.p).abs() < 1e-12);
        assert_relative_eq!(k.omega, Vec3::new(0.0, 0.0, 2.0 * PI / 10.0), epsilon = 1e-12);
        assert!(flat_circle().sample(31.0).is_err());
        assert!(flat_circle().sample(-0.1).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for kind in [TrajectoryKind::Circle, TrajectoryKind::FigureEight, TrajectoryKind::Sinusoid6dof] {
            let spec = TrajectorySpec { kind, ..Default::default() };
            for &t in &[0.3, 4.1, 12.7, 25.0] {
                let k = spec.sample(t).unwrap();
                let kp = spec.sample(t + h).unwrap();
                let km = spec.sample(t - h).unwrap();
                assert!(((kp.p - km.p) / (2.0 * h) - k.v).amax() < 1e-6, "{kind:?} v at {t}");
                assert!(((kp.v - km.v) / (2.0 * h) - k.a).amax() < 1e-6, "{kind:?} a at {t}");
                // body rate from q̇ = ½ q ⊗ (0, ω)
                let dq = crate::quat::so3_log(&quat_mul(&km.q.inverse(), &kp.q)) / (2.0 * h);
                assert!((dq - k.omega).amax() < 1e-6, "{kind:?} omega at {t}");
            }
        }
    }

    #[test]
    fn static_readings() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { kind: TrajectoryKind::Static, duration: 1.0, ..Default::default() },
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            ..Default::default()
        }
        .noiseless();
        let d = simulate(&cfg).unwrap();
        for s in &d.imu {
            assert_eq!(s.accel, Vec3::new(0.0, 0.0, 9.81));
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn reference_integration_follows_the_analytic_circle() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { duration: 10.0, ..flat_circle() },
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            ..Default::default()
        }
        .noiseless();
        let (ideal, truth) = gen_truth(&cfg).unwrap();
        let end = reference_propagate(&ideal, &truth[0].state, &cfg.gravity_vector()).unwrap();
        let k = cfg.trajectory.sample(10.0).unwrap();
        assert!((end.p - k.p).amax() < 1e-5, "{:?}", end.p - k.p);
        assert!((end.v - k.v).amax() < 1e-5);
        let last = truth.last().unwrap().state;
        assert!((last.p - k.p).amax() < 1e-3);
    }

    #[test]
    fn noiseless_residuals_vanish_at_truth() {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 3.0, ..Default::default() }, ..Default::default() }
            .noiseless();
        let d = simulate(&cfg).unwrap();
        let g = cfg.gravity_vector();
        for w in d.frames.windows(2) {
            let si = d.frame_truth(&w[0]);
            let sj = d.frame_truth(&w[1]);
            let delta = preint_batch(d.imu_between(&w[0], &w[1]), si.ba, si.bg, &NoiseParams::default()).unwrap();
            let f = ImuFactor::new(delta, g).unwrap();
            assert!(f.residual(si, sj).amax() < 1e-9);
        }
        let mut anchors = std::collections::HashMap::new();
        let mut checked = 0;
        for f in &d.frames {
            for o in &f.observations {
                let obs = FeatureObs { frame: f.id, u: o.u, v: o.v };
                match anchors.get(&o.feature_id) {
                    None => {
                        anchors.insert(o.feature_id, (obs, o.depth));
                    }
                    Some(&(a, depth)) => {
                        let si = d.frame_truth(&d.frames[a.frame]);
                        for mode in [VisionMode::Tangent, VisionMode::Plane] {
                            let vf = VisionFactor::new(&a, &obs, mode, 1.0).unwrap();
                            let r = vf.residual(&si.pose(), &d.frame_truth(f).pose(), &cfg.extrinsics, 1.0 / depth).unwrap();
                            assert!(r.amax() < 1e-10);
                        }
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn optical_axis_landmark() {
        let cfg = SimConfig { extrinsics: Extrinsics::default(), ..Default::default() };
        let state = FrameState::default();
        let p = landmark_in_camera(&state, &cfg.extrinsics, &Vec3::new(0.0, 0.0, 4.0));
        assert_eq!((p.x / p.z, p.y / p.z), (0.0, 0.0));
        assert_eq!(1.0 / p.z, 0.25);
    }

    #[test]
    fn observation_count_shrinks_with_fov() {
        let base = SimConfig { trajectory: TrajectorySpec { duration: 2.0, ..Default::default() }, ..Default::default() };
        let mut last = usize::MAX;
        for fov in [120.0, 90.0, 60.0, 30.0] {
            let d = simulate(&SimConfig { fov_deg: fov, ..base.clone() }).unwrap();
            let n: usize = d.frames.iter().map(|f| f.observations.len()).sum();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn imu_noise_variance() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { kind: TrajectoryKind::Static, duration: 500.0, ..Default::default() },
            imu_noise: NoiseParams { acc: 2e-2, gyro: 2e-3, acc_bias: 0.0, gyro_bias: 0.0 },
            accel_bias: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            ..Default::default()
        };
        let (ideal, mut truth) = gen_truth(&cfg).unwrap();
        let imu = gen_imu(&cfg, &ideal, &mut truth);
        assert!(imu.len() >= 100_000);
        for axis in 0..3 {
            let var = |f: &dyn Fn(&ImuSample) -> f64| {
                let n = imu.len() as f64;
                let mean = imu.iter().map(f).sum::<f64>() / n;
                imu.iter().map(|s| (f(s) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            };
            let va = var(&|s: &ImuSample| s.accel[axis]);
            let vg = var(&|s: &ImuSample| s.gyro[axis]);
            assert!((va / (2e-2f64.powi(2) * 200.0) - 1.0).abs() < 0.05);
            assert!((vg / (2e-3f64.powi(2) * 200.0) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn gps_noise_and_count() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec { duration: 30.0, ..Default::default() },
            ..Default::default()
        };
        let d = simulate(&cfg).unwrap();
        assert_eq!(d.gps.len(), 31);
        let exact = simulate(&cfg.clone().noiseless()).unwrap();
        for (a, f) in exact.gps.iter().zip(&exact.truth.iter().step_by(200).collect::<Vec<_>>()) {
            assert_eq!(a.position, f.state.p);
        }

        let long = SimConfig {
            trajectory: TrajectorySpec { kind: TrajectoryKind::Static, duration: 10_000.0, ..Default::default() },
            imu_rate: 100.0,
            cam_rate: 1.0,
            landmarks: 0,
            ..Default::default()
        };
        let (_, truth) = gen_truth(&long).unwrap();
        let fixes = gen_gps(&long, &truth);
        let n = fixes.len() as f64;
        let std = (fixes.iter().map(|f| f.position.x.powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 0.5 - 1.0).abs() < 0.1);
    }

    #[test]
    fn channels_are_independent() {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 2.0, ..Default::default() }, ..Default::default() };
        let a = simulate(&cfg).unwrap();
        let b = simulate(&SimConfig { gps_noise: false, ..cfg.clone() }).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.frames, b.frames);
        assert_eq!(simulate(&cfg).unwrap(), a);
    }

    #[test]
    fn sfm_is_scaled_relative_camera_motion() {
        let cfg = SimConfig { trajectory: TrajectorySpec { duration: 2.0, ..Default::default() }, ..Default::default() };
        let d = simulate(&cfg).unwrap();
        assert_eq!(d.sfm[0].q, UnitQuat::identity());
        assert_eq!(d.sfm[0].p, Vec3::zeros());
        let ext = &cfg.extrinsics;
        let cam = |s: &FrameState| s.p + s.q.rotate(&ext.p_c_b);
        let dist = (cam(d.frame_truth(&d.frames[5])) - cam(d.frame_truth(&d.frames[0]))).norm();
        assert_relative_eq!(d.sfm[5].p.norm() * 2.5, dist, epsilon = 1e-12);
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(SimConfig { imu_rate: 15.0, ..Default::default() }.validate().is_err());
        assert!(SimConfig { cam_rate: 30.0, ..Default::default() }.validate().is_err());
        let mut c = SimConfig::default();
        c.trajectory.duration = -1.0;
        assert!(c.validate().is_err());
    }
}
