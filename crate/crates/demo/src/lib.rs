//! WebAssembly bindings for the browser demo.
//!
//! Every exported function takes a JSON object of [`DemoParams`] and returns a
//! JSON string. The plain Rust functions behind them are usable natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use viokit::global::{optimize_graph, GlobalConfig, TransformStrategy};
use viokit::preint::{preint_batch, NoiseParams};
use viokit::quat::yaw_of;
use viokit::sim::{gps_transform, simulate, Dataset, SimConfig, TrajectoryKind, TrajectorySpec};
use viokit::{FrameState, Pose, Vec3};

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoParams {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub seed: u64,
    pub imu_noise: bool,
    /// Integrate with the true biases instead of zero.
    pub bias_aware: bool,
    pub gps_std: f64,
    pub gps_yaw_deg: f64,
    pub strategy: TransformStrategy,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Circle,
            duration: 20.0,
            seed: 0,
            imu_noise: true,
            bias_aware: false,
            gps_std: 0.5,
            gps_yaw_deg: 30.0,
            strategy: TransformStrategy::AllNodes,
        }
    }
}

impl DemoParams {
    fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            trajectory: TrajectorySpec { kind: self.kind, duration: self.duration, ..Default::default() },
            // features are not used here
            landmarks: 0,
            gps_std: self.gps_std,
            gps_yaw_deg: self.gps_yaw_deg,
            imu_noise: if self.imu_noise { NoiseParams::default() } else { NoiseParams::zero() },
            ..Default::default()
        }
    }
}

/// `[t, x, y, z]`
type Point = [f64; 4];

fn point(t: f64, p: &Vec3) -> Point {
    [t, p.x, p.y, p.z]
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationView {
    pub truth: Vec<Point>,
    /// Fixes in the GPS frame.
    pub gps: Vec<Point>,
    /// Ground truth expressed in the GPS frame.
    pub truth_gps: Vec<Point>,
    pub frames: usize,
    pub imu_samples: usize,
    pub path_length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeadReckoningView {
    pub truth: Vec<Point>,
    pub trajectory: Vec<Point>,
    /// `[t, position error]`
    pub error: Vec<[f64; 2]>,
    pub final_error: f64,
    pub path_length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FusionView {
    pub truth_gps: Vec<Point>,
    pub gps: Vec<Point>,
    /// IMU-only trajectory carried into the GPS frame by the planted transform.
    pub dead_reckoned: Vec<Point>,
    pub fused: Vec<Point>,
    /// `[t, error before, error after]`
    pub error: Vec<[f64; 3]>,
    pub rmse_before: f64,
    pub rmse_after: f64,
    pub yaw_deg: f64,
    pub translation: [f64; 3],
    pub associated: usize,
    pub iterations: usize,
}

fn truth_in_gps(data: &Dataset) -> Vec<Point> {
    let (rot, off) = gps_transform(&data.config);
    data.frames.iter().map(|f| point(f.t, &(rot * data.frame_truth(f).p + off))).collect()
}

fn rmse(errors: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = errors.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn run_simulation(params: &DemoParams) -> viokit::Result<SimulationView> {
    let data = simulate(&params.sim_config())?;
    Ok(SimulationView {
        truth: data.frames.iter().map(|f| point(f.t, &data.frame_truth(f).p)).collect(),
        gps: data.gps.iter().map(|g| point(g.t, &g.position)).collect(),
        truth_gps: truth_in_gps(&data),
        frames: data.frames.len(),
        imu_samples: data.imu.len(),
        path_length: data.path_length(),
    })
}

/// Chains frame-to-frame preintegrations from the true first state.
fn integrate(data: &Dataset, bias_aware: bool) -> viokit::Result<Vec<(f64, FrameState)>> {
    let gravity = data.config.gravity_vector();
    let first = &data.frames[0];
    let mut state = *data.frame_truth(first);
    if !bias_aware {
        state.ba = Vec3::zeros();
        state.bg = Vec3::zeros();
    }
    let mut out = vec![(first.t, state)];
    for w in data.frames.windows(2) {
        let delta = preint_batch(data.imu_between(&w[0], &w[1]), state.ba, state.bg, &data.config.imu_noise)?;
        state = delta.predict(&state, &gravity);
        if bias_aware {
            let truth = data.frame_truth(&w[1]);
            state.ba = truth.ba;
            state.bg = truth.bg;
        }
        out.push((w[1].t, state));
    }
    Ok(out)
}

pub fn run_dead_reckoning(params: &DemoParams) -> viokit::Result<DeadReckoningView> {
    let data = simulate(&params.sim_config())?;
    let states = integrate(&data, params.bias_aware)?;
    let error: Vec<[f64; 2]> =
        states.iter().zip(&data.frames).map(|((t, s), f)| [*t, (s.p - data.frame_truth(f).p).norm()]).collect();
    Ok(DeadReckoningView {
        truth: data.frames.iter().map(|f| point(f.t, &data.frame_truth(f).p)).collect(),
        trajectory: states.iter().map(|(t, s)| point(*t, &s.p)).collect(),
        final_error: error.last().map_or(0.0, |e| e[1]),
        error,
        path_length: data.path_length(),
    })
}

pub fn run_fusion(params: &DemoParams) -> viokit::Result<FusionView> {
    let data = simulate(&params.sim_config())?;
    let states = integrate(&data, params.bias_aware)?;
    let local: Vec<(f64, Pose)> =
        states.iter().map(|(t, s)| (*t, Pose { rotation: s.q, translation: s.p })).collect();
    let cfg = GlobalConfig { strategy: params.strategy, ..Default::default() };
    let result = optimize_graph(&local, &data.gps, &cfg)?;

    let (rot, off) = gps_transform(&data.config);
    let truth_gps = truth_in_gps(&data);
    let dead_reckoned: Vec<Point> = states.iter().map(|(t, s)| point(*t, &(rot * s.p + off))).collect();
    let fused: Vec<Point> = result.nodes.iter().map(|n| point(n.t, &n.p)).collect();
    let dist = |a: &Point, b: &Point| ((a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2) + (a[3] - b[3]).powi(2)).sqrt();
    let error: Vec<[f64; 3]> = truth_gps
        .iter()
        .zip(&dead_reckoned)
        .zip(&fused)
        .map(|((g, d), f)| [g[0], dist(g, d), dist(g, f)])
        .collect();
    let t = result.transform.translation;
    Ok(FusionView {
        rmse_before: rmse(error.iter().map(|e| e[1])),
        rmse_after: rmse(error.iter().map(|e| e[2])),
        error,
        yaw_deg: yaw_of(&result.transform.rotation.to_rotation_matrix()).to_degrees(),
        translation: [t.x, t.y, t.z],
        associated: result.associated,
        iterations: result.iterations,
        gps: data.gps.iter().map(|g| point(g.t, &g.position)).collect(),
        truth_gps,
        dead_reckoned,
        fused,
    })
}

fn call<T: Serialize>(params: &str, f: fn(&DemoParams) -> viokit::Result<T>) -> Result<String, JsError> {
    let params: DemoParams = serde_json::from_str(params)?;
    let view = f(&params)?;
    Ok(serde_json::to_string(&view)?)
}

#[wasm_bindgen(js_name = simulateTrajectory)]
pub fn simulate_trajectory(params: &str) -> Result<String, JsError> {
    call(params, run_simulation)
}

#[wasm_bindgen(js_name = deadReckon)]
pub fn dead_reckon(params: &str) -> Result<String, JsError> {
    call(params, run_dead_reckoning)
}

#[wasm_bindgen(js_name = fuseGps)]
pub fn fuse_gps(params: &str) -> Result<String, JsError> {
    call(params, run_fusion)
}
