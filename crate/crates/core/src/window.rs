//! Sliding-window visual-inertial estimator.
//!
//! Frames enter with their IMU interval closed into a preintegrated delta.
//! Once the window is full each new frame triggers one of two reductions:
//! a keyframe marginalizes the oldest frame (and the landmarks anchored there)
//! into a linear prior; a non-keyframe discards the second-newest frame and
//! splices its IMU interval into its neighbour's.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix4};
use serde::{Deserialize, Serialize};

use crate::align::{self, camera_to_imu, UpToScalePose};
use crate::error::{Error, Result};
use crate::factors::{FeatureObs, GaugeFactor, ImuFactor, VisionFactor, VisionMode};
use crate::preint::{preint_batch_with_max_dt, preint_reset, ImuSample, NoiseParams, Preintegration, DEFAULT_MAX_DT};
use crate::quat::{quat_mul, Pose, Vec3};
use crate::solver::{
    block_minus, optimize, schur_reduce, sqrt_prior, BlockId, BlockKind, Loss, PriorTerm, Problem, SolverConfig,
    Termination,
};
use crate::state::{Extrinsics, FrameState};

/// Whitening weight of the term holding the oldest frame's position and yaw.
pub const GAUGE_WEIGHT: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Visual-inertial alignment on up-to-scale poses.
    #[default]
    Align,
    /// First frame state taken from the supplied truth.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_size: usize,
    /// Mean feature displacement, in pixels at `nominal_focal`, that makes a keyframe.
    pub keyframe_parallax_px: f64,
    /// Features shared with the previous frame needed for a keyframe.
    pub min_tracked: usize,
    pub nominal_focal: f64,
    /// Pixel standard deviation of the vision residual.
    pub pixel_sigma: f64,
    pub noise: NoiseParams,
    pub gravity: f64,
    pub vision_mode: VisionMode,
    /// Huber threshold on whitened vision residuals; `null` disables it.
    pub huber: Option<f64>,
    pub estimate_extrinsics: bool,
    pub init: InitMode,
    /// Frames collected before alignment is attempted.
    pub init_frames: usize,
    pub init_accel_bias: Vec3,
    pub init_gyro_bias: Vec3,
    /// Landmarks triangulated closer than this to their anchor camera are ignored, m.
    pub min_depth: f64,
    /// Bias change, since linearization, above which an interval is integrated again.
    pub repropagate_threshold: f64,
    pub max_dt: f64,
    pub solver: SolverConfig,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            keyframe_parallax_px: 20.0,
            min_tracked: 30,
            nominal_focal: 460.0,
            pixel_sigma: 1.5,
            noise: NoiseParams::default(),
            gravity: crate::GRAVITY,
            vision_mode: VisionMode::Tangent,
            huber: Some(1.0),
            estimate_extrinsics: false,
            init: InitMode::Align,
            init_frames: 10,
            init_accel_bias: Vec3::zeros(),
            init_gyro_bias: Vec3::zeros(),
            min_depth: 0.1,
            repropagate_threshold: 1e-2,
            max_dt: DEFAULT_MAX_DT,
            solver: SolverConfig::default(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 4 {
            return Err(Error::Config(format!("window_size must be at least 4, got {}", self.window_size)));
        }
        if self.init_frames < 4 || self.init_frames > self.window_size {
            return Err(Error::Config(format!(
                "init_frames must lie in [4, window_size], got {}",
                self.init_frames
            )));
        }
        for (name, v) in [
            ("keyframe_parallax_px", self.keyframe_parallax_px),
            ("nominal_focal", self.nominal_focal),
            ("pixel_sigma", self.pixel_sigma),
            ("gravity", self.gravity),
            ("min_depth", self.min_depth),
            ("repropagate_threshold", self.repropagate_threshold),
            ("max_dt", self.max_dt),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(h) = self.huber {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config(format!("huber must be positive, got {h}")));
            }
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn vision_weight(&self) -> f64 {
        self.nominal_focal / self.pixel_sigma
    }

    fn vision_loss(&self) -> Loss {
        self.huber.map_or(Loss::Trivial, Loss::Huber)
    }

    fn gravity_vector(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.gravity)
    }
}

/// One feature measurement of an incoming frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeasurement {
    pub feature_id: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub id: usize,
    pub t: f64,
    pub features: Vec<FeatureMeasurement>,
    pub sfm: Option<UpToScalePose>,
    pub truth: Option<FrameState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Uninitialized,
    Initialized,
}

#[derive(Clone, Debug)]
struct WinFrame {
    id: usize,
    t: f64,
    state: FrameState,
    sfm: Option<UpToScalePose>,
    keyframe: bool,
}

#[derive(Clone, Debug)]
struct Track {
    /// Observations ordered by frame; the first one is the anchor.
    obs: Vec<FeatureObs>,
    inv_depth: Option<f64>,
    floor_hits: u32,
}

/// Block of the window a prior column range refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PriorBlock {
    Pose(usize),
    SpeedBias(usize),
    Extrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationRecord {
    pub frame_id: usize,
    pub t: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub imu_factors: usize,
    pub vision_factors: usize,
    pub prior_rows: usize,
    /// Largest tangent change of any frame block during this optimization.
    pub max_state_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum WindowEvent {
    Initialized { frame_id: usize, scale: Option<f64>, condition: Option<f64> },
    InitializationDeferred { frame_id: usize, reason: String },
    MarginalizedOldest { frame_id: usize, prior_dim: usize, prior_rows: usize },
    DiscardedSecondNewest { frame_id: usize },
    DroppedOldest { frame_id: usize },
    LandmarkDropped { feature_id: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub frame_id: usize,
    pub t: f64,
    pub state: FrameState,
}

/// Block ids of one assembled window problem.
struct BlockMap {
    poses: Vec<BlockId>,
    speed_bias: Vec<BlockId>,
    ext: BlockId,
    landmarks: Vec<(u64, BlockId)>,
}

pub struct SlidingWindow {
    cfg: WindowConfig,
    ext: Extrinsics,
    frames: Vec<WinFrame>,
    deltas: Vec<Preintegration>,
    open: Option<Preintegration>,
    last_imu: Option<ImuSample>,
    tracks: BTreeMap<u64, Track>,
    prior: Option<(PriorTerm, Vec<PriorBlock>)>,
    status: Status,
    events: Vec<WindowEvent>,
    optimizations: Vec<OptimizationRecord>,
    departed: Vec<TrajectoryPoint>,
    keyframes: usize,
}

/// Camera pose in the world for a body state.
pub fn camera_pose(state: &FrameState, ext: &Extrinsics) -> Pose {
    Pose::new(quat_mul(&state.q, &ext.q_c_b), state.p + state.q.rotate(&ext.p_c_b))
}

/// Linear multi-view triangulation of normalized observations `(u, v, 1)`
/// seen from world camera poses. Returns the world point.
pub fn triangulate(views: &[(Pose, Vec3)]) -> Option<Vec3> {
    if views.len() < 2 {
        return None;
    }
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (k, (cam, m)) in views.iter().enumerate() {
        let rt = cam.rotation.to_rotation_matrix().transpose();
        let t = -rt * cam.translation;
        let mut p = nalgebra::Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        p.set_column(3, &t);
        a.row_mut(2 * k).copy_from(&(m.x * p.row(2) - p.row(0)));
        a.row_mut(2 * k + 1).copy_from(&(m.y * p.row(2) - p.row(1)));
    }
    let ata: Matrix4<f64> = (a.transpose() * &a).fixed_view::<4, 4>(0, 0).into_owned();
    let eig = ata.symmetric_eigen();
    let (i, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(i);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Vec3::new(h[0], h[1], h[2]) / h[3])
}

fn predict(delta: &Preintegration, start: &FrameState, gravity: &Vec3) -> FrameState {
    let (alpha, beta, gamma) = delta.correct_for_bias(&start.ba, &start.bg);
    let t = delta.dt_total;
    let r = start.q.to_rotation_matrix();
    FrameState {
        p: start.p + start.v * t - 0.5 * gravity * t * t + r * alpha,
        v: start.v - gravity * t + r * beta,
        q: quat_mul(&start.q, &gamma),
        ba: start.ba,
        bg: start.bg,
    }
}

impl SlidingWindow {
    pub fn new(cfg: WindowConfig, ext: Extrinsics) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            ext,
            frames: Vec::new(),
            deltas: Vec::new(),
            open: None,
            last_imu: None,
            tracks: BTreeMap::new(),
            prior: None,
            status: Status::Uninitialized,
            events: Vec::new(),
            optimizations: Vec::new(),
            departed: Vec::new(),
            keyframes: 0,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.id).collect()
    }

    pub fn states(&self) -> Vec<FrameState> {
        self.frames.iter().map(|f| f.state).collect()
    }

    pub fn deltas(&self) -> &[Preintegration] {
        &self.deltas
    }

    /// IMU interval accumulated since the newest frame.
    pub fn accumulator(&self) -> Option<&Preintegration> {
        self.open.as_ref()
    }

    pub fn prior(&self) -> Option<&PriorTerm> {
        self.prior.as_ref().map(|(p, _)| p)
    }

    pub fn events(&self) -> &[WindowEvent] {
        &self.events
    }

    pub fn optimizations(&self) -> &[OptimizationRecord] {
        &self.optimizations
    }

    pub fn keyframes(&self) -> usize {
        self.keyframes
    }

    /// Number of landmarks with a depth estimate and at least two observations.
    pub fn active_landmarks(&self) -> usize {
        self.tracks.values().filter(|t| t.inv_depth.is_some() && t.obs.len() >= 2).count()
    }

    pub fn feed_imu(&mut self, sample: ImuSample) -> Result<()> {
        if let Some(last) = self.last_imu {
            if !(sample.t > last.t) {
                return Err(Error::InvalidArgument(format!(
                    "IMU sample at t = {} does not follow t = {}",
                    sample.t, last.t
                )));
            }
            let (ba, bg) = self.frames.last().map_or((self.cfg.init_accel_bias, self.cfg.init_gyro_bias), |f| {
                (f.state.ba, f.state.bg)
            });
            let max_dt = self.cfg.max_dt;
            let acc = self.open.get_or_insert_with(|| {
                let mut p = preint_reset(ba, bg);
                p.max_dt = max_dt;
                p
            });
            acc.push(&last, &sample, &self.cfg.noise)?;
        }
        self.last_imu = Some(sample);
        Ok(())
    }

    /// Mean parallax in pixels and the number of features shared with the
    /// newest keyframe of the window.
    fn parallax(&self, features: &[FeatureMeasurement]) -> (f64, usize) {
        let Some(reference) = self.frames.iter().rev().find(|f| f.keyframe) else {
            return (f64::INFINITY, features.len());
        };
        let mut sum = 0.0;
        let mut n = 0;
        for f in features {
            let seen = self.tracks.get(&f.feature_id).and_then(|t| t.obs.iter().rev().find(|o| o.frame == reference.id));
            if let Some(o) = seen {
                sum += ((f.u - o.u).powi(2) + (f.v - o.v).powi(2)).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            (0.0, 0)
        } else {
            (sum / n as f64 * self.cfg.nominal_focal, n)
        }
    }

    /// Adds a frame. The last IMU sample fed must carry the frame timestamp.
    pub fn feed_frame(&mut self, input: FrameInput) -> Result<Option<OptimizationRecord>> {
        let last = self
            .last_imu
            .ok_or_else(|| Error::InvalidArgument(format!("frame {} arrived before any IMU sample", input.id)))?;
        if (last.t - input.t).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "frame {} at t = {} but the last IMU sample is at t = {}",
                input.id, input.t, last.t
            )));
        }
        if self.frames.last().is_some_and(|f| f.id >= input.id || f.t >= input.t) {
            return Err(Error::InvalidArgument(format!("frame {} is out of order", input.id)));
        }
        let (parallax, tracked) = self.parallax(&input.features);
        let keyframe = self.frames.is_empty() || (tracked >= self.cfg.min_tracked && parallax >= self.cfg.keyframe_parallax_px);
        if keyframe {
            self.keyframes += 1;
        }

        let state = match self.frames.last() {
            Some(prev) => {
                let delta = self
                    .open
                    .take()
                    .filter(|d| d.dt_total > 0.0)
                    .ok_or_else(|| Error::InvalidArgument(format!("no IMU samples before frame {}", input.id)))?;
                let state = if self.status == Status::Initialized {
                    predict(&delta, &prev.state, &self.cfg.gravity_vector())
                } else {
                    FrameState { ba: self.cfg.init_accel_bias, bg: self.cfg.init_gyro_bias, ..Default::default() }
                };
                self.deltas.push(delta);
                state
            }
            None => {
                self.open = None;
                match (self.cfg.init, input.truth) {
                    (InitMode::GroundTruth, Some(truth)) => {
                        self.status = Status::Initialized;
                        self.events.push(WindowEvent::Initialized { frame_id: input.id, scale: None, condition: None });
                        truth
                    }
                    (InitMode::GroundTruth, None) => {
                        return Err(Error::InvalidArgument(format!(
                            "ground-truth initialization needs the state of frame {}",
                            input.id
                        )))
                    }
                    _ => FrameState { ba: self.cfg.init_accel_bias, bg: self.cfg.init_gyro_bias, ..Default::default() },
                }
            }
        };
        self.frames.push(WinFrame { id: input.id, t: input.t, state, sfm: input.sfm, keyframe });
        for f in &input.features {
            let obs = FeatureObs { frame: input.id, u: f.u, v: f.v };
            self.tracks
                .entry(f.feature_id)
                .or_insert_with(|| Track { obs: Vec::new(), inv_depth: None, floor_hits: 0 })
                .obs
                .push(obs);
        }

        if self.frames.len() > self.cfg.window_size {
            match (self.status, keyframe) {
                (Status::Initialized, true) => self.marginalize_oldest()?,
                (Status::Initialized, false) => self.discard_second_newest()?,
                (Status::Uninitialized, true) => self.drop_oldest(),
                (Status::Uninitialized, false) => self.discard_second_newest()?,
            }
        }

        if self.status == Status::Uninitialized && self.cfg.init == InitMode::Align && self.frames.len() >= self.cfg.init_frames {
            self.try_initialize()?;
        }
        if self.status == Status::Initialized && self.frames.len() >= 2 {
            return self.optimize_window().map(Some);
        }
        Ok(None)
    }

    /// Aligns the window on its up-to-scale poses. Degenerate motion leaves
    /// the window uninitialized with a recorded diagnostic.
    pub fn try_initialize(&mut self) -> Result<bool> {
        let frame_id = self.frames.last().map_or(0, |f| f.id);
        let sfm: Option<Vec<UpToScalePose>> = self.frames.iter().map(|f| f.sfm).collect();
        let Some(sfm) = sfm else {
            self.events.push(WindowEvent::InitializationDeferred { frame_id, reason: "missing up-to-scale poses".into() });
            return Ok(false);
        };
        let poses = camera_to_imu(&sfm, &self.ext);
        let result = match align::align(&self.deltas, &poses, &self.ext, self.cfg.gravity) {
            Ok(r) => r,
            Err(e @ (Error::DegenerateMotion(_) | Error::InitializationFailed(_))) => {
                log::info!("initialization deferred at frame {frame_id}: {e}");
                self.events.push(WindowEvent::InitializationDeferred { frame_id, reason: e.to_string() });
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let (states, _) = align::initial_states(&result, &poses, &self.cfg.init_accel_bias, &self.cfg.init_gyro_bias)?;
        for (f, s) in self.frames.iter_mut().zip(states) {
            f.state = s;
        }
        self.status = Status::Initialized;
        self.events.push(WindowEvent::Initialized {
            frame_id,
            scale: Some(result.scale),
            condition: Some(result.condition),
        });
        log::info!("initialized at frame {frame_id}: scale {:.6}", result.scale);
        Ok(true)
    }

    fn frame_index(&self, id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    fn triangulate_tracks(&mut self) {
        let ext = self.ext;
        let min_depth = self.cfg.min_depth;
        let poses: BTreeMap<usize, Pose> = self.frames.iter().map(|f| (f.id, camera_pose(&f.state, &ext))).collect();
        for track in self.tracks.values_mut() {
            if track.inv_depth.is_some() || track.obs.len() < 2 {
                continue;
            }
            let views: Vec<(Pose, Vec3)> = track.obs.iter().map(|o| (poses[&o.frame], o.point())).collect();
            if let Some(pw) = triangulate(&views) {
                let anchor = &views[0].0;
                let pc = anchor.inverse().transform_point(&pw);
                if pc.z > min_depth {
                    track.inv_depth = Some(1.0 / pc.z);
                }
            }
        }
    }

    fn repropagate(&mut self) -> Result<()> {
        for (k, d) in self.deltas.iter_mut().enumerate() {
            let s = &self.frames[k].state;
            let change = (s.ba - d.lin_ba).amax().max((s.bg - d.lin_bg).amax());
            if change > self.cfg.repropagate_threshold {
                *d = d.repropagate(s.ba, s.bg, &self.cfg.noise)?;
            }
        }
        Ok(())
    }

    /// Assembles the window problem. `frames` limits the frame blocks that
    /// get factors; landmarks are included when `with_vision` is set.
    fn build_problem(&self, with_vision: bool, with_prior: bool) -> Result<(Problem, BlockMap)> {
        let mut problem = Problem::new();
        let mut poses = Vec::new();
        let mut speed_bias = Vec::new();
        for f in &self.frames {
            poses.push(problem.add_block(BlockKind::Pose, f.state.pose_params()));
            speed_bias.push(problem.add_block(BlockKind::SpeedBias, f.state.speed_bias_params()));
        }
        let ext = problem.add_block(BlockKind::Pose, self.ext.params());
        problem.set_fixed(ext, !self.cfg.estimate_extrinsics);

        if with_prior {
            if let Some((prior, keys)) = &self.prior {
                let ids = self.prior_block_ids(keys, &poses, &speed_bias, ext)?;
                problem.add_factor(Arc::new(prior.clone()), ids, Loss::Trivial)?;
            }
        }
        let g = self.cfg.gravity_vector();
        for (k, d) in self.deltas.iter().enumerate() {
            let f = ImuFactor::new(d.clone(), g)?;
            problem.add_factor(
                Arc::new(f),
                vec![poses[k], speed_bias[k], poses[k + 1], speed_bias[k + 1]],
                Loss::Trivial,
            )?;
        }
        let mut landmarks = Vec::new();
        if with_vision {
            for (&id, track) in &self.tracks {
                let Some(lambda) = track.inv_depth else { continue };
                if track.obs.len() < 2 {
                    continue;
                }
                let Some(ai) = self.frame_index(track.obs[0].frame) else { continue };
                let lid = problem.add_block(BlockKind::InverseDepth, vec![lambda]);
                landmarks.push((id, lid));
                for o in &track.obs[1..] {
                    let Some(j) = self.frame_index(o.frame) else { continue };
                    let f = VisionFactor::new(&track.obs[0], o, self.cfg.vision_mode, self.cfg.vision_weight())?;
                    problem.add_factor(Arc::new(f), vec![poses[ai], poses[j], ext, lid], self.cfg.vision_loss())?;
                }
            }
        }
        Ok((problem, BlockMap { poses, speed_bias, ext, landmarks }))
    }

    fn prior_block_ids(&self, keys: &[PriorBlock], poses: &[BlockId], sb: &[BlockId], ext: BlockId) -> Result<Vec<BlockId>> {
        keys.iter()
            .map(|k| match *k {
                PriorBlock::Pose(id) => self.frame_index(id).map(|i| poses[i]),
                PriorBlock::SpeedBias(id) => self.frame_index(id).map(|i| sb[i]),
                PriorBlock::Extrinsics => Some(ext),
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidArgument("prior refers to a frame outside the window".into()))
    }

    /// Runs the solver over prior, IMU and vision factors and writes the result back.
    pub fn optimize_window(&mut self) -> Result<OptimizationRecord> {
        self.repropagate()?;
        self.triangulate_tracks();
        let (mut problem, map) = self.build_problem(true, true)?;
        let oldest = &self.frames[0].state;
        problem.add_factor(
            Arc::new(GaugeFactor::new(oldest.p, oldest.q.yaw(), GAUGE_WEIGHT)),
            vec![map.poses[0]],
            Loss::Trivial,
        )?;
        let before: Vec<(Vec<f64>, Vec<f64>)> =
            map.poses.iter().zip(&map.speed_bias).map(|(&p, &s)| (problem.value(p).to_vec(), problem.value(s).to_vec())).collect();
        let report = optimize(&mut problem, &self.cfg.solver)?;

        let mut max_change: f64 = 0.0;
        for (k, f) in self.frames.iter_mut().enumerate() {
            let pose = problem.value(map.poses[k]);
            let sb = problem.value(map.speed_bias[k]);
            for v in block_minus(BlockKind::Pose, pose, &before[k].0).into_iter().chain(block_minus(BlockKind::SpeedBias, sb, &before[k].1)) {
                max_change = max_change.max(v.abs());
            }
            f.state = FrameState::from_params(pose, sb);
        }
        if self.cfg.estimate_extrinsics {
            self.ext = Extrinsics::from_params(problem.value(map.ext));
        }
        let floored: Vec<BlockId> = report.floored_blocks.clone();
        for (fid, lid) in &map.landmarks {
            let track = self.tracks.get_mut(fid).expect("landmark of a live track");
            track.inv_depth = Some(problem.value(*lid)[0]);
            if floored.contains(lid) {
                track.floor_hits += 1;
            }
        }
        let dropped: Vec<u64> = self.tracks.iter().filter(|(_, t)| t.floor_hits >= 2).map(|(&id, _)| id).collect();
        for id in dropped {
            self.tracks.remove(&id);
            self.events.push(WindowEvent::LandmarkDropped { feature_id: id });
        }

        let newest = self.frames.last().expect("non-empty window");
        let record = OptimizationRecord {
            frame_id: newest.id,
            t: newest.t,
            initial_cost: report.initial_cost,
            final_cost: report.final_cost,
            iterations: report.iterations,
            termination: report.termination,
            imu_factors: problem.count_factors("imu"),
            vision_factors: problem.count_factors("vision"),
            prior_rows: self.prior.as_ref().map_or(0, |(p, _)| p.residual.len()),
            max_state_change: max_change,
        };
        self.optimizations.push(record.clone());
        Ok(record)
    }

    /// Near-singular directions of the current window Hessian, with or
    /// without vision factors (prior excluded).
    pub fn near_singular_dimensions(&self, with_vision: bool, rel: f64) -> Result<usize> {
        let (problem, _) = self.build_problem(with_vision, false)?;
        Ok(problem.build_normal_equations()?.near_singular_dimensions(rel))
    }

    /// Writes the current window Hessian in matrix-market text form.
    pub fn dump_hessian(&self, path: &std::path::Path) -> Result<()> {
        let (problem, _) = self.build_problem(true, true)?;
        problem.build_normal_equations()?.write_matrix_market(path)
    }

    fn depart(&mut self, index: usize) -> WinFrame {
        let f = self.frames.remove(index);
        self.departed.push(TrajectoryPoint { frame_id: f.id, t: f.t, state: f.state });
        f
    }

    /// Moves the anchor of tracks anchored at `frame` to their next
    /// observation, carrying the depth estimate along.
    fn reanchor(&mut self, frame: &WinFrame) {
        let ext = self.ext;
        let poses: BTreeMap<usize, Pose> = self.frames.iter().map(|f| (f.id, camera_pose(&f.state, &ext))).collect();
        let old_cam = camera_pose(&frame.state, &ext);
        let min_depth = self.cfg.min_depth;
        self.tracks.retain(|_, t| {
            let Some(pos) = t.obs.iter().position(|o| o.frame == frame.id) else {
                return true;
            };
            let removed = t.obs.remove(pos);
            if t.obs.is_empty() {
                return false;
            }
            if pos == 0 {
                t.inv_depth = t.inv_depth.and_then(|lambda| {
                    let pw = old_cam.transform_point(&(removed.point() / lambda));
                    let cam = poses.get(&t.obs[0].frame)?;
                    let pc = cam.inverse().transform_point(&pw);
                    (pc.z > min_depth).then(|| 1.0 / pc.z)
                });
                t.floor_hits = 0;
            }
            true
        });
    }

    /// Schur-eliminates the oldest frame and the landmarks anchored in it
    /// into the prior.
    fn marginalize_oldest(&mut self) -> Result<()> {
        self.triangulate_tracks();
        let oldest = self.frames[0].id;
        let newest = self.frames.last().expect("full window").id;
        let mut problem = Problem::new();
        let mut ids: BTreeMap<PriorBlock, BlockId> = BTreeMap::new();
        let mut block = |problem: &mut Problem, key: PriorBlock, this: &Self| -> BlockId {
            *ids.entry(key).or_insert_with(|| {
                let (kind, value, fixed) = match key {
                    PriorBlock::Pose(id) => (BlockKind::Pose, this.frames[this.frame_index(id).unwrap()].state.pose_params(), false),
                    PriorBlock::SpeedBias(id) => {
                        (BlockKind::SpeedBias, this.frames[this.frame_index(id).unwrap()].state.speed_bias_params(), false)
                    }
                    PriorBlock::Extrinsics => (BlockKind::Pose, this.ext.params(), !this.cfg.estimate_extrinsics),
                };
                let id = problem.add_block(kind, value);
                problem.set_fixed(id, fixed);
                id
            })
        };

        if let Some((prior, keys)) = &self.prior {
            let blocks: Vec<BlockId> = keys.iter().map(|k| block(&mut problem, *k, self)).collect();
            problem.add_factor(Arc::new(prior.clone()), blocks, Loss::Trivial)?;
        }
        let next = self.frames[1].id;
        let imu_blocks = vec![
            block(&mut problem, PriorBlock::Pose(oldest), self),
            block(&mut problem, PriorBlock::SpeedBias(oldest), self),
            block(&mut problem, PriorBlock::Pose(next), self),
            block(&mut problem, PriorBlock::SpeedBias(next), self),
        ];
        problem.add_factor(
            Arc::new(ImuFactor::new(self.deltas[0].clone(), self.cfg.gravity_vector())?),
            imu_blocks.clone(),
            Loss::Trivial,
        )?;
        let mut marg = vec![imu_blocks[0], imu_blocks[1]];
        for track in self.tracks.values() {
            let Some(lambda) = track.inv_depth else { continue };
            if track.obs[0].frame != oldest || track.obs.len() < 2 {
                continue;
            }
            let observed: Vec<&FeatureObs> = track.obs[1..].iter().filter(|o| o.frame != newest).collect();
            if observed.is_empty() {
                continue;
            }
            let lid = problem.add_block(BlockKind::InverseDepth, vec![lambda]);
            marg.push(lid);
            for o in observed {
                let f = VisionFactor::new(&track.obs[0], o, self.cfg.vision_mode, self.cfg.vision_weight())?;
                let bi = block(&mut problem, PriorBlock::Pose(oldest), self);
                let bj = block(&mut problem, PriorBlock::Pose(o.frame), self);
                let be = block(&mut problem, PriorBlock::Extrinsics, self);
                problem.add_factor(Arc::new(f), vec![bi, bj, be, lid], self.cfg.vision_loss())?;
            }
        }
        let sys = problem.build_normal_equations()?;
        let (prior, retained) = crate::solver::marginalize(&problem, &sys, &marg)?;
        let by_id: BTreeMap<BlockId, PriorBlock> = ids.iter().map(|(k, v)| (*v, *k)).collect();
        let keys: Vec<PriorBlock> = retained.iter().map(|id| by_id[id]).collect();
        let prior_dim = prior.tangent_dim();
        let prior_rows = prior.residual.len();
        self.prior = Some((prior, keys));

        let removed = self.depart(0);
        self.deltas.remove(0);
        self.reanchor(&removed);
        self.events.push(WindowEvent::MarginalizedOldest { frame_id: removed.id, prior_dim, prior_rows });
        Ok(())
    }

    /// Removes the second-newest frame without marginalizing its
    /// measurements; its IMU interval is merged into the preceding one.
    fn discard_second_newest(&mut self) -> Result<()> {
        let idx = self.frames.len() - 2;
        let spliced = {
            let a = &self.deltas[idx - 1];
            let b = &self.deltas[idx];
            let mut samples = a.samples.clone();
            samples.extend_from_slice(&b.samples[1..]);
            preint_batch_with_max_dt(&samples, a.lin_ba, a.lin_bg, &self.cfg.noise, a.max_dt)?
        };
        let id = self.frames[idx].id;
        self.remove_from_prior(id)?;
        self.deltas[idx - 1] = spliced;
        self.deltas.remove(idx);
        let removed = self.depart(idx);
        self.reanchor(&removed);
        self.events.push(WindowEvent::DiscardedSecondNewest { frame_id: id });
        Ok(())
    }

    /// Drops the oldest frame outright (used before initialization).
    fn drop_oldest(&mut self) {
        let removed = self.depart(0);
        self.deltas.remove(0);
        self.reanchor(&removed);
        self.events.push(WindowEvent::DroppedOldest { frame_id: removed.id });
    }

    /// Marginalizes the blocks of frame `id` out of the prior alone.
    fn remove_from_prior(&mut self, id: usize) -> Result<()> {
        let Some((prior, keys)) = &self.prior else {
            return Ok(());
        };
        if !keys.iter().any(|k| matches!(k, PriorBlock::Pose(f) | PriorBlock::SpeedBias(f) if *f == id)) {
            return Ok(());
        }
        let (h, b) = prior.information();
        let mut m = Vec::new();
        let mut r = Vec::new();
        let mut kept_keys = Vec::new();
        let mut kept_kinds = Vec::new();
        let mut kept_lin = Vec::new();
        let mut o = 0;
        for ((k, kind), lin) in keys.iter().zip(&prior.kinds).zip(&prior.linearization) {
            let d = kind.tangent_dim();
            if matches!(k, PriorBlock::Pose(f) | PriorBlock::SpeedBias(f) if *f == id) {
                m.extend(o..o + d);
            } else {
                r.extend(o..o + d);
                kept_keys.push(*k);
                kept_kinds.push(*kind);
                kept_lin.push(lin.clone());
            }
            o += d;
        }
        if r.is_empty() {
            self.prior = None;
            return Ok(());
        }
        let (hp, bp) = schur_reduce(&h, &b, &m, &r);
        let (jacobian, residual) = sqrt_prior(&hp, &bp);
        self.prior = Some((PriorTerm { kinds: kept_kinds, linearization: kept_lin, jacobian, residual }, kept_keys));
        Ok(())
    }

    /// Every frame estimate, taken when the frame left the window or from
    /// the current window, in time order.
    pub fn trajectory(&self) -> Vec<TrajectoryPoint> {
        let mut out = self.departed.clone();
        out.extend(self.frames.iter().map(|f| TrajectoryPoint { frame_id: f.id, t: f.t, state: f.state }));
        out.sort_by(|a, b| a.t.total_cmp(&b.t));
        out
    }
}

/// Estimator inputs: the IMU stream and the camera frames, both time ordered.
#[derive(Clone, Debug, Default)]
pub struct EstimatorInput {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameInput>,
}

impl EstimatorInput {
    pub fn from_dataset(data: &crate::sim::Dataset) -> Self {
        let frames = data
            .frames
            .iter()
            .map(|f| FrameInput {
                id: f.id,
                t: f.t,
                features: f.observations.iter().map(|o| FeatureMeasurement { feature_id: o.feature_id, u: o.u, v: o.v }).collect(),
                sfm: data.sfm.iter().find(|s| s.frame_id == f.id).copied(),
                truth: Some(*data.frame_truth(f)),
            })
            .collect();
        Self { imu: data.imu.clone(), frames }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub frames: usize,
    pub keyframes: usize,
    pub status: Status,
    pub optimizations: Vec<OptimizationRecord>,
    pub events: Vec<WindowEvent>,
    pub total_iterations: usize,
    /// Filled in when ground truth is available.
    pub position_rmse: Option<f64>,
    pub path_length: Option<f64>,
    pub final_gyro_bias_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EstimatorOutput {
    pub trajectory: Vec<TrajectoryPoint>,
    pub report: EstimatorReport,
}

/// Feeds a whole recording through a window, inserting an interpolated IMU
/// sample at frame times that fall between samples. Optionally dumps the
/// final window Hessian.
pub fn run_estimator(
    input: &EstimatorInput,
    ext: &Extrinsics,
    cfg: &WindowConfig,
    hessian_dump: Option<&std::path::Path>,
) -> Result<EstimatorOutput> {
    let mut w = SlidingWindow::new(cfg.clone(), *ext)?;
    let imu = &input.imu;
    if imu.is_empty() {
        return Err(Error::InvalidArgument("empty IMU stream".into()));
    }
    let mut next = 0;
    let mut last_t = f64::NEG_INFINITY;
    for frame in &input.frames {
        if frame.t < imu[0].t - 1e-9 || frame.t > imu[imu.len() - 1].t + 1e-9 {
            log::warn!("frame {} at t = {} lies outside the IMU stream; skipped", frame.id, frame.t);
            continue;
        }
        while next < imu.len() && imu[next].t <= frame.t + 1e-9 {
            w.feed_imu(imu[next])?;
            last_t = imu[next].t;
            next += 1;
        }
        if (last_t - frame.t).abs() > 1e-9 {
            let s = crate::preint::interpolate(&imu[next - 1], &imu[next], frame.t);
            w.feed_imu(s)?;
            last_t = s.t;
        }
        w.feed_frame(frame.clone())?;
    }
    if let Some(path) = hessian_dump {
        if w.status() == Status::Initialized {
            w.dump_hessian(path)?;
        }
    }
    let trajectory = w.trajectory();
    let report = EstimatorReport {
        frames: input.frames.len(),
        keyframes: w.keyframes(),
        status: w.status(),
        total_iterations: w.optimizations().iter().map(|o| o.iterations).sum(),
        optimizations: w.optimizations().to_vec(),
        events: w.events().to_vec(),
        position_rmse: None,
        path_length: None,
        final_gyro_bias_error: None,
    };
    Ok(EstimatorOutput { trajectory, report })
}

/// Position RMSE after the yaw-and-translation alignment that best maps
/// the estimate onto the truth. Truth is matched by nearest timestamp.
pub fn aligned_position_rmse(estimate: &[TrajectoryPoint], truth: &[(f64, Vec3)]) -> Option<f64> {
    if estimate.is_empty() || truth.is_empty() {
        return None;
    }
    let matched: Vec<Vec3> = estimate
        .iter()
        .map(|e| {
            let i = truth.partition_point(|(t, _)| *t < e.t);
            let i = if i == truth.len() || (i > 0 && (e.t - truth[i - 1].0).abs() < (truth[i].0 - e.t).abs()) { i - 1 } else { i };
            truth[i].1
        })
        .collect();
    let est: Vec<Vec3> = estimate.iter().map(|e| e.state.p).collect();
    let (yaw, t) = crate::global::fit_yaw_translation(&est, &matched);
    let r = crate::quat::rot_z(yaw);
    let sum: f64 = est.iter().zip(&matched).map(|(e, m)| (r * e + t - m).norm_squared()).sum();
    Some((sum / est.len() as f64).sqrt())
}

/// Attaches truth-based metrics to a report.
pub fn score(output: &mut EstimatorOutput, truth: &[(f64, FrameState)]) {
    let positions: Vec<(f64, Vec3)> = truth.iter().map(|(t, s)| (*t, s.p)).collect();
    output.report.position_rmse = aligned_position_rmse(&output.trajectory, &positions);
    output.report.path_length = Some(truth.windows(2).map(|w| (w[1].1.p - w[0].1.p).norm()).sum());
    if let (Some(last), Some((_, tl))) = (output.trajectory.last(), truth.last()) {
        if output.report.status == Status::Initialized {
            output.report.final_gyro_bias_error = Some((last.state.bg - tl.bg).norm());
        }
    }
}
