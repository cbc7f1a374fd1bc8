//! Pose-graph fusion of local odometry with GPS positions.
//!
//! Nodes are global (ENU) poses of the odometry frames. Consecutive nodes are
//! tied by the relative transform of the local trajectory; associated GPS
//! fixes pull node positions. The result also carries the transform taking
//! the local odometry frame to ENU.

use std::sync::Arc;

use nalgebra::{DVector, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{block3, left_qmat, quat_mul, right_qmat, skew, Mat3, Pose, UnitQuat, Vec3};
use crate::solver::{optimize, BlockKind, Factor, FactorEval, Loss, Problem, SolverConfig, Termination};
use crate::state::{pose_from_params, pose_to_params};

/// WGS-84 semi-major axis, m.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// Latitude and longitude in degrees, altitude in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

fn ecef(g: &Geodetic) -> Vec3 {
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let (lat, lon) = (g.lat.to_radians(), g.lon.to_radians());
    let n = WGS84_A / (1.0 - e2 * lat.sin().powi(2)).sqrt();
    Vec3::new(
        (n + g.alt) * lat.cos() * lon.cos(),
        (n + g.alt) * lat.cos() * lon.sin(),
        (n * (1.0 - e2) + g.alt) * lat.sin(),
    )
}

fn from_ecef(x: &Vec3) -> Geodetic {
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let lon = x.y.atan2(x.x);
    let p = x.x.hypot(x.y);
    let mut lat = x.z.atan2(p * (1.0 - e2));
    let mut alt = 0.0;
    for _ in 0..20 {
        let n = WGS84_A / (1.0 - e2 * lat.sin().powi(2)).sqrt();
        alt = if lat.cos().abs() > 1e-6 { p / lat.cos() - n } else { x.z.abs() - n * (1.0 - e2) };
        let next = x.z.atan2(p * (1.0 - e2 * n / (n + alt)));
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    Geodetic { lat: lat.to_degrees(), lon: lon.to_degrees(), alt }
}

/// Rows are the east, north and up axes in ECEF at `origin`.
fn enu_basis(origin: &Geodetic) -> Mat3 {
    let (lat, lon) = (origin.lat.to_radians(), origin.lon.to_radians());
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    Mat3::new(-so, co, 0.0, -sl * co, -sl * so, cl, cl * co, cl * so, sl)
}

/// Local East-North-Up coordinates of `fix` around `origin`.
pub fn lla_to_enu(fix: &Geodetic, origin: &Geodetic) -> Vec3 {
    enu_basis(origin) * (ecef(fix) - ecef(origin))
}

pub fn enu_to_lla(enu: &Vec3, origin: &Geodetic) -> Geodetic {
    from_ecef(&(ecef(origin) + enu_basis(origin).transpose() * enu))
}

/// GPS position in the local ENU frame with per-axis standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub t: f64,
    pub position: Vec3,
    pub std: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalNode {
    pub t: f64,
    pub q: UnitQuat,
    pub p: Vec3,
}

impl GlobalNode {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }
}

/// Relative-pose constraint between two nodes taken from the local trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPoseEdge {
    pub from: usize,
    pub to: usize,
    /// Position of `to` in the frame of `from`.
    pub rel_p: Vec3,
    /// Rotation of `to` relative to `from`.
    pub rel_q: UnitQuat,
    pub position_std: f64,
    pub rotation_std: f64,
}

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;

impl LocalPoseEdge {
    pub fn between(from: usize, to: usize, a: &Pose, b: &Pose, position_std: f64, rotation_std: f64) -> Self {
        Self {
            from,
            to,
            rel_p: a.rotation.to_rotation_matrix().transpose() * (b.translation - a.translation),
            rel_q: quat_mul(&a.rotation.inverse(), &b.rotation),
            position_std,
            rotation_std,
        }
    }

    fn attitude_error(&self, qi: &UnitQuat, qj: &UnitQuat) -> (UnitQuat, f64) {
        let c = quat_mul(&quat_mul(&self.rel_q.inverse(), &qi.inverse()), qj);
        (c, if c.w() < 0.0 { -1.0 } else { 1.0 })
    }

    /// Unwhitened `[δp; δθ]`.
    pub fn raw_residual(&self, pi: &Vec3, qi: &UnitQuat, pj: &Vec3, qj: &UnitQuat) -> Vec6 {
        let dp = qi.to_rotation_matrix().transpose() * (pj - pi) - self.rel_p;
        let (c, sign) = self.attitude_error(qi, qj);
        let dth = c.vec() * (2.0 * sign);
        Vec6::new(dp.x, dp.y, dp.z, dth.x, dth.y, dth.z)
    }

    /// Unwhitened Jacobians with respect to `[δp, δθ]` of both nodes.
    pub fn raw_jacobians(&self, pi: &Vec3, qi: &UnitQuat, pj: &Vec3, qj: &UnitQuat) -> (Mat6, Mat6) {
        let rit = qi.to_rotation_matrix().transpose();
        let (c, sign) = self.attitude_error(qi, qj);
        let mut ji = Mat6::zeros();
        let mut jj = Mat6::zeros();
        ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&-rit);
        ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&(rit * (pj - pi))));
        jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&rit);
        let m = left_qmat(&self.rel_q.inverse()) * right_qmat(&quat_mul(&qi.inverse(), qj));
        ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-sign * block3(&m)));
        jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&(sign * block3(&left_qmat(&c))));
        (ji, jj)
    }

    fn weights(&self) -> Vec6 {
        let (a, b) = (1.0 / self.position_std, 1.0 / self.rotation_std);
        Vec6::new(a, a, a, b, b, b)
    }
}

impl Factor for LocalPoseEdge {
    fn residual_dim(&self) -> usize {
        6
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        vec![BlockKind::Pose, BlockKind::Pose]
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let (pi, qi) = pose_from_params(params[0]);
        let (pj, qj) = pose_from_params(params[1]);
        let w = Mat6::from_diagonal(&self.weights());
        let r = w * self.raw_residual(&pi, &qi, &pj, &qj);
        let jacs = if jacobians {
            let (ji, jj) = self.raw_jacobians(&pi, &qi, &pj, &qj);
            vec![nalgebra::DMatrix::from_column_slice(6, 6, (w * ji).as_slice()), nalgebra::DMatrix::from_column_slice(6, 6, (w * jj).as_slice())]
        } else {
            Vec::new()
        };
        Ok(FactorEval { residual: DVector::from_column_slice(r.as_slice()), jacobians: jacs })
    }

    fn name(&self) -> &'static str {
        "vio-edge"
    }
}

/// Whitened GPS position residual of one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpsFactor {
    pub fix: GpsFix,
}

impl GpsFactor {
    pub fn residual(&self, p: &Vec3) -> Vec3 {
        (p - self.fix.position).component_div(&self.fix.std)
    }

    pub fn jacobian(&self) -> SMatrix<f64, 3, 6> {
        let mut j = SMatrix::<f64, 3, 6>::zeros();
        for k in 0..3 {
            j[(k, k)] = 1.0 / self.fix.std[k];
        }
        j
    }
}

impl Factor for GpsFactor {
    fn residual_dim(&self) -> usize {
        3
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        vec![BlockKind::Pose]
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let (p, _) = pose_from_params(params[0]);
        let r = self.residual(&p);
        let jacs = if jacobians { vec![nalgebra::DMatrix::from_column_slice(3, 6, self.jacobian().as_slice())] } else { Vec::new() };
        Ok(FactorEval { residual: DVector::from_column_slice(r.as_slice()), jacobians: jacs })
    }

    fn name(&self) -> &'static str {
        "gps"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TransformStrategy {
    /// Rigid fit over every node's position and attitude.
    #[default]
    AllNodes,
    /// Transform implied by the last node alone.
    LastNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub strategy: TransformStrategy,
    /// Standard deviation of odometry edge positions, m.
    pub position_std: f64,
    /// Standard deviation of odometry edge rotations, rad.
    pub rotation_std: f64,
    /// Huber threshold on whitened GPS residuals; `null` disables it.
    pub gps_huber: Option<f64>,
    /// Largest node-to-fix time difference accepted, s.
    pub association_window: f64,
    pub solver: SolverConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            strategy: TransformStrategy::AllNodes,
            position_std: 0.1,
            rotation_std: 0.01,
            gps_huber: Some(1.0),
            association_window: 0.01,
            solver: SolverConfig { max_iterations: 50, ..Default::default() },
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position_std", self.position_std),
            ("rotation_std", self.rotation_std),
            ("association_window", self.association_window),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(h) = self.gps_huber {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config(format!("gps_huber must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// Pairs each fix with the node nearest in time, if within `window`.
/// Returns `(node index, fix)` pairs and the number of fixes dropped.
pub fn associate(times: &[f64], fixes: &[GpsFix], window: f64) -> (Vec<(usize, GpsFix)>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for fix in fixes {
        let i = times.partition_point(|&t| t < fix.t);
        let best = [i.checked_sub(1), (i < times.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (times[a] - fix.t).abs().total_cmp(&(times[b] - fix.t).abs()));
        match best {
            Some(k) if (times[k] - fix.t).abs() <= window => out.push((k, *fix)),
            _ => dropped += 1,
        }
    }
    (out, dropped)
}

/// Rotation and translation minimizing position misfit plus attitude
/// misfit (chordal) between paired poses: `dst ≈ T · src`.
pub fn fit_rigid(src: &[Pose], dst: &[Pose]) -> Pose {
    let n = src.len().min(dst.len());
    if n == 0 {
        return Pose::identity();
    }
    let cs = src[..n].iter().map(|p| p.translation).sum::<Vec3>() / n as f64;
    let cd = dst[..n].iter().map(|p| p.translation).sum::<Vec3>() / n as f64;
    let mut m = Matrix3::zeros();
    for (a, b) in src[..n].iter().zip(&dst[..n]) {
        m += (b.translation - cd) * (a.translation - cs).transpose();
        m += b.rotation.to_rotation_matrix() * a.rotation.to_rotation_matrix().transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * vt).determinant().signum();
    let r = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    Pose::new(UnitQuat::from_rotation_matrix(&r), cd - r * cs)
}

/// Yaw and translation minimizing `Σ‖R_z(yaw)·src + t − dst‖²`.
pub fn fit_yaw_translation(src: &[Vec3], dst: &[Vec3]) -> (f64, Vec3) {
    let n = src.len().min(dst.len());
    if n == 0 {
        return (0.0, Vec3::zeros());
    }
    let cs = src[..n].iter().sum::<Vec3>() / n as f64;
    let cd = dst[..n].iter().sum::<Vec3>() / n as f64;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in src[..n].iter().zip(&dst[..n]) {
        let a = a - cs;
        let b = b - cd;
        sxx += a.x * b.x + a.y * b.y;
        sxy += a.x * b.y - a.y * b.x;
    }
    let yaw = sxy.atan2(sxx);
    (yaw, cd - crate::quat::rot_z(yaw) * cs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalResult {
    pub nodes: Vec<GlobalNode>,
    /// Pose of the local odometry frame in ENU.
    pub transform: Pose,
    pub strategy: TransformStrategy,
    pub associated: usize,
    pub dropped: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Fuses a local trajectory `(t, pose)` with GPS fixes.
pub fn optimize_graph(local: &[(f64, Pose)], fixes: &[GpsFix], cfg: &GlobalConfig) -> Result<GlobalResult> {
    cfg.validate()?;
    if local.len() < 2 {
        return Err(Error::InvalidArgument(format!("pose graph needs at least 2 nodes, got {}", local.len())));
    }
    if local.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::InvalidArgument("node timestamps must increase".into()));
    }
    for f in fixes {
        if !f.std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!("GPS fix at t = {} has non-positive std", f.t)));
        }
    }
    let times: Vec<f64> = local.iter().map(|(t, _)| *t).collect();
    let (pairs, dropped) = associate(&times, fixes, cfg.association_window);
    if pairs.is_empty() {
        return Err(Error::GaugeDeficient(format!(
            "none of {} GPS fixes lies within {} s of a node",
            fixes.len(),
            cfg.association_window
        )));
    }

    // initial guess: yaw and translation from the associated positions
    let src: Vec<Vec3> = pairs.iter().map(|(k, _)| local[*k].1.translation).collect();
    let dst: Vec<Vec3> = pairs.iter().map(|(_, f)| f.position).collect();
    let (yaw, t) = fit_yaw_translation(&src, &dst);
    let guess = Pose::new(UnitQuat::from_rotation_matrix(&crate::quat::rot_z(yaw)), t);

    let mut problem = Problem::new();
    let ids: Vec<_> = local
        .iter()
        .map(|(_, pose)| {
            let g = guess.compose(pose);
            problem.add_block(BlockKind::Pose, pose_to_params(&g.translation, &g.rotation))
        })
        .collect();
    for k in 1..local.len() {
        let edge = LocalPoseEdge::between(k - 1, k, &local[k - 1].1, &local[k].1, cfg.position_std, cfg.rotation_std);
        problem.add_factor(Arc::new(edge), vec![ids[k - 1], ids[k]], Loss::Trivial)?;
    }
    let loss = cfg.gps_huber.map_or(Loss::Trivial, Loss::Huber);
    for (k, fix) in &pairs {
        problem.add_factor(Arc::new(GpsFactor { fix: *fix }), vec![ids[*k]], loss)?;
    }
    let report = optimize(&mut problem, &cfg.solver)?;

    let nodes: Vec<GlobalNode> = local
        .iter()
        .zip(&ids)
        .map(|((t, _), id)| {
            let (p, q) = pose_from_params(problem.value(*id));
            GlobalNode { t: *t, q, p }
        })
        .collect();
    let transform = match cfg.strategy {
        TransformStrategy::LastNode => {
            let last = nodes.last().expect("at least two nodes").pose();
            last.compose(&local[local.len() - 1].1.inverse())
        }
        TransformStrategy::AllNodes => {
            let src: Vec<Pose> = local.iter().map(|(_, p)| *p).collect();
            let dst: Vec<Pose> = nodes.iter().map(GlobalNode::pose).collect();
            fit_rigid(&src, &dst)
        }
    };
    Ok(GlobalResult {
        nodes,
        transform,
        strategy: cfg.strategy,
        associated: pairs.len(),
        dropped,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        iterations: report.iterations,
        termination: report.termination,
    })
}
