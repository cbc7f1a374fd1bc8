//! Central finite-difference gates for the analytic factor Jacobians.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::factors::{FeatureObs, ImuFactor, VisionFactor, VisionMode};
use crate::preint::{preint_batch, ImuSample, NoiseParams};
use crate::quat::{so3_exp, Pose, UnitQuat, Vec3};
use crate::solver::{block_plus, BlockKind};
use crate::state::{pose_from_params, Extrinsics, FrameState};

/// Perturbation used by the central differences.
pub const FD_STEP: f64 = 1e-6;
pub const FD_ABS_TOL: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Numeric Jacobians of `f` with respect to each block's tangent space.
pub fn numeric_jacobians<F>(f: F, kinds: &[BlockKind], params: &[Vec<f64>], h: f64) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&[&[f64]]) -> Result<DVector<f64>>,
{
    let rows = {
        let refs: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
        f(&refs)?.len()
    };
    let mut out = Vec::with_capacity(params.len());
    for (b, kind) in kinds.iter().enumerate() {
        let n = kind.tangent_dim();
        let mut jac = DMatrix::zeros(rows, n);
        for k in 0..n {
            let mut delta = vec![0.0; n];
            delta[k] = h;
            let plus = block_plus(*kind, &params[b], &delta);
            delta[k] = -h;
            let minus = block_plus(*kind, &params[b], &delta);
            let eval = |x: &Vec<f64>| {
                let refs: Vec<&[f64]> =
                    params.iter().enumerate().map(|(i, p)| if i == b { x.as_slice() } else { p.as_slice() }).collect();
                f(&refs)
            };
            let col = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            jac.set_column(k, &col);
        }
        out.push(jac);
    }
    Ok(out)
}

/// Comparison of one named column range of an analytic Jacobian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub block: String,
    pub max_abs_err: f64,
    /// Largest `|analytic − numeric| / max(|numeric|, 1e-12)` over entries
    /// above the absolute tolerance.
    pub max_rel_err: f64,
    /// Largest error divided by its tolerance; the gate passes below 1.
    pub max_tol_ratio: f64,
    pub passed: bool,
}

pub fn compare(block: &str, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> GateResult {
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut passed = true;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let err = (a - n).abs();
        max_abs = max_abs.max(err);
        if err > FD_ABS_TOL {
            max_rel = max_rel.max(err / n.abs().max(1e-12));
        }
        let tol = FD_ABS_TOL.max(FD_REL_TOL * n.abs());
        max_ratio = max_ratio.max(err / tol);
        if !(err <= tol) {
            passed = false;
        }
    }
    GateResult { block: block.to_string(), max_abs_err: max_abs, max_rel_err: max_rel, max_tol_ratio: max_ratio, passed }
}

/// Named column ranges of the four Jacobian blocks of each factor.
const IMU_SECTIONS: [&[(&str, usize, usize)]; 4] = [
    &[("position", 0, 3), ("attitude", 3, 3)],
    &[("velocity", 0, 3), ("bias-acc", 3, 3), ("bias-gyro", 6, 3)],
    &[("position", 0, 3), ("attitude", 3, 3)],
    &[("velocity", 0, 3), ("bias-acc", 3, 3), ("bias-gyro", 6, 3)],
];

const VISION_SECTIONS: [&[(&str, usize, usize)]; 4] = [
    &[("position", 0, 3), ("attitude", 3, 3)],
    &[("position", 0, 3), ("attitude", 3, 3)],
    &[("position", 0, 3), ("attitude", 3, 3)],
    &[("inverse-depth", 0, 1)],
];

/// Every block name the gates can report, e.g. `imu-J0-attitude`.
pub fn block_names() -> Vec<String> {
    let mut names = Vec::new();
    for (j, secs) in IMU_SECTIONS.iter().enumerate() {
        for (s, _, _) in secs.iter() {
            names.push(format!("imu-J{j}-{s}"));
        }
    }
    for mode in ["tangent", "plane"] {
        for (j, secs) in VISION_SECTIONS.iter().enumerate() {
            for (s, _, _) in secs.iter() {
                names.push(format!("vision-{mode}-J{j}-{s}"));
            }
        }
    }
    names
}

fn gate_sections(
    prefix: &str,
    sections: &[&[(&str, usize, usize)]; 4],
    analytic: &[DMatrix<f64>],
    numeric: &[DMatrix<f64>],
    fault: Option<&str>,
) -> Vec<GateResult> {
    let mut out = Vec::new();
    for (j, secs) in sections.iter().enumerate() {
        for &(s, c0, nc) in secs.iter() {
            let name = format!("{prefix}-J{j}-{s}");
            let mut a = analytic[j].columns(c0, nc).into_owned();
            if fault == Some(name.as_str()) {
                a.neg_mut();
            }
            out.push(compare(&name, &a, &numeric[j].columns(c0, nc).into_owned()));
        }
    }
    out
}

/// A random IMU factor with a pair of states near its prediction.
#[derive(Clone, Debug)]
pub struct Draw {
    pub factor: ImuFactor,
    pub si: FrameState,
    pub sj: FrameState,
}

fn uniform3(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> UnitQuat {
    let axis = uniform3(rng, 1.0);
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis.normalize() };
    so3_exp(&(axis * rng.random_range(0.0..max_angle)))
}

pub fn random_imu_draw(rng: &mut ChaCha8Rng) -> Draw {
    let gravity = Vec3::new(0.0, 0.0, crate::GRAVITY);
    let rate = 200.0;
    let n = rng.random_range(10..100);
    let amp_w = uniform3(rng, 0.8);
    let amp_a = uniform3(rng, 2.0);
    let freq = uniform3(rng, 2.0);
    let phase = uniform3(rng, 3.0);
    let samples: Vec<ImuSample> = (0..=n)
        .map(|k| {
            let t = k as f64 / rate;
            let s = Vec3::from_fn(|i, _| (freq[i] * t + phase[i]).sin());
            ImuSample::new(t, amp_w.component_mul(&s), amp_a.component_mul(&s) + Vec3::new(0.0, 0.0, crate::GRAVITY))
        })
        .collect();
    let lin_ba = uniform3(rng, 0.05);
    let lin_bg = uniform3(rng, 0.01);
    let delta = preint_batch(&samples, lin_ba, lin_bg, &NoiseParams::default()).expect("valid synthetic samples");

    let mut si = FrameState::new(uniform3(rng, 10.0), random_rotation(rng, 3.0), uniform3(rng, 2.0));
    si.ba = lin_ba + uniform3(rng, 2e-3);
    si.bg = lin_bg + uniform3(rng, 2e-3);
    let mut sj = delta.predict(&si, &gravity);
    sj.p += uniform3(rng, 0.05);
    sj.v += uniform3(rng, 0.05);
    sj.q = crate::quat::quat_mul(&sj.q, &random_rotation(rng, 0.05));
    sj.ba = si.ba + uniform3(rng, 1e-3);
    sj.bg = si.bg + uniform3(rng, 1e-3);
    let factor = ImuFactor::new(delta, gravity).expect("non-empty interval");
    Draw { factor, si, sj }
}

/// Gates all IMU blocks on one draw; `fault` negates the named block first.
pub fn imu_gate(draw: &Draw, fault: Option<&str>) -> Vec<GateResult> {
    let kinds = [BlockKind::Pose, BlockKind::SpeedBias, BlockKind::Pose, BlockKind::SpeedBias];
    let params = vec![
        draw.si.pose_params(),
        draw.si.speed_bias_params(),
        draw.sj.pose_params(),
        draw.sj.speed_bias_params(),
    ];
    let f = |p: &[&[f64]]| -> Result<DVector<f64>> {
        let si = FrameState::from_params(p[0], p[1]);
        let sj = FrameState::from_params(p[2], p[3]);
        Ok(DVector::from_column_slice(draw.factor.residual(&si, &sj).as_slice()))
    };
    let numeric = numeric_jacobians(f, &kinds, &params, FD_STEP).expect("IMU residual is total");
    let j = draw.factor.jacobians(&draw.si, &draw.sj);
    let analytic = [
        DMatrix::from_column_slice(15, 6, j.pose_i.as_slice()),
        DMatrix::from_column_slice(15, 9, j.speed_bias_i.as_slice()),
        DMatrix::from_column_slice(15, 6, j.pose_j.as_slice()),
        DMatrix::from_column_slice(15, 9, j.speed_bias_j.as_slice()),
    ];
    gate_sections("imu", &IMU_SECTIONS, &analytic, &numeric, fault)
}

/// A random vision factor with poses, extrinsics and inverse depth.
#[derive(Clone, Debug)]
pub struct VisionDraw {
    pub factor: VisionFactor,
    pub pose_i: Pose,
    pub pose_j: Pose,
    pub ext: Extrinsics,
    pub inv_depth: f64,
}

pub fn random_vision_draw(rng: &mut ChaCha8Rng, mode: VisionMode) -> VisionDraw {
    loop {
        let ext = Extrinsics { p_c_b: uniform3(rng, 0.2), q_c_b: random_rotation(rng, 3.0) };
        let pose_i = Pose::new(random_rotation(rng, 3.0), uniform3(rng, 10.0));
        let pose_j = Pose::new(
            crate::quat::quat_mul(&pose_i.rotation, &random_rotation(rng, 0.3)),
            pose_i.translation + uniform3(rng, 0.5),
        );
        let anchor = FeatureObs { frame: 0, u: rng.random_range(-0.5..0.5), v: rng.random_range(-0.5..0.5) };
        let inv_depth = rng.random_range(0.1..1.0);
        let probe = VisionFactor::new(&anchor, &FeatureObs { frame: 1, u: 0.0, v: 0.0 }, mode, 1.0)
            .expect("distinct frames");
        let p = probe.point_in_camera(&pose_i, &pose_j, &ext, inv_depth);
        if p.z < 0.5 {
            continue;
        }
        let obs = FeatureObs { frame: 1, u: p.x / p.z + rng.random_range(-0.01..0.01), v: p.y / p.z + rng.random_range(-0.01..0.01) };
        let factor = VisionFactor::new(&anchor, &obs, mode, 1.0).expect("distinct frames");
        return VisionDraw { factor, pose_i, pose_j, ext, inv_depth };
    }
}

pub fn vision_gate(draw: &VisionDraw, fault: Option<&str>) -> Result<Vec<GateResult>> {
    let kinds = [BlockKind::Pose, BlockKind::Pose, BlockKind::Pose, BlockKind::InverseDepth];
    let pose_params = |p: &Pose| crate::state::pose_to_params(&p.translation, &p.rotation);
    let params = vec![pose_params(&draw.pose_i), pose_params(&draw.pose_j), draw.ext.params(), vec![draw.inv_depth]];
    let f = |p: &[&[f64]]| -> Result<DVector<f64>> {
        let (pi, qi) = pose_from_params(p[0]);
        let (pj, qj) = pose_from_params(p[1]);
        let r = draw.factor.residual(&Pose::new(qi, pi), &Pose::new(qj, pj), &Extrinsics::from_params(p[2]), p[3][0])?;
        Ok(DVector::from_column_slice(r.as_slice()))
    };
    let numeric = numeric_jacobians(f, &kinds, &params, FD_STEP)?;
    let (_, j) = draw.factor.evaluate_raw(&draw.pose_i, &draw.pose_j, &draw.ext, draw.inv_depth)?;
    let analytic = [
        DMatrix::from_column_slice(2, 6, j.pose_i.as_slice()),
        DMatrix::from_column_slice(2, 6, j.pose_j.as_slice()),
        DMatrix::from_column_slice(2, 6, j.extrinsic.as_slice()),
        DMatrix::from_column_slice(2, 1, j.inv_depth.as_slice()),
    ];
    let prefix = match draw.factor.mode {
        VisionMode::Tangent => "vision-tangent",
        VisionMode::Plane => "vision-plane",
    };
    Ok(gate_sections(prefix, &VISION_SECTIONS, &analytic, &numeric, fault))
}

/// Worst case of one block across all draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: String,
    pub draws: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub max_tol_ratio: f64,
    pub passed: bool,
    /// Seed of the first draw that failed the gate.
    pub failing_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub seed: u64,
    pub trials: usize,
    pub passed: bool,
    pub blocks: Vec<BlockSummary>,
}

/// Runs `trials` draws of every gate. Draw `k` uses seed `seed + k`.
pub fn run_gates(seed: u64, trials: usize, fault: Option<&str>) -> Result<JacobianReport> {
    let mut blocks: Vec<BlockSummary> = block_names()
        .into_iter()
        .map(|block| BlockSummary { block, draws: 0, max_abs_err: 0.0, max_rel_err: 0.0, max_tol_ratio: 0.0, passed: true, failing_seed: None })
        .collect();
    let mut absorb = |results: Vec<GateResult>, draw_seed: u64| {
        for r in results {
            let s = blocks.iter_mut().find(|b| b.block == r.block).expect("known block name");
            s.draws += 1;
            s.max_abs_err = s.max_abs_err.max(r.max_abs_err);
            s.max_rel_err = s.max_rel_err.max(r.max_rel_err);
            s.max_tol_ratio = s.max_tol_ratio.max(r.max_tol_ratio);
            if !r.passed && s.passed {
                s.passed = false;
                s.failing_seed = Some(draw_seed);
            }
        }
    };
    for k in 0..trials as u64 {
        let draw_seed = seed.wrapping_add(k);
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        absorb(imu_gate(&random_imu_draw(&mut rng), fault), draw_seed);
        for mode in [VisionMode::Tangent, VisionMode::Plane] {
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            absorb(vision_gate(&random_vision_draw(&mut rng, mode), fault)?, draw_seed);
        }
    }
    let passed = blocks.iter().all(|b| b.passed);
    Ok(JacobianReport { seed, trials, passed, blocks })
}
