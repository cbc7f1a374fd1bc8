//! Manifold least squares over parameter blocks: normal equations,
//! Levenberg-Marquardt, Schur elimination of inverse depths, and
//! marginalization into a linear prior.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{boxminus, boxplus, UnitQuat, Vec3};

pub type BlockId = usize;

/// Smallest allowed inverse depth after an update, 1/m.
pub const INVERSE_DEPTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    /// `[px, py, pz, qw, qx, qy, qz]`, tangent `(δp, δθ)`.
    Pose,
    /// `[v, ba, bg]`.
    SpeedBias,
    InverseDepth,
    /// Same layout and update rule as [`BlockKind::Pose`].
    GlobalPose,
}

impl BlockKind {
    pub fn ambient_dim(self) -> usize {
        match self {
            BlockKind::Pose | BlockKind::GlobalPose => 7,
            BlockKind::SpeedBias => 9,
            BlockKind::InverseDepth => 1,
        }
    }

    pub fn tangent_dim(self) -> usize {
        match self {
            BlockKind::Pose | BlockKind::GlobalPose => 6,
            BlockKind::SpeedBias => 9,
            BlockKind::InverseDepth => 1,
        }
    }

    fn is_pose(self) -> bool {
        matches!(self, BlockKind::Pose | BlockKind::GlobalPose)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub kind: BlockKind,
    pub value: Vec<f64>,
    pub fixed: bool,
}

/// `x ⊞ δ` for one block.
pub fn block_plus(kind: BlockKind, x: &[f64], delta: &[f64]) -> Vec<f64> {
    if kind.is_pose() {
        let q = UnitQuat::new_normalize(x[3], x[4], x[5], x[6]);
        let q = boxplus(&q, &Vec3::new(delta[3], delta[4], delta[5])).to_array();
        vec![x[0] + delta[0], x[1] + delta[1], x[2] + delta[2], q[0], q[1], q[2], q[3]]
    } else {
        x.iter().zip(delta).map(|(a, d)| a + d).collect()
    }
}

/// `x ⊟ x0`: the tangent vector taking `x0` to `x`.
pub fn block_minus(kind: BlockKind, x: &[f64], x0: &[f64]) -> Vec<f64> {
    if kind.is_pose() {
        let q = UnitQuat::new_normalize(x[3], x[4], x[5], x[6]);
        let q0 = UnitQuat::new_normalize(x0[3], x0[4], x0[5], x0[6]);
        let d = boxminus(&q0, &q);
        vec![x[0] - x0[0], x[1] - x0[1], x[2] - x0[2], d.x, d.y, d.z]
    } else {
        x.iter().zip(x0).map(|(a, b)| a - b).collect()
    }
}

/// Whitened residual and per-block Jacobians (rows × tangent dim).
#[derive(Clone, Debug)]
pub struct FactorEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

pub trait Factor: Send + Sync {
    fn residual_dim(&self) -> usize;

    /// Kinds of the blocks this factor expects, in order.
    fn block_kinds(&self) -> Vec<BlockKind>;

    /// Evaluates at the given ambient block values. Jacobians are returned
    /// only when `jacobians` is true and are taken with respect to the
    /// tangent update of each block.
    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval>;

    fn name(&self) -> &'static str {
        "factor"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    Trivial,
    /// Huber loss with the given threshold on the whitened residual norm.
    Huber(f64),
}

impl Loss {
    /// `ρ(s)` for squared norm `s`.
    pub fn rho(&self, s: f64) -> f64 {
        match *self {
            Loss::Trivial => s,
            Loss::Huber(d) => {
                if s <= d * d {
                    s
                } else {
                    2.0 * d * s.sqrt() - d * d
                }
            }
        }
    }

    /// Scale applied to residual and Jacobian rows (`√ρ'(s)`).
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            Loss::Trivial => 1.0,
            Loss::Huber(d) => {
                if s <= d * d {
                    1.0
                } else {
                    (d / s.sqrt()).sqrt()
                }
            }
        }
    }
}

struct FactorEntry {
    factor: Arc<dyn Factor>,
    blocks: Vec<BlockId>,
    loss: Loss,
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParamBlock>,
    factors: Vec<FactorEntry>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, kind: BlockKind, value: Vec<f64>) -> BlockId {
        assert_eq!(value.len(), kind.ambient_dim(), "block value has wrong length for {kind:?}");
        self.blocks.push(ParamBlock { kind, value, fixed: false });
        self.blocks.len() - 1
    }

    pub fn set_fixed(&mut self, id: BlockId, fixed: bool) {
        self.blocks[id].fixed = fixed;
    }

    pub fn add_factor(&mut self, factor: Arc<dyn Factor>, blocks: Vec<BlockId>, loss: Loss) -> Result<()> {
        let kinds = factor.block_kinds();
        if kinds.len() != blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} blocks, got {}",
                factor.name(),
                kinds.len(),
                blocks.len()
            )));
        }
        for (k, &id) in kinds.iter().zip(&blocks) {
            let b = self.blocks.get(id).ok_or_else(|| Error::InvalidArgument(format!("unknown block {id}")))?;
            let compatible = *k == b.kind || (k.is_pose() && b.kind.is_pose());
            if !compatible {
                return Err(Error::InvalidArgument(format!(
                    "{} expects a {k:?} block, block {id} is {:?}",
                    factor.name(),
                    b.kind
                )));
            }
        }
        self.factors.push(FactorEntry { factor, blocks, loss });
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn value(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].value
    }

    pub fn set_value(&mut self, id: BlockId, value: Vec<f64>) {
        assert_eq!(value.len(), self.blocks[id].kind.ambient_dim());
        self.blocks[id].value = value;
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    /// Number of factors whose [`Factor::name`] equals `name`.
    pub fn count_factors(&self, name: &str) -> usize {
        self.factors.iter().filter(|f| f.factor.name() == name).count()
    }

    fn params_of(&self, entry: &FactorEntry) -> Vec<&[f64]> {
        entry.blocks.iter().map(|&id| self.blocks[id].value.as_slice()).collect()
    }

    fn evaluate_entry(&self, index: usize, jacobians: bool) -> Result<(f64, FactorEval)> {
        let entry = &self.factors[index];
        let mut eval = entry.factor.evaluate(&self.params_of(entry), jacobians)?;
        if eval.residual.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure(format!(
                "non-finite residual in factor #{index} ({})",
                entry.factor.name()
            )));
        }
        let s = eval.residual.norm_squared();
        let rho = entry.loss.rho(s);
        let w = entry.loss.weight(s);
        if w != 1.0 {
            eval.residual *= w;
            for j in &mut eval.jacobians {
                *j *= w;
            }
        }
        Ok((rho, eval))
    }

    fn evaluate_all(&self, jacobians: bool) -> Result<Vec<(f64, FactorEval)>> {
        let n = self.factors.len();
        #[cfg(not(target_arch = "wasm32"))]
        {
            let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8);
            if threads > 1 && n >= 512 {
                let chunk = n.div_ceil(threads);
                let results: Vec<Result<Vec<(f64, FactorEval)>>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = (0..n)
                        .step_by(chunk)
                        .map(|start| {
                            scope.spawn(move || {
                                (start..(start + chunk).min(n))
                                    .map(|i| self.evaluate_entry(i, jacobians))
                                    .collect::<Result<Vec<_>>>()
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("factor evaluation panicked")).collect()
                });
                let mut out = Vec::with_capacity(n);
                for r in results {
                    out.extend(r?);
                }
                return Ok(out);
            }
        }
        (0..n).map(|i| self.evaluate_entry(i, jacobians)).collect()
    }

    /// `½ Σ ρ(‖rᵢ‖²)`.
    pub fn cost(&self) -> Result<f64> {
        Ok(0.5 * self.evaluate_all(false)?.iter().map(|(rho, _)| rho).sum::<f64>())
    }

    /// Tangent-space layout of the free blocks: non-landmark blocks first, in
    /// id order, then inverse depths.
    fn layout(&self) -> (Vec<Option<usize>>, usize, usize) {
        let mut offsets = vec![None; self.blocks.len()];
        let mut n = 0;
        for (id, b) in self.blocks.iter().enumerate() {
            if !b.fixed && b.kind != BlockKind::InverseDepth {
                offsets[id] = Some(n);
                n += b.kind.tangent_dim();
            }
        }
        let n_main = n;
        for (id, b) in self.blocks.iter().enumerate() {
            if !b.fixed && b.kind == BlockKind::InverseDepth {
                offsets[id] = Some(n);
                n += 1;
            }
        }
        (offsets, n_main, n)
    }

    /// Accumulates `H = Σ JᵀJ` and `b = −Σ Jᵀr` over free blocks.
    pub fn build_normal_equations(&self) -> Result<HessianSystem> {
        let (offsets, n_main, n) = self.layout();
        let evals = self.evaluate_all(true)?;
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let mut cost = 0.0;
        for (entry, (rho, eval)) in self.factors.iter().zip(&evals) {
            cost += 0.5 * rho;
            for (a, &ida) in entry.blocks.iter().enumerate() {
                let Some(oa) = offsets[ida] else { continue };
                let ja = &eval.jacobians[a];
                let da = ja.ncols();
                let mut bv = b.rows_mut(oa, da);
                bv -= ja.transpose() * &eval.residual;
                for (c, &idc) in entry.blocks.iter().enumerate() {
                    let Some(oc) = offsets[idc] else { continue };
                    if oc < oa {
                        continue;
                    }
                    let jc = &eval.jacobians[c];
                    let block = ja.transpose() * jc;
                    let mut view = h.view_mut((oa, oc), (da, jc.ncols()));
                    view += &block;
                    if oc != oa {
                        let mut view_t = h.view_mut((oc, oa), (jc.ncols(), da));
                        view_t += block.transpose();
                    }
                }
            }
        }
        let block_dims = self.blocks.iter().map(|b| b.kind.tangent_dim()).collect();
        Ok(HessianSystem { h, b, offsets, block_dims, n_main, cost })
    }

    /// Applies a tangent step to the free blocks. Returns the ids of inverse
    /// depths that had to be clamped at [`INVERSE_DEPTH_FLOOR`].
    pub fn apply_step(&mut self, sys: &HessianSystem, dx: &DVector<f64>) -> Vec<BlockId> {
        let mut floored = Vec::new();
        for (id, b) in self.blocks.iter_mut().enumerate() {
            let Some(o) = sys.offsets[id] else { continue };
            let d = b.kind.tangent_dim();
            let mut v = block_plus(b.kind, &b.value, dx.rows(o, d).as_slice());
            if b.kind == BlockKind::InverseDepth && v[0] < INVERSE_DEPTH_FLOOR {
                v[0] = INVERSE_DEPTH_FLOOR;
                floored.push(id);
            }
            b.value = v;
        }
        floored
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(|b| b.value.clone()).collect()
    }

    fn restore(&mut self, values: Vec<Vec<f64>>) {
        for (b, v) in self.blocks.iter_mut().zip(values) {
            b.value = v;
        }
    }
}

/// Normal equations `H δx = b` in the tangent space of the free blocks.
#[derive(Clone, Debug)]
pub struct HessianSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Tangent offset of each block, `None` for fixed blocks.
    pub offsets: Vec<Option<usize>>,
    pub block_dims: Vec<usize>,
    /// Size of the leading non-landmark part.
    pub n_main: usize,
    /// Cost at the linearization point.
    pub cost: f64,
}

impl HessianSystem {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Solves `(H + λ·D) δx = b` with `D = diag(H)` clamped to `[1e-6, 1e32]`,
    /// eliminating the (diagonal) inverse-depth part first.
    pub fn solve_step(&self, lambda: f64) -> Result<DVector<f64>> {
        let n = self.dim();
        let mut h = self.h.clone();
        if lambda > 0.0 {
            for i in 0..n {
                h[(i, i)] += lambda * h[(i, i)].clamp(1e-6, 1e32);
            }
        }
        let m = self.n_main;
        if m == n {
            return cholesky_solve(h, &self.b);
        }
        let l = n - m;
        let mut hll_inv = DVector::zeros(l);
        for k in 0..l {
            let d = h[(m + k, m + k)];
            if !(d > 0.0) {
                return Err(Error::SolverFailure(format!("landmark block {k} has non-positive information {d}")));
            }
            hll_inv[k] = 1.0 / d;
        }
        let hpp = h.view((0, 0), (m, m));
        let hpl = h.view((0, m), (m, l));
        let bp = self.b.rows(0, m);
        let bl = self.b.rows(m, l);
        let mut hpl_scaled = hpl.clone_owned();
        for k in 0..l {
            hpl_scaled.column_mut(k).scale_mut(hll_inv[k]);
        }
        let s = hpp - &hpl_scaled * hpl.transpose();
        let rhs = bp - &hpl_scaled * bl;
        let dp = if m > 0 { cholesky_solve(s, &rhs)? } else { DVector::zeros(0) };
        let dl = (bl - hpl.transpose() * &dp).component_mul(&hll_inv);
        let mut dx = DVector::zeros(n);
        dx.rows_mut(0, m).copy_from(&dp);
        dx.rows_mut(m, l).copy_from(&dl);
        Ok(dx)
    }

    /// Number of eigenvalues of `H` below `rel · λ_max`.
    pub fn near_singular_dimensions(&self, rel: f64) -> usize {
        let eig = self.h.clone().symmetric_eigen().eigenvalues;
        let max = eig.amax();
        eig.iter().filter(|&&e| e < rel * max).count()
    }

    /// Writes `H` and `b` as coordinate-format text.
    pub fn write_matrix_market(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "% H (n x n), followed by b as a dense column")?;
        let n = self.dim();
        let nnz = self.h.iter().filter(|v| **v != 0.0).count();
        writeln!(out, "{n} {n} {nnz}")?;
        for c in 0..n {
            for r in 0..n {
                let v = self.h[(r, c)];
                if v != 0.0 {
                    writeln!(out, "{} {} {:.16e}", r + 1, c + 1, v)?;
                }
            }
        }
        writeln!(out, "%%MatrixMarket matrix array real general")?;
        writeln!(out, "{n} 1")?;
        for v in self.b.iter() {
            writeln!(out, "{v:.16e}")?;
        }
        Ok(())
    }
}

/// Envelope (profile) Cholesky: column `i` of the upper triangle is only
/// touched from its first non-zero row down, so banded systems such as pose
/// chains cost `O(n·b²)` instead of `O(n³)`.
fn cholesky_solve(mut h: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let a = h.as_mut_slice();
    let first: Vec<usize> = (0..n).map(|i| (0..i).find(|&k| a[i * n + k] != 0.0).unwrap_or(i)).collect();
    for i in 0..n {
        let fi = first[i];
        for j in fi..=i {
            let k0 = fi.max(first[j]);
            let mut s = a[i * n + j];
            for k in k0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if j < i {
                a[i * n + j] = s / a[j * n + j];
            } else if s > 0.0 && s.is_finite() {
                a[i * n + i] = s.sqrt();
            } else {
                return Err(Error::SolverFailure(format!("system of size {n} is not positive definite (pivot {i})")));
            }
        }
    }
    // column i holds row i of L
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in first[i]..i {
            s -= a[i * n + k] * y[k];
        }
        y[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        y[i] /= a[i * n + i];
        let xi = y[i];
        for k in first[i]..i {
            y[k] -= a[i * n + k] * xi;
        }
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LevenbergMarquardt,
    GaussNewton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub initial_lambda: f64,
    pub max_lambda: f64,
    pub min_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::LevenbergMarquardt,
            max_iterations: 15,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            initial_lambda: 1e-4,
            max_lambda: 1e8,
            min_lambda: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    StepTolerance,
    CostTolerance,
    MaxIterations,
    NoProgress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// `‖b‖∞` at the final linearization.
    pub gradient_norm: f64,
    pub termination: Termination,
    /// Inverse-depth blocks clamped at the floor during accepted steps.
    #[serde(skip)]
    pub floored_blocks: Vec<BlockId>,
}

/// Iterates build → solve → apply until one of the stopping rules fires.
pub fn optimize(problem: &mut Problem, config: &SolverConfig) -> Result<SolveReport> {
    let gn = config.method == Method::GaussNewton;
    let mut lambda = if gn { 0.0 } else { config.initial_lambda };
    let mut sys = problem.build_normal_equations()?;
    let initial_cost = sys.cost;
    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut accepted = 0;
    let mut floored = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let dx = loop {
            match sys.solve_step(lambda) {
                Ok(dx) => break dx,
                Err(e) => {
                    if gn {
                        return Err(Error::SolverFailure(format!("iteration {iterations}: {e}")));
                    }
                    lambda = (lambda * 10.0).max(config.min_lambda);
                    if lambda > config.max_lambda {
                        return Err(Error::SolverFailure(format!(
                            "iteration {iterations}: system indefinite up to damping {}: {e}",
                            config.max_lambda
                        )));
                    }
                }
            }
        };
        let step_norm = dx.norm();
        if step_norm < config.step_tolerance {
            termination = Termination::StepTolerance;
            break;
        }
        let saved = problem.snapshot();
        let hit = problem.apply_step(&sys, &dx);
        let new_cost = match problem.cost() {
            Ok(c) => c,
            Err(Error::SolverFailure(_) | Error::BehindCamera { .. }) if !gn => f64::INFINITY,
            Err(e) => return Err(e),
        };
        if gn || new_cost <= cost {
            accepted += 1;
            floored.extend(hit);
            let decrease = cost - new_cost;
            let previous = cost;
            cost = new_cost;
            history.push(cost);
            lambda = (lambda / 10.0).max(if gn { 0.0 } else { config.min_lambda });
            sys = problem.build_normal_equations()?;
            if previous > 0.0 && decrease.abs() <= config.cost_tolerance * previous {
                termination = Termination::CostTolerance;
                break;
            }
            if cost == 0.0 {
                termination = Termination::CostTolerance;
                break;
            }
        } else {
            problem.restore(saved);
            lambda *= 10.0;
            if lambda > config.max_lambda {
                termination = Termination::NoProgress;
                break;
            }
        }
    }
    Ok(SolveReport {
        initial_cost,
        final_cost: cost,
        iterations,
        accepted_steps: accepted,
        cost_history: history,
        gradient_norm: sys.b.amax(),
        termination,
        floored_blocks: floored,
    })
}

/// Linear prior over retained blocks: `r = r_p + J_p (x ⊟ x_lin)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorTerm {
    pub kinds: Vec<BlockKind>,
    pub linearization: Vec<Vec<f64>>,
    pub jacobian: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl PriorTerm {
    pub fn tangent_dim(&self) -> usize {
        self.kinds.iter().map(|k| k.tangent_dim()).sum()
    }

    /// Residual and Jacobian at the given block values.
    pub fn evaluate(&self, values: &[&[f64]]) -> (DVector<f64>, DMatrix<f64>) {
        let mut dx = DVector::zeros(self.tangent_dim());
        let mut o = 0;
        for ((k, lin), v) in self.kinds.iter().zip(&self.linearization).zip(values) {
            let d = block_minus(*k, v, lin);
            dx.rows_mut(o, d.len()).copy_from_slice(&d);
            o += d.len();
        }
        (&self.residual + &self.jacobian * dx, self.jacobian.clone())
    }

    /// `J_pᵀJ_p` and `−J_pᵀr_p`.
    pub fn information(&self) -> (DMatrix<f64>, DVector<f64>) {
        (self.jacobian.transpose() * &self.jacobian, -(self.jacobian.transpose() * &self.residual))
    }
}

impl Factor for PriorTerm {
    fn residual_dim(&self) -> usize {
        self.residual.len()
    }

    fn block_kinds(&self) -> Vec<BlockKind> {
        self.kinds.clone()
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
        let (r, j) = PriorTerm::evaluate(self, params);
        let mut blocks = Vec::new();
        if jacobians {
            let mut o = 0;
            for k in &self.kinds {
                let d = k.tangent_dim();
                blocks.push(j.columns(o, d).into_owned());
                o += d;
            }
        }
        Ok(FactorEval { residual: r, jacobians: blocks })
    }

    fn name(&self) -> &'static str {
        "prior"
    }
}

/// Schur complement of the marginalized blocks, converted to a square-root prior
/// over the remaining free blocks of `sys` (returned in block id order).
pub fn marginalize(problem: &Problem, sys: &HessianSystem, marg: &[BlockId]) -> Result<(PriorTerm, Vec<BlockId>)> {
    let mut m_idx = Vec::new();
    let mut r_idx = Vec::new();
    let mut retained = Vec::new();
    for (id, o) in sys.offsets.iter().enumerate() {
        let Some(o) = *o else { continue };
        let d = sys.block_dims[id];
        if marg.contains(&id) {
            m_idx.extend(o..o + d);
        } else {
            r_idx.extend(o..o + d);
            retained.push(id);
        }
    }
    if r_idx.is_empty() {
        return Err(Error::InvalidArgument("marginalization leaves no retained blocks".into()));
    }
    let (hp, bp) = schur_reduce(&sys.h, &sys.b, &m_idx, &r_idx);
    let (jacobian, residual) = sqrt_prior(&hp, &bp);
    let prior = PriorTerm {
        kinds: retained.iter().map(|&id| problem.block(id).kind).collect(),
        linearization: retained.iter().map(|&id| problem.value(id).to_vec()).collect(),
        jacobian,
        residual,
    };
    Ok((prior, retained))
}

/// `H_p = H_rr − H_rm H_mm⁻¹ H_mr`, `b_p = b_r − H_rm H_mm⁻¹ b_m`, with the
/// eigenvalues of `H_mm` floored at `1e-10·‖H_mm‖`.
pub fn schur_reduce(h: &DMatrix<f64>, b: &DVector<f64>, m: &[usize], r: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    let hrr = pick(r, r);
    let br = DVector::from_fn(r.len(), |i, _| b[r[i]]);
    if m.is_empty() {
        return (hrr, br);
    }
    let hmm = pick(m, m);
    let hrm = pick(r, m);
    let bm = DVector::from_fn(m.len(), |i, _| b[m[i]]);

    let hmm = 0.5 * (&hmm + hmm.transpose());
    let eig = hmm.symmetric_eigen();
    let floor = 1e-10 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(floor));
    let hmm_inv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let k = &hrm * &hmm_inv;
    let hp = hrr - &k * hrm.transpose();
    let bp = br - &k * bm;
    (0.5 * (&hp + hp.transpose()), bp)
}

/// `(J_p, r_p)` with `J_pᵀJ_p = H_p` and `−J_pᵀr_p = b_p`, dropping
/// eigen-directions below `1e-10·λ_max`.
pub fn sqrt_prior(hp: &DMatrix<f64>, bp: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = hp.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-10 * max).collect();
    let n = hp.ncols();
    let mut j = DMatrix::zeros(keep.len(), n);
    let mut r = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        j.row_mut(row).copy_from(&(v.transpose() * s));
        r[row] = -v.dot(bp) / s;
    }
    (j, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `r = A·x − c` over a set of vector blocks.
    struct Linear {
        kinds: Vec<BlockKind>,
        a: Vec<DMatrix<f64>>,
        c: DVector<f64>,
    }

    impl Factor for Linear {
        fn residual_dim(&self) -> usize {
            self.c.len()
        }
        fn block_kinds(&self) -> Vec<BlockKind> {
            self.kinds.clone()
        }
        fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
            let mut r = -self.c.clone();
            for (a, p) in self.a.iter().zip(params) {
                r += a * DVector::from_column_slice(p);
            }
            Ok(FactorEval { residual: r, jacobians: if jacobians { self.a.clone() } else { vec![] } })
        }
    }

    fn random_linear_problem(rng: &mut ChaCha8Rng, nblocks: usize, nfactors: usize) -> Problem {
        let mut p = Problem::new();
        for _ in 0..nblocks {
            p.add_block(BlockKind::SpeedBias, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        for _ in 0..nfactors {
            let i = rng.random_range(0..nblocks);
            let j = (i + 1 + rng.random_range(0..nblocks - 1)) % nblocks;
            let rows = 12;
            let a = vec![
                DMatrix::from_fn(rows, 9, |_, _| rng.random_range(-1.0..1.0)),
                DMatrix::from_fn(rows, 9, |_, _| rng.random_range(-1.0..1.0)),
            ];
            let c = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
            p.add_factor(Arc::new(Linear { kinds: vec![BlockKind::SpeedBias; 2], a, c }), vec![i, j], Loss::Trivial)
                .unwrap();
        }
        p
    }

    #[test]
    fn scalar_normal_equations() {
        let mut p = Problem::new();
        let x = p.add_block(BlockKind::InverseDepth, vec![0.0]);
        let f = Linear { kinds: vec![BlockKind::InverseDepth], a: vec![DMatrix::from_element(1, 1, 1.0)], c: DVector::from_element(1, 5.0) };
        p.add_factor(Arc::new(f), vec![x], Loss::Trivial).unwrap();
        let sys = p.build_normal_equations().unwrap();
        assert_eq!(sys.h[(0, 0)], 1.0);
        assert_eq!(sys.b[0], 5.0);
    }

    #[test]
    fn normal_equations_match_dense_stacking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_linear_problem(&mut rng, 5, 20);
        let sys = p.build_normal_equations().unwrap();
        assert!((&sys.h - sys.h.transpose()).amax() <= 1e-12 * sys.h.amax());

        let n = 45;
        let mut j = DMatrix::zeros(20 * 12, n);
        let mut r = DVector::zeros(20 * 12);
        for (k, entry) in p.factors.iter().enumerate() {
            let eval = entry.factor.evaluate(&p.params_of(entry), true).unwrap();
            r.rows_mut(12 * k, 12).copy_from(&eval.residual);
            for (jb, &id) in eval.jacobians.iter().zip(&entry.blocks) {
                let mut v = j.view_mut((12 * k, 9 * id), (12, 9));
                v += jb;
            }
        }
        assert_relative_eq!(sys.h, j.transpose() * &j, epsilon = 1e-10);
        assert_relative_eq!(sys.b, -(j.transpose() * r), epsilon = 1e-10);
    }

    #[test]
    fn identity_step() {
        let sys = HessianSystem {
            h: DMatrix::identity(3, 3),
            b: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            offsets: vec![Some(0)],
            block_dims: vec![3],
            n_main: 3,
            cost: 0.0,
        };
        assert_eq!(sys.solve_step(0.0).unwrap(), DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let mut last = f64::INFINITY;
        for lambda in [1e-2, 1.0, 1e2, 1e4, 1e8] {
            let n = sys.solve_step(lambda).unwrap().norm();
            assert!(n < last);
            last = n;
        }
        assert!(last < 1e-7);
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-1.0..1.0));
        a.transpose() * a + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn envelope_cholesky_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1, 2, 7, 40] {
            let dense = random_spd(&mut rng, n);
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let expected = dense.clone().cholesky().unwrap().solve(&b);
            assert_relative_eq!(cholesky_solve(dense, &b).unwrap(), expected, epsilon = 1e-9);

            // banded with a ragged profile
            let mut banded = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                banded[(i, i)] = 4.0 + rng.random_range(0.0..1.0);
                let w = rng.random_range(0..4).min(i);
                for k in i - w..i {
                    let v = rng.random_range(-0.5..0.5);
                    banded[(i, k)] = v;
                    banded[(k, i)] = v;
                }
            }
            let expected = banded.clone().cholesky().unwrap().solve(&b);
            assert_relative_eq!(cholesky_solve(banded, &b).unwrap(), expected, epsilon = 1e-9);
        }
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_solve(indefinite, &DVector::zeros(2)), Err(Error::SolverFailure(_))));
    }

    #[test]
    fn schur_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (m, l) = (12, 20);
            let mut h = random_spd(&mut rng, m + l);
            // landmark part must be diagonal
            for i in 0..l {
                for j in 0..l {
                    if i != j {
                        h[(m + i, m + j)] = 0.0;
                    }
                }
                h[(m + i, m + i)] += 20.0;
            }
            let b = DVector::from_fn(m + l, |_, _| rng.random_range(-1.0..1.0));
            let sys = HessianSystem { h: h.clone(), b: b.clone(), offsets: vec![], block_dims: vec![], n_main: m, cost: 0.0 };
            let schur = sys.solve_step(0.0).unwrap();
            let dense = h.cholesky().unwrap().solve(&b);
            assert_relative_eq!(schur, dense, epsilon = 1e-9);
            // deterministic
            assert_eq!(sys.solve_step(0.0).unwrap(), schur);
        }
    }

    #[test]
    fn pose_update_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = UnitQuat::new_normalize(0.3, -0.5, 0.2, 0.7).to_array();
        let x = vec![1.0, 2.0, 3.0, q[0], q[1], q[2], q[3]];
        assert_eq!(block_plus(BlockKind::Pose, &x, &[0.0; 6]), x);
        let d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.1..0.1)).collect();
        let back = block_plus(BlockKind::Pose, &block_plus(BlockKind::Pose, &x, &d), &d.iter().map(|v| -v).collect::<Vec<_>>());
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
        let mut y = x.clone();
        for _ in 0..10_000 {
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..0.3)).collect();
            y = block_plus(BlockKind::Pose, &y, &d);
        }
        let n = (y[3] * y[3] + y[4] * y[4] + y[5] * y[5] + y[6] * y[6]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let d = block_minus(BlockKind::Pose, &block_plus(BlockKind::Pose, &x, &[0.1, 0.2, 0.3, 0.01, -0.02, 0.03]), &x);
        for (a, b) in d.iter().zip([0.1, 0.2, 0.3, 0.01, -0.02, 0.03]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gauss_newton_is_exact_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_linear_problem(&mut rng, 3, 8);
        let sys = p.build_normal_equations().unwrap();
        let expected = sys.h.clone().cholesky().unwrap().solve(&sys.b);
        let start: Vec<f64> = (0..3).flat_map(|id| p.value(id).to_vec()).collect();
        let cfg = SolverConfig { method: Method::GaussNewton, max_iterations: 1, ..Default::default() };
        optimize(&mut p, &cfg).unwrap();
        let end: Vec<f64> = (0..3).flat_map(|id| p.value(id).to_vec()).collect();
        for k in 0..27 {
            assert!((end[k] - start[k] - expected[k]).abs() < 1e-10);
        }
        let after = p.build_normal_equations().unwrap();
        assert!(after.b.amax() < 1e-9);
    }

    /// `r = (x₀² − 2, x₀x₁ − 1, x₁ − 0.3)`, a small nonlinear problem.
    struct Curved;

    impl Factor for Curved {
        fn residual_dim(&self) -> usize {
            3
        }
        fn block_kinds(&self) -> Vec<BlockKind> {
            vec![BlockKind::InverseDepth, BlockKind::InverseDepth]
        }
        fn evaluate(&self, p: &[&[f64]], jacobians: bool) -> Result<FactorEval> {
            let (a, b) = (p[0][0], p[1][0]);
            let residual = DVector::from_vec(vec![a * a - 2.0, a * b - 1.0, b - 0.3]);
            let jacobians = if jacobians {
                vec![DMatrix::from_vec(3, 1, vec![2.0 * a, b, 0.0]), DMatrix::from_vec(3, 1, vec![0.0, a, 1.0])]
            } else {
                vec![]
            };
            Ok(FactorEval { residual, jacobians })
        }
    }

    #[test]
    fn lm_cost_never_increases() {
        let mut p = Problem::new();
        let a = p.add_block(BlockKind::InverseDepth, vec![3.0]);
        let b = p.add_block(BlockKind::InverseDepth, vec![4.0]);
        p.add_factor(Arc::new(Curved), vec![a, b], Loss::Trivial).unwrap();
        let report = optimize(&mut p, &SolverConfig { max_iterations: 50, ..Default::default() }).unwrap();
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(report.final_cost < report.initial_cost);
    }

    #[test]
    fn huber_loss() {
        let l = Loss::Huber(1.0);
        assert_eq!(l.rho(0.25), 0.25);
        assert_eq!(l.weight(0.25), 1.0);
        assert_relative_eq!(l.rho(9.0), 5.0);
        // IRLS weight reproduces the loss gradient: d/ds ρ = w²
        let s: f64 = 9.0;
        assert_relative_eq!(l.weight(s).powi(2), 1.0 / s.sqrt());
    }

    #[test]
    fn marginalizing_nothing_reproduces_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_linear_problem(&mut rng, 3, 10);
        let sys = p.build_normal_equations().unwrap();
        let (prior, retained) = marginalize(&p, &sys, &[]).unwrap();
        assert_eq!(retained, vec![0, 1, 2]);
        let (h, b) = prior.information();
        assert_relative_eq!(h, sys.h, epsilon = 1e-9);
        assert_relative_eq!(b, sys.b, epsilon = 1e-9);
        let values: Vec<&[f64]> = (0..3).map(|id| p.value(id)).collect();
        let (r, _) = prior.evaluate(&values);
        assert_eq!(r, prior.residual);
    }

    #[test]
    fn marginalizing_everything_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_linear_problem(&mut rng, 2, 4);
        let sys = p.build_normal_equations().unwrap();
        assert!(marginalize(&p, &sys, &[0, 1]).is_err());
    }

    #[test]
    fn schur_reduction_matches_full_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_linear_problem(&mut rng, 4, 16);
        let sys = p.build_normal_equations().unwrap();
        let full = sys.h.clone().cholesky().unwrap().solve(&sys.b);
        let (prior, retained) = marginalize(&p, &sys, &[1]).unwrap();
        assert_eq!(retained, vec![0, 2, 3]);
        let (hp, bp) = prior.information();
        let reduced = hp.clone().cholesky().unwrap().solve(&bp);
        let expected: Vec<f64> = [0, 2, 3].iter().flat_map(|&id| full.rows(9 * id, 9).iter().copied().collect::<Vec<_>>()).collect();
        for (a, b) in reduced.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((&hp - hp.transpose()).amax() < 1e-10);
        assert!(hp.symmetric_eigen().eigenvalues.min() > -1e-10);
    }

    #[test]
    fn prior_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_spd(&mut rng, 9);
        let b = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let (j, r) = sqrt_prior(&h, &b);
        assert_relative_eq!(j.transpose() * &r, -b, epsilon = 1e-9);
        assert_relative_eq!(j.transpose() * j, h, epsilon = 1e-9);
    }

    #[test]
    fn prior_factor_reproduces_retained_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_linear_problem(&mut rng, 4, 16);
        let sys = p.build_normal_equations().unwrap();
        let (prior, retained) = marginalize(&p, &sys, &[0]).unwrap();

        let mut full = random_linear_problem(&mut ChaCha8Rng::seed_from_u64(9), 4, 16);
        let cfg = SolverConfig { method: Method::GaussNewton, max_iterations: 3, ..Default::default() };
        optimize(&mut full, &cfg).unwrap();

        let mut reduced = Problem::new();
        let ids: Vec<BlockId> = retained.iter().map(|&id| reduced.add_block(BlockKind::SpeedBias, p.value(id).to_vec())).collect();
        reduced.add_factor(Arc::new(prior), ids.clone(), Loss::Trivial).unwrap();
        optimize(&mut reduced, &cfg).unwrap();
        for (&old, &new) in retained.iter().zip(&ids) {
            for (a, b) in full.value(old).iter().zip(reduced.value(new)) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        let _ = &mut p;
    }

    #[test]
    fn matrix_market_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_linear_problem(&mut rng, 2, 3);
        let sys = p.build_normal_equations().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.mtx");
        sys.write_matrix_market(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("%%MatrixMarket"));
        assert!(text.contains("18 18"));
    }
}
