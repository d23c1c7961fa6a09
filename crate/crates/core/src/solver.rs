//! Training, error evaluation and convergence studies.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{AdamConfig, AdamState, BoundMlp, MlpSpec, ParameterSet};
use crate::problem::FbsdeProblem;
use crate::real::Real;
use crate::rng::mix;
use crate::sde::{self, BrownianBatch, RowStreams, TapeTrajectory, TimeGrid};
use crate::tensor::Tensor;

const SALT_INIT: u64 = 0x1_0000;
const SALT_NOISE: u64 = 0x2_0000;
const SALT_RUN: u64 = 0x3_0000;
const SALT_EVAL: u64 = 0x4_0000;

/// `φ₀` for `Y_0` and one `ζ_i` per step for `Z_{t_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkStack<T> {
    pub y0: ParameterSet<T>,
    pub z: Vec<ParameterSet<T>>,
}

impl<T: Real> NetworkStack<T> {
    pub fn init(problem: &FbsdeProblem, steps: usize, seed: u64) -> Result<Self> {
        let dims = problem.dims();
        let y0 = ParameterSet::init(MlpSpec::standard(dims.d, dims.q), mix(seed, SALT_INIT))?;
        let z = (0..steps)
            .map(|i| ParameterSet::init(MlpSpec::standard(dims.d, dims.z_width()), mix(seed, SALT_INIT + 1 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { y0, z })
    }

    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn validate(&self, problem: &FbsdeProblem, steps: usize) -> Result<()> {
        let dims = problem.dims();
        if self.z.len() != steps {
            return Err(Error::Shape(format!("{} Z networks for {steps} steps", self.z.len())));
        }
        if self.y0.spec.input != dims.d || self.y0.spec.output != dims.q {
            return Err(Error::Shape(format!("Y0 network maps {} -> {}", self.y0.spec.input, self.y0.spec.output)));
        }
        for (i, net) in self.z.iter().enumerate() {
            if net.spec.input != dims.d || net.spec.output != dims.z_width() {
                return Err(Error::Shape(format!("Z network {i} maps {} -> {}", net.spec.input, net.spec.output)));
            }
            net.validate()?;
        }
        self.y0.validate()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.y0.tensors.iter().chain(self.z.iter().flat_map(|n| n.tensors.iter()))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.y0.tensors.iter_mut().chain(self.z.iter_mut().flat_map(|n| n.tensors.iter_mut()))
    }

    pub fn cast<U: Real>(&self) -> NetworkStack<U> {
        NetworkStack { y0: self.y0.cast(), z: self.z.iter().map(ParameterSet::cast).collect() }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

/// The unrolled scheme and its loss recorded once on a tape, reused for every
/// batch of fresh noise.
#[derive(Debug)]
pub struct TrainingGraph<T> {
    pub tape: Tape<T>,
    pub params: Vec<Var>,
    pub trajectory: TapeTrajectory,
    /// `g(X_N) - Y_N`, `batch x q`.
    pub mismatch: Var,
    /// Mean squared Frobenius mismatch.
    pub loss: Var,
}

impl<T: Real> TrainingGraph<T> {
    pub fn build(problem: &FbsdeProblem, grid: &TimeGrid, stack: &NetworkStack<T>, rows: usize) -> Result<Self> {
        stack.validate(problem, grid.steps())?;
        let mut tape = Tape::new();
        let bound = problem.bind(&mut tape)?;
        let y0 = stack.y0.bind(&mut tape)?;
        let zs: Vec<BoundMlp> = stack.z.iter().map(|n| n.bind(&mut tape)).collect::<Result<_>>()?;
        let params = y0.vars.iter().chain(zs.iter().flat_map(|b| b.vars.iter())).copied().collect();
        let trajectory =
            sde::euler_rollout_tape(&mut tape, &bound, grid, rows, |t, x| y0.apply(t, x), |i, t, x| zs[i].apply(t, x))?;
        let x_n = *trajectory.x.last().expect("at least one node");
        let y_n = *trajectory.y.last().expect("at least one node");
        let g = bound.terminal(&mut tape, x_n)?;
        let mismatch = tape.sub(g, y_n)?;
        let sq = tape.squared_norm(mismatch);
        let loss = tape.scale(sq, T::of(1.0 / rows as f64));
        Ok(Self { tape, params, trajectory, mismatch, loss })
    }

    pub fn rows(&self) -> usize {
        self.tape.shape(self.mismatch)[0]
    }

    /// Loads parameters and increments and re-evaluates the graph.
    pub fn evaluate(&mut self, stack: &NetworkStack<T>, noise: &BrownianBatch) -> Result<()> {
        for (v, p) in self.params.iter().zip(stack.tensors()) {
            self.tape.set_value(*v, p)?;
        }
        if noise.steps() != self.trajectory.dw.len() {
            return Err(Error::Shape(format!(
                "{} noise steps for a {}-step graph",
                noise.steps(),
                self.trajectory.dw.len()
            )));
        }
        for (v, dw) in self.trajectory.dw.iter().zip(&noise.increments) {
            self.tape.set_value(*v, &dw.cast::<T>())?;
        }
        self.tape.forward_eval(&[], self.loss)?;
        Ok(())
    }

    /// Mean squared mismatch over the paths that did not diverge, with the
    /// number of diverged paths.
    pub fn path_loss(&self) -> (f64, usize) {
        let flags = sde::tape_diverged(&self.tape, &self.trajectory);
        let mismatch = self.tape.value(self.mismatch);
        let q = mismatch.cols();
        let (mut sum, mut kept) = (0.0, 0usize);
        for (r, &bad) in flags.iter().enumerate() {
            let v: f64 = mismatch.data()[r * q..(r + 1) * q].iter().map(|m| m.as_f64() * m.as_f64()).sum();
            if !bad && v.is_finite() {
                sum += v;
                kept += 1;
            }
        }
        let diverged = flags.len() - kept;
        (if kept == 0 { f64::NAN } else { sum / kept as f64 }, diverged)
    }
}

/// Empirical loss `mean ‖g(X_N) - Y_N‖²` of a plain trajectory batch, over the
/// paths that did not diverge.
pub fn loss(problem: &FbsdeProblem, traj: &sde::TrajectoryBatch) -> Result<f64> {
    let x_n = traj.x.last().ok_or_else(|| Error::Shape("empty trajectory".into()))?;
    let y_n = traj.y.last().expect("x and y have equal length");
    let g = problem.terminal(x_n)?;
    let q = g.cols();
    let (mut sum, mut kept) = (0.0, 0usize);
    for r in 0..g.rows() {
        if traj.diverged.get(r).copied().unwrap_or(false) {
            continue;
        }
        sum += (0..q).map(|k| (g.at(r, k) - y_n.at(r, k)).powi(2)).sum::<f64>();
        kept += 1;
    }
    Ok(if kept == 0 { f64::NAN } else { sum / kept as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Iterations per divergence window.
    pub divergence_window: usize,
}

impl TrainingConfig {
    /// Desk-scale defaults with the learning-rate horizon tied to the budget.
    pub fn new(steps: usize, seed: u64) -> Self {
        Self { steps, batch: 512, iterations: 4096, seed, adam: AdamConfig::with_horizon(4096), divergence_window: 256 }
    }

    pub fn with_budget(mut self, iterations: usize, batch: usize) -> Self {
        self.iterations = iterations;
        self.batch = batch;
        self.adam.horizon = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("N", self.steps),
            ("batch", self.batch),
            ("iterations", self.iterations),
            ("divergence_window", self.divergence_window),
            ("lr horizon", self.adam.horizon),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.adam.initial_lr > 0.0 && self.adam.decay_rate > 0.0) {
            return Err(Error::Config("learning rate and decay rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// No update was applied in this iteration.
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome<T> {
    pub stack: NetworkStack<T>,
    pub history: Vec<LossRecord>,
    /// Training stopped because most iterations of a window diverged.
    pub diverged: bool,
}

impl<T> TrainingOutcome<T> {
    /// Mean loss over the last `window` non-diverged iterations.
    pub fn final_loss(&self, window: usize) -> f64 {
        let tail: Vec<f64> = self
            .history
            .iter()
            .rev()
            .filter(|r| !r.diverged && r.loss.is_finite())
            .take(window)
            .map(|r| r.loss)
            .collect();
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

/// Stochastic gradient training of the network stack. An iteration in which
/// any path leaves the divergence bound, or the gradient is not finite,
/// applies no update; training stops once more than half of a window of
/// iterations did so.
pub fn train<T: Real>(problem: &FbsdeProblem, config: &TrainingConfig) -> Result<TrainingOutcome<T>> {
    let stack = NetworkStack::init(problem, config.steps, config.seed)?;
    train_from(problem, config, stack)
}

pub fn train_from<T: Real>(
    problem: &FbsdeProblem,
    config: &TrainingConfig,
    mut stack: NetworkStack<T>,
) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    let grid = TimeGrid::new(config.steps, problem.horizon())?;
    let mut graph = TrainingGraph::build(problem, &grid, &stack, config.batch)?;
    let mut params: Vec<Tensor<T>> = stack.tensors().cloned().collect();
    let mut adam = AdamState::new(config.adam, &params);
    let m = problem.dims().m;
    let mut history = Vec::with_capacity(config.iterations);
    let mut window = vec![false; config.divergence_window];
    let mut diverged_in_window = 0usize;
    let mut stopped = false;
    for k in 0..config.iterations {
        let noise =
            BrownianBatch::sample(&grid, m, 0..config.batch, mix(config.seed, SALT_NOISE + k as u64), 1, false)?;
        graph.evaluate(&stack, &noise)?;
        let (loss, bad_paths) = graph.path_loss();
        let lr = config.adam.learning_rate(adam.step);
        let mut skipped = bad_paths > 0 || !loss.is_finite();
        if !skipped {
            graph.tape.backward(graph.loss)?;
            let grads = graph.tape.gradients(&graph.params);
            skipped = !adam.update(&mut params, &grads)?;
            if !skipped {
                for (dst, src) in stack.tensors_mut().zip(&params) {
                    dst.copy_from(src)?;
                }
            }
        }
        history.push(LossRecord { iteration: k, loss, lr, diverged: skipped });
        let slot = k % config.divergence_window;
        diverged_in_window = diverged_in_window + skipped as usize - window[slot] as usize;
        window[slot] = skipped;
        if k + 1 >= config.divergence_window && 2 * diverged_in_window > config.divergence_window {
            stopped = true;
            break;
        }
    }
    Ok(TrainingOutcome { stack, history, diverged: stopped })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    pub paths: usize,
    /// Paths simulated together.
    pub chunk: usize,
    /// Fine reference steps per coarse step; `N' = N * refinement`.
    pub refinement: usize,
    pub seed: u64,
}

impl EvalConfig {
    /// `N'` fine steps shared by every studied `N`, which must divide it.
    pub fn for_reference(steps: usize, reference_steps: usize, paths: usize, seed: u64) -> Result<Self> {
        if steps == 0 || !reference_steps.is_multiple_of(steps) {
            return Err(Error::Config(format!("reference steps {reference_steps} are not a multiple of N = {steps}")));
        }
        Ok(Self { paths, chunk: 512, refinement: reference_steps / steps, seed })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErrorReport {
    pub error_x: f64,
    pub error_y: f64,
    pub error_z: f64,
    pub total: f64,
    pub relative_x: f64,
    pub relative_y: f64,
    pub relative_z: f64,
    pub relative_total: f64,
    pub loss: f64,
    pub diverged_fraction: f64,
    pub paths: usize,
}

#[derive(Default)]
struct Sums {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    ref_x: Vec<f64>,
    ref_y: Vec<f64>,
    ref_z: Vec<f64>,
    loss: f64,
    kept: usize,
    diverged: usize,
}

fn sq_row_diff(a: &Matrix, b: &Matrix, r: usize) -> f64 {
    a.row_slice(r).iter().zip(b.row_slice(r)).map(|(p, q)| (p - q).powi(2)).sum()
}

fn sq_row(a: &Matrix, r: usize) -> f64 {
    a.row_slice(r).iter().map(|p| p * p).sum()
}

impl Sums {
    fn new(steps: usize) -> Self {
        Self {
            x: vec![0.0; steps + 1],
            y: vec![0.0; steps + 1],
            z: vec![0.0; steps],
            ref_x: vec![0.0; steps + 1],
            ref_y: vec![0.0; steps + 1],
            ref_z: vec![0.0; steps],
            ..Default::default()
        }
    }

    fn add(
        &mut self,
        problem: &FbsdeProblem,
        approx: &sde::TrajectoryBatch,
        reference: &sde::TrajectoryBatch,
    ) -> Result<()> {
        let g = problem.terminal(approx.x.last().expect("nodes"))?;
        let y_n = approx.y.last().expect("nodes");
        for r in 0..approx.rows() {
            if approx.diverged[r] || reference.diverged[r] {
                self.diverged += 1;
                continue;
            }
            self.kept += 1;
            for n in 0..approx.x.len() {
                self.x[n] += sq_row_diff(&approx.x[n], &reference.x[n], r);
                self.y[n] += sq_row_diff(&approx.y[n], &reference.y[n], r);
                self.ref_x[n] += sq_row(&reference.x[n], r);
                self.ref_y[n] += sq_row(&reference.y[n], r);
            }
            for n in 0..approx.z.len() {
                self.z[n] += sq_row_diff(&approx.z[n], &reference.z[n], r);
                self.ref_z[n] += sq_row(&reference.z[n], r);
            }
            self.loss += sq_row_diff(&g, y_n, r);
        }
        Ok(())
    }

    fn report(&self) -> ErrorReport {
        let paths = self.kept + self.diverged;
        let diverged_fraction = if paths == 0 { 0.0 } else { self.diverged as f64 / paths as f64 };
        if self.kept == 0 {
            return ErrorReport {
                error_x: f64::NAN,
                error_y: f64::NAN,
                error_z: f64::NAN,
                total: f64::NAN,
                relative_x: f64::NAN,
                relative_y: f64::NAN,
                relative_z: f64::NAN,
                relative_total: f64::NAN,
                loss: f64::NAN,
                diverged_fraction,
                paths,
            };
        }
        let k = self.kept as f64;
        let worst = |errs: &[f64], refs: &[f64]| {
            let mut idx = 0;
            for (n, e) in errs.iter().enumerate() {
                if !(e <= &errs[idx]) {
                    idx = n;
                }
            }
            (errs[idx] / k, errs[idx] / refs[idx])
        };
        let (error_x, relative_x) = worst(&self.x, &self.ref_x);
        let (error_y, relative_y) = worst(&self.y, &self.ref_y);
        let steps = self.z.len().max(1) as f64;
        let error_z = self.z.iter().sum::<f64>() / k / steps;
        let relative_z = self.z.iter().sum::<f64>() / self.ref_z.iter().sum::<f64>();
        ErrorReport {
            error_x,
            error_y,
            error_z,
            total: error_x + error_y + error_z,
            relative_x,
            relative_y,
            relative_z,
            relative_total: relative_x + relative_y + relative_z,
            loss: self.loss / k,
            diverged_fraction,
            paths,
        }
    }
}

/// Compares any approximate rollout against the fine-grid reference on the
/// same noise. `rollout` receives the coarse increments of each chunk.
pub fn evaluate_with(
    problem: &FbsdeProblem,
    grid: &TimeGrid,
    config: &EvalConfig,
    mut rollout: impl FnMut(&BrownianBatch) -> Result<sde::TrajectoryBatch>,
) -> Result<ErrorReport> {
    if config.paths == 0 || config.chunk == 0 || config.refinement == 0 {
        return Err(Error::Config("evaluation needs positive paths, chunk and refinement".into()));
    }
    problem.fields(0.0, &Matrix::from_vec(&[1, problem.dims().d], problem.x0().to_vec())?)?;
    let m = problem.dims().m;
    let mut sums = Sums::new(grid.steps());
    let mut start = 0;
    while start < config.paths {
        let end = (start + config.chunk).min(config.paths);
        let mut src = RowStreams::new(config.seed, start..end, m, grid.h() / config.refinement as f64);
        let reference = sde::reference_rollout(problem, grid, config.refinement, &mut src)?;
        let approx = rollout(&reference.noise)?;
        sums.add(problem, &approx, &reference.trajectory)?;
        start = end;
    }
    Ok(sums.report())
}

/// Errors of the trained networks against the reference solution.
pub fn evaluate(problem: &FbsdeProblem, stack: &NetworkStack<f64>, config: &EvalConfig) -> Result<ErrorReport> {
    let grid = TimeGrid::new(stack.steps(), problem.horizon())?;
    stack.validate(problem, grid.steps())?;
    let d = problem.dims().d;
    evaluate_with(problem, &grid, config, |noise| {
        let rows = noise.rows();
        let mut x0 = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            x0.extend_from_slice(problem.x0());
        }
        let y0 = stack.y0.apply(&Matrix::from_vec(&[rows, d], x0)?)?;
        sde::euler_rollout(problem, &grid, noise, y0, |i, _, x| stack.z[i].apply(x))
    })
}

/// Least-squares slope of `log(error)` against `log(h)`; non-finite or
/// non-positive points are skipped.
pub fn fit_rate(h: &[f64], errors: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(errors)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (libm::log(*a), libm::log(*b)))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyConfig {
    pub runs: usize,
    pub seed: u64,
    pub batch: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub eval_paths: usize,
    pub eval_chunk: usize,
    /// `N'`, a multiple of every studied `N`.
    pub reference_steps: usize,
    pub divergence_window: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            seed: 0,
            batch: 512,
            iterations: 4096,
            adam: AdamConfig::default(),
            eval_paths: 4096,
            eval_chunk: 512,
            reference_steps: 10_000,
            divergence_window: 256,
        }
    }
}

impl StudyConfig {
    pub fn training(&self, steps: usize, run: usize) -> TrainingConfig {
        let mut adam = self.adam;
        adam.horizon = self.iterations;
        TrainingConfig {
            steps,
            batch: self.batch,
            iterations: self.iterations,
            seed: mix(self.seed, SALT_RUN + run as u64),
            adam,
            divergence_window: self.divergence_window,
        }
    }

    /// Evaluation noise is keyed independently of all training noise.
    pub fn evaluation(&self, steps: usize, run: usize) -> Result<EvalConfig> {
        let mut c = EvalConfig::for_reference(
            steps,
            self.reference_steps,
            self.eval_paths,
            mix(self.seed, SALT_EVAL + run as u64),
        )?;
        c.chunk = self.eval_chunk;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunRecord {
    pub run: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub report: ErrorReport,
    pub final_train_loss: f64,
    pub train_diverged: bool,
    pub iterations_run: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyRow {
    pub n: usize,
    pub h: f64,
    pub runs: Vec<RunRecord>,
    pub err_x: (f64, f64),
    pub err_y: (f64, f64),
    pub err_z: (f64, f64),
    pub total: (f64, f64),
    pub loss_mean: f64,
    pub diverged_frac: f64,
    /// Final loss above `h`: the optimization, not the grid, limits accuracy.
    pub loss_dominated: bool,
}

impl StudyRow {
    pub fn from_runs(n: usize, h: f64, runs: Vec<RunRecord>) -> Self {
        let pick = |f: fn(&ErrorReport) -> f64| mean_std(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
        let loss_mean = mean_std(&runs.iter().map(|r| r.report.loss).collect::<Vec<_>>()).0;
        let diverged_frac = mean_std(&runs.iter().map(|r| r.report.diverged_fraction).collect::<Vec<_>>()).0;
        Self {
            n,
            h,
            err_x: pick(|r| r.error_x),
            err_y: pick(|r| r.error_y),
            err_z: pick(|r| r.error_z),
            total: pick(|r| r.total),
            loss_mean,
            diverged_frac: if runs.is_empty() { 0.0 } else { diverged_frac },
            loss_dominated: loss_mean > h,
            runs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rates {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Verdict {
    Converged,
    NotConverged,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub rates: Rates,
    pub verdict: Verdict,
}

impl StudyTable {
    pub fn from_rows(rows: Vec<StudyRow>) -> Self {
        let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
        let fit = |f: fn(&StudyRow) -> f64| fit_rate(&h, &rows.iter().map(f).collect::<Vec<_>>());
        let rates =
            Rates { x: fit(|r| r.err_x.0), y: fit(|r| r.err_y.0), z: fit(|r| r.err_z.0), total: fit(|r| r.total.0) };
        let verdict = verdict(&rows);
        Self { rows, rates, verdict }
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.total.0).collect()
    }
}

/// Diverged when a run stopped on divergence or more than 10% of evaluation
/// paths diverged; not converged when the total error at the largest `N`
/// exceeds half the error at the smallest.
pub fn verdict(rows: &[StudyRow]) -> Verdict {
    let diverged = rows.iter().any(|r| r.diverged_frac > 0.1 || r.runs.iter().any(|run| run.train_diverged))
        || rows.iter().any(|r| !r.total.0.is_finite());
    if diverged {
        return Verdict::Diverged;
    }
    let first = rows.iter().min_by_key(|r| r.n);
    let last = rows.iter().max_by_key(|r| r.n);
    match (first, last) {
        (Some(a), Some(b)) if a.n != b.n && b.total.0 > 0.5 * a.total.0 => Verdict::NotConverged,
        _ => Verdict::Converged,
    }
}

/// One training and evaluation run.
pub fn run_once<T: Real>(problem: &FbsdeProblem, config: &StudyConfig, steps: usize, run: usize) -> Result<RunRecord> {
    let training = config.training(steps, run);
    let eval = config.evaluation(steps, run)?;
    let outcome = train::<T>(problem, &training)?;
    let report = evaluate(problem, &outcome.stack.cast::<f64>(), &eval)?;
    Ok(RunRecord {
        run,
        train_seed: training.seed,
        eval_seed: eval.seed,
        report,
        final_train_loss: outcome.final_loss(64),
        train_diverged: outcome.diverged,
        iterations_run: outcome.history.len(),
    })
}

/// Trains and evaluates `runs` independent seeds for every `N` in `ns`.
/// `progress` sees each finished run.
pub fn convergence_study<T: Real>(
    problem: &FbsdeProblem,
    ns: &[usize],
    config: &StudyConfig,
    mut progress: impl FnMut(usize, &RunRecord),
) -> Result<StudyTable> {
    if ns.is_empty() {
        return Ok(StudyTable::from_rows(Vec::new()));
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("N list must be strictly ascending, got {ns:?}")));
    }
    if config.runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut runs = Vec::with_capacity(config.runs);
        for run in 0..config.runs {
            let record = run_once::<T>(problem, config, n, run)?;
            progress(n, &record);
            runs.push(record);
        }
        rows.push(StudyRow::from_runs(n, problem.horizon() / n as f64, runs));
    }
    Ok(StudyTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_problem, Example1Params, ProblemKind, ProblemParams};

    fn small_example1() -> FbsdeProblem {
        let p = Example1Params { d: 2, ..Default::default() };
        make_problem(ProblemKind::Example1, &ProblemParams::Example1(p)).unwrap()
    }

    #[test]
    fn loss_examples() {
        let prob = small_example1();
        let x = Matrix::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let traj = |y: Vec<f64>| sde::TrajectoryBatch {
            x: vec![x.clone()],
            y: vec![Matrix::from_vec(&[2, 1], y).unwrap()],
            z: vec![],
            diverged: vec![false, false],
        };
        assert_eq!(loss(&prob, &traj(vec![0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(loss(&prob, &traj(vec![1.0, -3.0])).unwrap(), 5.0);
        let mut t = traj(vec![1.0, f64::NAN]);
        t.diverged[1] = true;
        assert_eq!(loss(&prob, &t).unwrap(), 1.0);
        t.diverged[0] = true;
        assert!(loss(&prob, &t).unwrap().is_nan());
    }

    #[test]
    fn vector_loss_is_frobenius() {
        let smp = make_problem(
            ProblemKind::LqSmp,
            &ProblemParams::Lq(crate::problem::LqParams {
                riccati_steps: 500,
                ..crate::problem::LqParams::benchmark()
            }),
        )
        .unwrap();
        let x = Matrix::zeros(&[1, 25]);
        let mut y = Matrix::zeros(&[1, 25]);
        y.data_mut()[0] = 1.0;
        y.data_mut()[1] = 2.0;
        let t = sde::TrajectoryBatch { x: vec![x], y: vec![y], z: vec![], diverged: vec![false] };
        assert_eq!(loss(&smp, &t).unwrap(), 5.0);
    }

    #[test]
    fn stack_shapes() {
        let prob = small_example1();
        let s = NetworkStack::<f64>::init(&prob, 3, 1).unwrap();
        assert_eq!(s.steps(), 3);
        assert_eq!(s.y0.spec.widths(), [2, 32, 32, 1]);
        assert_eq!(s.z[2].spec.widths(), [2, 32, 32, 2]);
        s.validate(&prob, 3).unwrap();
        assert!(s.validate(&prob, 4).is_err());
        assert_ne!(s.z[0], s.z[1]);
    }

    #[test]
    fn graph_loss_matches_plain_rollout() {
        let prob = small_example1();
        let grid = TimeGrid::new(2, prob.horizon()).unwrap();
        let stack = NetworkStack::<f64>::init(&prob, 2, 5).unwrap();
        let mut graph = TrainingGraph::build(&prob, &grid, &stack, 8).unwrap();
        let noise = BrownianBatch::sample(&grid, 2, 0..8, 3, 1, false).unwrap();
        graph.evaluate(&stack, &noise).unwrap();
        let y0 = stack.y0.apply(&Matrix::from_vec(&[8, 2], prob.x0().repeat(8)).unwrap()).unwrap();
        let plain = sde::euler_rollout(&prob, &grid, &noise, y0, |i, _, x| stack.z[i].apply(x)).unwrap();
        let expect = loss(&prob, &plain).unwrap();
        let taped = graph.tape.value(graph.loss).item();
        assert!((taped - expect).abs() < 1e-12 * expect.max(1.0));
        assert_eq!(graph.path_loss(), (taped, 0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let prob = small_example1();
        let grid = TimeGrid::new(2, prob.horizon()).unwrap();
        let stack = NetworkStack::<f64>::init(&prob, 2, 9).unwrap();
        let mut graph = TrainingGraph::build(&prob, &grid, &stack, 4).unwrap();
        let noise = BrownianBatch::sample(&grid, 2, 0..4, 1, 1, false).unwrap();
        graph.evaluate(&stack, &noise).unwrap();
        let params = graph.params.clone();
        let err = graph.tape.finite_diff_check(&params, graph.loss, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn exact_reference_has_zero_error() {
        let prob = small_example1();
        let grid = TimeGrid::new(4, prob.horizon()).unwrap();
        let config = EvalConfig { paths: 40, chunk: 16, refinement: 1, seed: 3 };
        // Passing the reference trajectory itself back must give zero error.
        let report = evaluate_with(&prob, &grid, &config, |noise| {
            let mut src = ReplaySource { steps: noise.increments.clone(), next: 0 };
            Ok(sde::reference_rollout(&prob, &grid, 1, &mut src)?.trajectory)
        })
        .unwrap();
        assert_eq!((report.error_x, report.error_y, report.error_z, report.total), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(report.paths, 40);
    }

    struct ReplaySource {
        steps: Vec<Matrix>,
        next: usize,
    }

    impl sde::IncrementSource for ReplaySource {
        fn rows(&self) -> usize {
            self.steps[0].rows()
        }
        fn dim(&self) -> usize {
            self.steps[0].cols()
        }
        fn next_step(&mut self, out: &mut Matrix) {
            out.copy_from(&self.steps[self.next]).unwrap();
            self.next += 1;
        }
    }

    #[test]
    fn zero_y0_network_error_bound() {
        let prob = make_problem(ProblemKind::Example1, &ProblemParams::Example1(Example1Params::default())).unwrap();
        let mut stack = NetworkStack::<f64>::init(&prob, 2, 1).unwrap();
        stack.y0 = ParameterSet::zeros(stack.y0.spec);
        let config = EvalConfig { paths: 64, chunk: 64, refinement: 4, seed: 1 };
        let report = evaluate(&prob, &stack, &config).unwrap();
        let y0 = Example1Params::default().y_exact(0.0, prob.x0());
        assert!(report.error_y >= y0 * y0);
        assert!((report.total - (report.error_x + report.error_y + report.error_z)).abs() < 1e-15 * report.total);
    }

    #[test]
    fn euler_with_exact_controls_converges() {
        // Exact Y0 and Z fields through the explicit scheme: errors shrink with h.
        let prob = make_problem(ProblemKind::Example1, &ProblemParams::Example1(Example1Params::default())).unwrap();
        let mut totals = Vec::new();
        for n in [2, 8] {
            let grid = TimeGrid::new(n, prob.horizon()).unwrap();
            let config = EvalConfig { paths: 256, chunk: 256, refinement: 400 / n, seed: 7 };
            let report = evaluate_with(&prob, &grid, &config, |noise| {
                let x0 = Matrix::from_vec(&[noise.rows(), 10], prob.x0().repeat(noise.rows())).unwrap();
                let y0 = prob.fields(0.0, &x0)?.0;
                sde::euler_rollout(&prob, &grid, noise, y0, |_, t, x| Ok(prob.fields(t, x)?.1))
            })
            .unwrap();
            totals.push(report.total);
        }
        assert!(totals[1] < totals[0] / 2.0, "{totals:?}");
    }

    #[test]
    fn rate_of_exact_power_law() {
        let h: Vec<f64> = [1.0, 5.0, 10.0, 20.0].iter().map(|n| 0.25 / n).collect();
        let e: Vec<f64> = h.iter().map(|h| 3.0 * h).collect();
        assert!((fit_rate(&h, &e) - 1.0).abs() < 1e-6);
        let e2: Vec<f64> = h.iter().map(|h| 0.5 * h * h).collect();
        assert!((fit_rate(&h, &e2) - 2.0).abs() < 1e-6);
        assert!(fit_rate(&h[..1], &e[..1]).is_nan());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn row(n: usize, total: f64, frac: f64) -> StudyRow {
        let report = ErrorReport { total, diverged_fraction: frac, ..Default::default() };
        let run = RunRecord {
            run: 0,
            train_seed: 0,
            eval_seed: 0,
            report,
            final_train_loss: 0.0,
            train_diverged: false,
            iterations_run: 1,
        };
        StudyRow::from_runs(n, 1.0 / n as f64, vec![run])
    }

    #[test]
    fn verdicts() {
        assert_eq!(verdict(&[row(5, 1.0, 0.0), row(10, 0.4, 0.0)]), Verdict::Converged);
        assert_eq!(verdict(&[row(5, 1.0, 0.0), row(10, 0.6, 0.0)]), Verdict::NotConverged);
        assert_eq!(verdict(&[row(5, 1.0, 0.0), row(10, 0.1, 0.2)]), Verdict::Diverged);
    }

    #[test]
    fn short_training_is_deterministic_and_lowers_loss() {
        let prob = small_example1();
        let config = TrainingConfig::new(2, 11).with_budget(150, 64);
        let a = train::<f64>(&prob, &config).unwrap();
        let b = train::<f64>(&prob, &config).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.history, b.history);
        let first: f64 = a.history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let last: f64 = a.history[140..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(last < first, "{first} -> {last}");
        assert!(!a.diverged);
    }

    #[test]
    fn single_precision_training_runs() {
        let prob = small_example1();
        let config = TrainingConfig::new(2, 3).with_budget(20, 32);
        let out = train::<f32>(&prob, &config).unwrap();
        assert_eq!(out.history.len(), 20);
        assert!(out.history.iter().all(|r| r.loss.is_finite()));
    }
}
