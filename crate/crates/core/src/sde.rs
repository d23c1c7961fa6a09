//! Brownian increments, the unrolled Euler scheme and fine-grid references.
//!
//! Row `r` of every noise batch is drawn from its own ChaCha stream keyed by
//! `(seed, r)`, in time order. A batch therefore does not depend on how rows
//! are chunked, and a coarse increment is the sum of its fine children in a
//! fixed order, so coarse and fine rollouts see bitwise-coupled noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::problem::{BoundProblem, FbsdeProblem};
use crate::real::Real;
use crate::rng::NormalStream;
use crate::tensor::Tensor;

/// Any state component above this magnitude marks its path as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e12;

/// Equidistant partition of `[0, T]` into `N` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon T must be positive, got {horizon}")));
        }
        Ok(Self { steps, horizon })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_i`; the last node is `T` exactly.
    pub fn t(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            i as f64 * self.h()
        }
    }

    /// The grid with every step split into `factor` pieces.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(self.steps * factor, self.horizon)
    }
}

/// Source of fine-step increments, one `rows x m` matrix per call.
pub trait IncrementSource {
    fn rows(&self) -> usize;
    fn dim(&self) -> usize;
    fn next_step(&mut self, out: &mut Matrix);
}

/// Per-row normal streams scaled to a step of length `h`.
#[derive(Clone, Debug)]
pub struct RowStreams {
    streams: Vec<NormalStream>,
    m: usize,
    scale: f64,
}

impl RowStreams {
    pub fn new(seed: u64, rows: Range<usize>, m: usize, h: f64) -> Self {
        let streams = rows.map(|r| NormalStream::new(seed, r as u64)).collect();
        Self { streams, m, scale: libm::sqrt(h) }
    }
}

impl IncrementSource for RowStreams {
    fn rows(&self) -> usize {
        self.streams.len()
    }

    fn dim(&self) -> usize {
        self.m
    }

    fn next_step(&mut self, out: &mut Matrix) {
        let m = self.m;
        for (r, s) in self.streams.iter_mut().enumerate() {
            for v in &mut out.data_mut()[r * m..(r + 1) * m] {
                *v = self.scale * s.next_normal();
            }
        }
    }
}

/// Sums `factor` consecutive steps of another source.
#[derive(Clone, Debug)]
pub struct Aggregated<S> {
    inner: S,
    factor: usize,
    scratch: Matrix,
}

impl<S: IncrementSource> Aggregated<S> {
    pub fn new(inner: S, factor: usize) -> Self {
        let scratch = Matrix::zeros(&[inner.rows(), inner.dim()]);
        Self { inner, factor: factor.max(1), scratch }
    }
}

impl<S: IncrementSource> IncrementSource for Aggregated<S> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn next_step(&mut self, out: &mut Matrix) {
        out.fill(0.0);
        for _ in 0..self.factor {
            self.inner.next_step(&mut self.scratch);
            out.data_mut().iter_mut().zip(self.scratch.data()).for_each(|(o, s)| *o += s);
        }
    }
}

/// Coarse increments `ΔW_i`, one `batch x m` matrix per step, optionally with
/// the fine increments they aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianBatch {
    pub seed: u64,
    pub refinement: usize,
    pub increments: Vec<Matrix>,
    pub fine: Option<Vec<Matrix>>,
}

impl BrownianBatch {
    /// Rows `rows` of the batch keyed by `seed`. Each coarse step sums
    /// `refinement` fine steps of variance `h / refinement`.
    pub fn sample(
        grid: &TimeGrid,
        m: usize,
        rows: Range<usize>,
        seed: u64,
        refinement: usize,
        keep_fine: bool,
    ) -> Result<Self> {
        if m == 0 || rows.is_empty() || refinement == 0 {
            return Err(Error::InvalidParameter("noise needs m, batch and refinement of at least 1".into()));
        }
        let fine_h = grid.h() / refinement as f64;
        let mut src = RowStreams::new(seed, rows, m, fine_h);
        let b = src.rows();
        let mut fine = keep_fine.then(|| Vec::with_capacity(grid.steps() * refinement));
        let mut step = Matrix::zeros(&[b, m]);
        let mut increments = Vec::with_capacity(grid.steps());
        for _ in 0..grid.steps() {
            let mut coarse = Matrix::zeros(&[b, m]);
            for _ in 0..refinement {
                src.next_step(&mut step);
                coarse.data_mut().iter_mut().zip(step.data()).for_each(|(c, s)| *c += s);
                if let Some(f) = fine.as_mut() {
                    f.push(step.clone());
                }
            }
            increments.push(coarse);
        }
        Ok(Self { seed, refinement, increments, fine })
    }

    pub fn rows(&self) -> usize {
        self.increments[0].rows()
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }
}

/// Per-row flag: any entry non-finite or above [`DIVERGENCE_BOUND`].
pub fn mark_diverged(flags: &mut [bool], state: &Matrix) {
    let c = state.cols();
    for (r, flag) in flags.iter_mut().enumerate() {
        if !*flag && state.data()[r * c..(r + 1) * c].iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            *flag = true;
        }
    }
}

/// `X`, `Y` at the `N + 1` nodes and `Z` at the first `N`, one matrix per node.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub x: Vec<Matrix>,
    pub y: Vec<Matrix>,
    pub z: Vec<Matrix>,
    pub diverged: Vec<bool>,
}

impl TrajectoryBatch {
    pub fn rows(&self) -> usize {
        self.diverged.len()
    }

    pub fn diverged_count(&self) -> usize {
        self.diverged.iter().filter(|&&d| d).count()
    }
}

fn initial_state(problem: &FbsdeProblem, rows: usize) -> Matrix {
    let x0 = problem.x0();
    let mut data = Vec::with_capacity(rows * x0.len());
    for _ in 0..rows {
        data.extend_from_slice(x0);
    }
    Matrix::from_vec(&[rows, x0.len()], data).expect("row-major fill")
}

/// `Z ΔW` row by row, `Z` rows holding `q x m` matrices.
fn z_times_dw(z: &Matrix, dw: &Matrix, q: usize) -> Matrix {
    let m = dw.cols();
    let rows = dw.rows();
    let mut out = Matrix::zeros(&[rows, q]);
    for r in 0..rows {
        let zr = z.row_slice(r);
        let wr = dw.row_slice(r);
        for k in 0..q {
            out.data_mut()[r * q + k] = zr[k * m..(k + 1) * m].iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// The explicit scheme on plain matrices with `Y_0 = y0` and `Z_i = z_at(i, t_i, X_i)`.
pub fn euler_rollout(
    problem: &FbsdeProblem,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    y0: Matrix,
    mut z_at: impl FnMut(usize, f64, &Matrix) -> Result<Matrix>,
) -> Result<TrajectoryBatch> {
    if noise.steps() != grid.steps() {
        return Err(Error::Shape(format!("{} noise steps for a {}-step grid", noise.steps(), grid.steps())));
    }
    let rows = noise.rows();
    let q = problem.dims().q;
    let h = grid.h();
    let mut x = initial_state(problem, rows);
    let mut y = y0;
    let mut diverged = vec![false; rows];
    mark_diverged(&mut diverged, &y);
    let mut traj = TrajectoryBatch { x: vec![x.clone()], y: vec![y.clone()], z: Vec::new(), diverged: Vec::new() };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let dw = &noise.increments[i];
        let z = z_at(i, t, &x)?;
        let b = problem.drift(t, &x, &y, &z)?;
        let sdw = problem.diffusion_increment(t, &x, &y, dw)?;
        let f = problem.driver(t, &x, &y, &z)?;
        let zdw = z_times_dw(&z, dw, q);
        for ((xv, bv), sv) in x.data_mut().iter_mut().zip(b.data()).zip(sdw.data()) {
            *xv += h * bv + sv;
        }
        for ((yv, fv), zv) in y.data_mut().iter_mut().zip(f.data()).zip(zdw.data()) {
            *yv += -h * fv + zv;
        }
        mark_diverged(&mut diverged, &x);
        mark_diverged(&mut diverged, &y);
        traj.x.push(x.clone());
        traj.y.push(y.clone());
        traj.z.push(z);
    }
    traj.diverged = diverged;
    Ok(traj)
}

/// Reference solution at the coarse nodes together with the coarse noise it
/// was driven by.
#[derive(Clone, Debug)]
pub struct ReferenceBatch {
    pub trajectory: TrajectoryBatch,
    pub noise: BrownianBatch,
}

/// Simulates `X` on `grid` refined `refinement` times, with the drift and
/// diffusion evaluated on the decoupling fields, and samples `Y = y(t, X)`,
/// `Z = z(t, X)` at the coarse nodes. Fine increments come from `source`;
/// their coarse sums are returned so an approximate rollout can reuse them.
pub fn reference_rollout(
    problem: &FbsdeProblem,
    grid: &TimeGrid,
    refinement: usize,
    source: &mut impl IncrementSource,
) -> Result<ReferenceBatch> {
    let m = problem.dims().m;
    if source.dim() != m {
        return Err(Error::Shape(format!("noise has {} components, problem needs {m}", source.dim())));
    }
    let rows = source.rows();
    let refinement = refinement.max(1);
    let fine = grid.refine(refinement)?;
    let hf = fine.h();
    let mut x = initial_state(problem, rows);
    let mut diverged = vec![false; rows];
    let mut traj = TrajectoryBatch { x: Vec::new(), y: Vec::new(), z: Vec::new(), diverged: Vec::new() };
    let mut increments = Vec::with_capacity(grid.steps());
    let mut step = Matrix::zeros(&[rows, m]);
    let mut coarse = Matrix::zeros(&[rows, m]);
    for j in 0..fine.steps() {
        let t = fine.t(j);
        let (y, z) = problem.fields(t, &x)?;
        if j % refinement == 0 {
            traj.x.push(x.clone());
            mark_diverged(&mut diverged, &y);
            traj.y.push(y.clone());
            traj.z.push(z.clone());
            coarse.fill(0.0);
        }
        source.next_step(&mut step);
        let b = problem.drift(t, &x, &y, &z)?;
        let sdw = problem.diffusion_increment(t, &x, &y, &step)?;
        for ((xv, bv), sv) in x.data_mut().iter_mut().zip(b.data()).zip(sdw.data()) {
            *xv += hf * bv + sv;
        }
        mark_diverged(&mut diverged, &x);
        coarse.data_mut().iter_mut().zip(step.data()).for_each(|(c, s)| *c += s);
        if (j + 1) % refinement == 0 {
            increments.push(coarse.clone());
        }
    }
    let (y, _) = problem.fields(grid.horizon(), &x)?;
    mark_diverged(&mut diverged, &y);
    traj.x.push(x);
    traj.y.push(y);
    traj.diverged = diverged;
    Ok(ReferenceBatch { trajectory: traj, noise: BrownianBatch { seed: 0, refinement, increments, fine: None } })
}

/// Variables of an Euler rollout recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeTrajectory {
    /// Leaves to be filled with `ΔW_i` (`batch x m`).
    pub dw: Vec<Var>,
    pub x: Vec<Var>,
    pub y: Vec<Var>,
    pub z: Vec<Var>,
}

/// Records the explicit scheme for `rows` paths on `tape`. `y0_net` maps the
/// initial-state batch to `Y_0`; `z_net(i, tape, X_i)` gives `Z_i`.
pub fn euler_rollout_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundProblem<'_>,
    grid: &TimeGrid,
    rows: usize,
    y0_net: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    mut z_net: impl FnMut(usize, &mut Tape<T>, Var) -> Result<Var>,
) -> Result<TapeTrajectory> {
    let problem = bound.problem();
    let dims = problem.dims();
    let h = T::of(grid.h());
    let x0 = tape.constant(initial_state(problem, rows).cast::<T>())?;
    let mut x = x0;
    let mut y = y0_net(tape, x0)?;
    let mut traj = TapeTrajectory { dw: Vec::new(), x: vec![x], y: vec![y], z: Vec::new() };
    for i in 0..grid.steps() {
        let t = grid.t(i);
        let dw = tape.constant(Tensor::zeros(&[rows, dims.m]))?;
        let z = z_net(i, tape, x)?;
        let b = bound.drift(tape, t, x, y, z)?;
        let sdw = bound.diffusion_increment(tape, t, x, y, dw)?;
        let f = bound.driver(tape, t, x, y, z)?;
        let zdw = tape.batch_matvec(z, dw, dims.q)?;
        let bh = tape.scale(b, h);
        let x_next = tape.add(x, bh)?;
        x = tape.add(x_next, sdw)?;
        let fh = tape.scale(f, -h);
        let y_next = tape.add(y, fh)?;
        y = tape.add(y_next, zdw)?;
        traj.dw.push(dw);
        traj.x.push(x);
        traj.y.push(y);
        traj.z.push(z);
    }
    Ok(traj)
}

/// Per-path divergence of a recorded rollout after its latest evaluation.
pub fn tape_diverged<T: Real>(tape: &Tape<T>, traj: &TapeTrajectory) -> Vec<bool> {
    let rows = tape.shape(traj.x[0])[0];
    let mut flags = vec![false; rows];
    for &v in traj.x.iter().chain(&traj.y) {
        let value = tape.value(v);
        let c = value.cols();
        for (r, flag) in flags.iter_mut().enumerate() {
            if !*flag && value.data()[r * c..(r + 1) * c].iter().any(|v| !(v.as_f64().abs() <= DIVERGENCE_BOUND)) {
                *flag = true;
            }
        }
    }
    flags
}
