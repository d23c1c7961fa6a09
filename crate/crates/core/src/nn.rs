//! Tanh multilayer perceptrons and the Adam optimizer.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::{gemm, Tensor};

/// Two tanh hidden layers followed by a linear output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
}

impl MlpSpec {
    /// Hidden layers `30 + input` wide.
    pub fn standard(input: usize, output: usize) -> Self {
        Self { input, hidden: [30 + input; 2], output }
    }

    pub fn widths(&self) -> [usize; 4] {
        [self.input, self.hidden[0], self.hidden[1], self.output]
    }

    pub fn parameter_count(&self) -> usize {
        let w = self.widths();
        (0..3).map(|l| w[l] * w[l + 1] + w[l + 1]).sum()
    }
}

/// Weights (`fan_in x fan_out`) and biases (`1 x fan_out`) of one network,
/// stored as `[W1, b1, W2, b2, W3, b3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub spec: MlpSpec,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        if spec.widths().contains(&0) {
            return Err(Error::InvalidParameter(format!("layer widths must be positive: {:?}", spec.widths())));
        }
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let w = spec.widths();
        let mut tensors = Vec::with_capacity(6);
        for l in 0..3 {
            let (fan_in, fan_out) = (w[l], w[l + 1]);
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let data = (0..fan_in * fan_out).map(|_| T::of((2.0 * rng::uniform(&mut g) - 1.0) * bound)).collect();
            tensors.push(Tensor::matrix(fan_in, fan_out, data)?);
            tensors.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self { spec, tensors })
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let w = spec.widths();
        let mut tensors = Vec::with_capacity(6);
        for l in 0..3 {
            tensors.push(Tensor::zeros(&[w[l], w[l + 1]]));
            tensors.push(Tensor::zeros(&[1, w[l + 1]]));
        }
        Self { spec, tensors }
    }

    /// Checks tensor shapes against the spec.
    pub fn validate(&self) -> Result<()> {
        let w = self.spec.widths();
        if self.tensors.len() != 6 {
            return Err(Error::Shape(format!("expected 6 parameter tensors, got {}", self.tensors.len())));
        }
        for l in 0..3 {
            let (wt, bt) = (&self.tensors[2 * l], &self.tensors[2 * l + 1]);
            if wt.shape() != [w[l], w[l + 1]] || bt.shape() != [1, w[l + 1]] {
                return Err(Error::Shape(format!(
                    "layer {l}: weights {:?} bias {:?} do not match widths {:?}",
                    wt.shape(),
                    bt.shape(),
                    w
                )));
            }
        }
        Ok(())
    }

    /// Batched forward pass without recording, `batch x input` to `batch x output`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.cols() != self.spec.input {
            return Err(Error::Shape(format!("network expects {} inputs, got {:?}", self.spec.input, x.shape())));
        }
        let mut h = x.clone();
        for l in 0..3 {
            let (wt, bt) = (&self.tensors[2 * l], &self.tensors[2 * l + 1]);
            let mut out = Tensor::zeros(&[h.rows(), wt.cols()]);
            gemm(h.data(), h.rows(), h.cols(), false, wt.data(), wt.rows(), wt.cols(), false, out.data_mut(), false);
            let n = wt.cols();
            for row in out.data_mut().chunks_mut(n) {
                row.iter_mut().zip(bt.data()).for_each(|(v, &b)| *v += b);
                if l < 2 {
                    row.iter_mut().for_each(|v| *v = v.libm_tanh());
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Registers the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundMlp> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp { spec: self.spec, vars })
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet { spec: self.spec, tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// A network whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub spec: MlpSpec,
    pub vars: Vec<Var>,
}

impl BoundMlp {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.shape(x)[1] != self.spec.input {
            return Err(Error::Shape(format!("network expects {} inputs, got {:?}", self.spec.input, tape.shape(x))));
        }
        let mut h = x;
        for l in 0..3 {
            let z = tape.matmul(h, self.vars[2 * l])?;
            let z = tape.add(z, self.vars[2 * l + 1])?;
            h = if l < 2 { tape.tanh(z) } else { z };
        }
        Ok(h)
    }
}

/// Adam hyperparameters with an exponentially decaying learning rate
/// `lr_k = initial_lr * decay_rate^(k / horizon)`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub initial_lr: f64,
    pub decay_rate: f64,
    pub horizon: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_horizon(horizon: usize) -> Self {
        Self { horizon, ..Self::default() }
    }

    pub fn learning_rate(&self, k: usize) -> f64 {
        self.initial_lr * libm::pow(self.decay_rate, k as f64 / self.horizon.max(1) as f64)
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { initial_lr: 1e-2, decay_rate: 1e-2, horizon: 4096, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    /// Number of applied updates.
    pub step: usize,
    /// Set when a gradient with NaN or infinity was rejected.
    pub diverged: bool,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self { config, first: zeros(), second: zeros(), step: 0, diverged: false }
    }

    /// One bias-corrected Adam update. Non-finite gradients leave parameters
    /// and moments untouched and set [`AdamState::diverged`]; the return value
    /// says whether the update was applied.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            self.diverged = true;
            return Ok(false);
        }
        let c = self.config;
        let lr = T::of(c.learning_rate(self.step));
        let t = (self.step + 1) as f64;
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.epsilon));
        let corr1 = T::of(1.0 - libm::pow(c.beta1, t));
        let corr2 = T::of(1.0 - libm::pow(c.beta2, t));
        let one = T::one();
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(true)
    }
}
