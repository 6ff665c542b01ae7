//! A small deterministic neural network stack: dense layers, batch
//! normalization without affine parameters, ReLU, hand-written backward
//! passes and RMSprop with weight decay.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer `y = Wᵀx + b` with `W: d_in x d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if w.cols() != b.len() {
            return Err(Error::dim(format!(
                "weight has {} outputs but bias has {}",
                w.cols(),
                b.len()
            )));
        }
        Ok(DenseLayer { w, b })
    }

    /// He-uniform weights `U(-√(6/d_in), √(6/d_in))`, zero bias.
    pub fn he_uniform(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / d_in.max(1) as f64).sqrt();
        let w = Matrix::from_fn(d_in, d_out, |_, _| rng.gen_range(-limit..limit));
        DenseLayer {
            w,
            b: vec![0.0; d_out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(Error::dim(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim(),
                x.rows()
            )));
        }
        let mut y = self.w.t_matmul(x);
        y.add_row_vector(&self.b);
        Ok(y)
    }

    /// Returns parameter gradients and, if requested, `dL/dx = W dY`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, need_dx: bool) -> (DenseGrads, Option<Matrix>) {
        let w = x.matmul_t(dy);
        let b = row_sums(dy);
        let dx = need_dx.then(|| self.w.matmul(dy));
        (DenseGrads { w, b }, dx)
    }
}

pub(crate) fn row_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.rows()];
    for j in 0..m.cols() {
        for (a, v) in s.iter_mut().zip(m.col(j)) {
            *a += v;
        }
    }
    s
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization without learnable scale or shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes with batch statistics (biased variance) and updates the
    /// running estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, BatchNormCache)> {
        let (d, n) = x.shape();
        if d != self.features() {
            return Err(Error::dim(format!(
                "batch norm over {} features got {d}",
                self.features()
            )));
        }
        if n < 2 {
            return Err(Error::invalid("batch norm in train mode needs a batch of at least 2"));
        }
        let mean = x.row_means();
        let mut var = vec![0.0; d];
        for j in 0..n {
            for ((v, &xv), &m) in var.iter_mut().zip(x.col(j)).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut normalized = x.sub_row_vector(&mean);
        for j in 0..n {
            for (v, s) in normalized.col_mut(j).iter_mut().zip(&inv_std) {
                *v *= s;
            }
        }
        let unbias = n as f64 / (n as f64 - 1.0);
        for i in 0..d {
            self.running_mean[i] = (1.0 - self.momentum) * self.running_mean[i] + self.momentum * mean[i];
            self.running_var[i] =
                (1.0 - self.momentum) * self.running_var[i] + self.momentum * var[i] * unbias;
        }
        Ok((
            normalized.clone(),
            BatchNormCache {
                normalized,
                inv_std,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.features() {
            return Err(Error::dim(format!(
                "batch norm over {} features got {}",
                self.features(),
                x.rows()
            )));
        }
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let mut y = x.sub_row_vector(&self.running_mean);
        for j in 0..y.cols() {
            for (v, s) in y.col_mut(j).iter_mut().zip(&inv_std) {
                *v *= s;
            }
        }
        Ok(y)
    }

    /// `dx = inv_std/N · (N·dy - Σdy - x̂·Σ(dy·x̂))`.
    pub fn backward(cache: &BatchNormCache, dy: &Matrix) -> Matrix {
        let (d, n) = dy.shape();
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for j in 0..n {
            for i in 0..d {
                let g = dy[(i, j)];
                sum_dy[i] += g;
                sum_dy_xhat[i] += g * cache.normalized[(i, j)];
            }
        }
        let nf = n as f64;
        Matrix::from_fn(d, n, |i, j| {
            cache.inv_std[i] / nf
                * (nf * dy[(i, j)] - sum_dy[i] - cache.normalized[(i, j)] * sum_dy_xhat[i])
        })
    }
}

/// One dense layer, optionally followed by batch normalization, then an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub dense: DenseLayer,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    pub layers: Vec<MlpLayer>,
    pub seed: u64,
}

/// Everything the backward pass needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Matrix>,
    norms: Vec<Option<BatchNormCache>>,
    outputs: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
}

/// Layout of an [`MlpNetwork`] built by [`init_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input dimension followed by every layer's output dimension.
    pub sizes: Vec<usize>,
    /// Batch norm after the hidden layers.
    pub hidden_norm: bool,
    /// Batch norm after the last layer.
    pub output_norm: bool,
    /// Activation after the last layer; hidden layers always use ReLU.
    pub output_activation: Activation,
}

impl MlpSpec {
    /// Hidden layers `dense → BN → ReLU`, last layer `dense → BN`.
    pub fn standard(sizes: &[usize]) -> Self {
        MlpSpec {
            sizes: sizes.to_vec(),
            hidden_norm: true,
            output_norm: true,
            output_activation: Activation::Identity,
        }
    }
}

/// Builds a network with He-uniform weights and zero biases drawn from `rng`.
pub fn init_network_with(spec: &MlpSpec, seed: u64, rng: &mut impl Rng) -> Result<MlpNetwork> {
    if spec.sizes.len() < 2 || spec.sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid(format!(
            "layer sizes must list at least an input and an output, all positive: {:?}",
            spec.sizes
        )));
    }
    let count = spec.sizes.len() - 1;
    let layers = spec
        .sizes
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 1 == count;
            let use_norm = if last { spec.output_norm } else { spec.hidden_norm };
            MlpLayer {
                dense: DenseLayer::he_uniform(w[0], w[1], rng),
                norm: use_norm.then(|| BatchNorm::new(w[1])),
                activation: if last {
                    spec.output_activation
                } else {
                    Activation::Relu
                },
            }
        })
        .collect();
    Ok(MlpNetwork { layers, seed })
}

/// [`init_network_with`] using a generator seeded from `seed`.
pub fn init_network(spec: &MlpSpec, seed: u64) -> Result<MlpNetwork> {
    let mut rng = crate::rng::stream(seed, 0);
    init_network_with(spec, seed, &mut rng)
}

impl MlpNetwork {
    pub fn empty() -> Self {
        MlpNetwork {
            layers: Vec::new(),
            seed: 0,
        }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.dense.in_dim())
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.dense.out_dim())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.dense.param_count()).sum()
    }

    fn has_norm(&self) -> bool {
        self.layers.iter().any(|l| l.norm.is_some())
    }

    /// Forward pass recording a tape. In train mode batch norm uses batch
    /// statistics and updates its running estimates.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, MlpTape)> {
        if mode == Mode::Train && self.has_norm() && x.cols() < 2 {
            return Err(Error::invalid(
                "train-mode forward with batch norm needs at least 2 samples",
            ));
        }
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(self.layers.len()),
            norms: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for layer in &mut self.layers {
            let pre = layer.dense.forward(&h)?;
            let (normed, cache) = match (&mut layer.norm, mode) {
                (Some(bn), Mode::Train) => {
                    let (y, c) = bn.forward_train(&pre)?;
                    (y, Some(c))
                }
                (Some(bn), Mode::Eval) => (bn.forward_eval(&pre)?, None),
                (None, _) => (pre, None),
            };
            let out = activate(normed, layer.activation);
            tape.inputs.push(std::mem::replace(&mut h, out.clone()));
            tape.norms.push(cache);
            tape.outputs.push(out);
        }
        Ok((h, tape))
    }

    /// Eval-mode forward without a tape.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            let mut y = layer.dense.forward(&h)?;
            if let Some(bn) = &layer.norm {
                y = bn.forward_eval(&y)?;
            }
            h = activate(y, layer.activation);
        }
        Ok(h)
    }

    /// Backpropagates `dy` through a tape from [`MlpNetwork::forward`].
    pub fn backward(
        &self,
        tape: &MlpTape,
        dy: &Matrix,
        need_input_grad: bool,
    ) -> Result<(MlpGrads, Option<Matrix>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::dim("tape does not match network depth"));
        }
        if self.layers.is_empty() {
            return Ok((MlpGrads { layers: vec![] }, need_input_grad.then(|| dy.clone())));
        }
        let out = tape.outputs.last().expect("non-empty");
        if out.shape() != dy.shape() {
            return Err(Error::dim(format!(
                "output gradient is {}x{}, network output is {}x{}",
                dy.rows(),
                dy.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let out = &tape.outputs[i];
                for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            if layer.norm.is_some() {
                match &tape.norms[i] {
                    Some(cache) => g = BatchNorm::backward(cache, &g),
                    None => {
                        return Err(Error::invalid(
                            "backward needs a tape recorded in train mode",
                        ))
                    }
                }
            }
            let need_dx = i > 0 || need_input_grad;
            let (lg, dx) = layer.dense.backward(&tape.inputs[i], &g, need_dx);
            grads.push(lg);
            if let Some(dx) = dx {
                g = dx;
            }
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, need_input_grad.then_some(g)))
    }

    /// Applies one optimizer step to every layer; parameters are named
    /// `{prefix}.{layer}.w` and `{prefix}.{layer}.b`.
    pub fn apply_gradients(&mut self, grads: &MlpGrads, prefix: &str, opt: &mut Rmsprop) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("gradient does not match network depth"));
        }
        for (i, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            opt.step(&format!("{prefix}.{i}.w"), layer.dense.w.data_mut(), g.w.data())?;
            opt.step(&format!("{prefix}.{i}.b"), &mut layer.dense.b, &g.b)?;
        }
        Ok(())
    }
}

fn activate(mut m: Matrix, activation: Activation) -> Matrix {
    if activation == Activation::Relu {
        m.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
    }
    m
}

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// RMSprop with coupled weight decay:
/// `g' = g + wd·θ; s ← α·s + (1-α)·g'²; θ ← θ - lr·g'/(√s + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rmsprop {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    accumulators: BTreeMap<String, Vec<f64>>,
}

impl Rmsprop {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Rmsprop {
            lr,
            alpha: RMSPROP_ALPHA,
            eps: RMSPROP_EPS,
            weight_decay,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accumulators.get(name).map(Vec::as_slice)
    }

    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::dim(format!(
                "parameter {name} has {} entries, gradient {}",
                param.len(),
                grad.len()
            )));
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} at index {pos}")));
        }
        let acc = self
            .accumulators
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        if acc.len() != param.len() {
            return Err(Error::dim(format!("parameter {name} changed size")));
        }
        let (lr, alpha, eps, wd) = (self.lr, self.alpha, self.eps, self.weight_decay);
        for ((p, &g), s) in param.iter_mut().zip(grad).zip(acc.iter_mut()) {
            let g = g + wd * *p;
            *s = alpha * *s + (1.0 - alpha) * g * g;
            *p -= lr * g / (s.sqrt() + eps);
        }
        Ok(())
    }
}
