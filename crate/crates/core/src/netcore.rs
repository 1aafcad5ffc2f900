//! Dense feed-forward network with hand-written reverse-mode gradients.
//!
//! The network is a stack of [`Dense`] layers followed by a [`Head`]. The
//! binary head squashes a single logit through a sigmoid; the multi-class head
//! returns raw logits and leaves the softmax to the caller.
//!
//! Training code normally works on the pre-head logits
//! ([`Mlp::forward_cached`] + [`Mlp::backward_logits`]) because losses are
//! evaluated in logit space for numerical stability. [`Mlp::backward`] accepts
//! gradients with respect to the post-head outputs instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("backward called without a preceding forward pass")]
    BackwardWithoutForward,
    #[error("non-finite parameter after update (layer {layer}, index {index})")]
    NonFiniteParameter { layer: usize, index: usize },
    #[error("non-finite gradient (layer {layer}, index {index})")]
    NonFiniteGradient { layer: usize, index: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("learning rate must be finite and positive, got {0}")]
    BadLearningRate(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NetError> {
        if data.len() != rows * cols {
            return Err(NetError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
                context: "matrix buffer length",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NetError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NetError::DimensionMismatch {
                    expected: cols,
                    got: row.len(),
                    context: "row width",
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn col_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Selects the given rows (in order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // Subgradient 0 at the ReLU kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Output head of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Single logit squashed into (0, 1).
    SigmoidScalar,
    /// Raw logits, one per class.
    IdentityLogits,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One fully connected layer: `act(W x + b)` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn pre_activation(&self, input: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(input.rows(), self.out_dim);
        for r in 0..input.rows() {
            let x = input.row(r);
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let w = &self.weights[j * self.in_dim..(j + 1) * self.in_dim];
                let mut acc = self.bias[j];
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                *oj = acc;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    // inputs[l] is the input to layer l; pre[l] its pre-activation.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    logits: Matrix,
}

/// Dense MLP with a sigmoid or logit head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
    seed: u64,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.head == other.head && self.seed == other.seed
    }
}

impl Mlp {
    /// Builds a seeded network `input -> hidden... -> outputs`.
    ///
    /// Hidden layers use ReLU, the final layer is linear. A sigmoid head
    /// requires `outputs == 1`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        outputs: usize,
        head: Head,
        seed: u64,
    ) -> Result<Self, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Dense::glorot(w[0], w[1], act, &mut rng)
            })
            .collect();
        Self::from_layers(layers, head, seed)
    }

    pub fn from_layers(layers: Vec<Dense>, head: Head, seed: u64) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Invalid("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(NetError::Invalid(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(NetError::Invalid(format!("layer {i} parameter shapes disagree with dims")));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim != l.out_dim {
                    return Err(NetError::DimensionMismatch {
                        expected: l.out_dim,
                        got: next.in_dim,
                        context: "consecutive layer widths",
                    });
                }
            }
            if let Some(index) = l.weights.iter().chain(&l.bias).position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteParameter { layer: i, index });
            }
        }
        let out = layers.last().map(|l| l.out_dim).unwrap_or(0);
        if head == Head::SigmoidScalar && out != 1 {
            return Err(NetError::Invalid(format!(
                "sigmoid head needs a single output, network has {out}"
            )));
        }
        Ok(Self {
            layers,
            head,
            seed,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<(), NetError> {
        if batch.cols() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                got: batch.cols(),
                context: "batch columns vs first-layer input width",
            });
        }
        Ok(())
    }

    fn run(&self, batch: &Matrix, mut keep: Option<&mut (Vec<Matrix>, Vec<Matrix>)>) -> Matrix {
        let mut current = batch.clone();
        for layer in &self.layers {
            let pre = layer.pre_activation(&current);
            let mut post = pre.clone();
            if layer.activation != Activation::Identity {
                for v in post.as_mut_slice() {
                    *v = layer.activation.apply(*v);
                }
            }
            if let Some((inputs, pres)) = keep.as_deref_mut() {
                inputs.push(std::mem::replace(&mut current, post));
                pres.push(pre);
            } else {
                current = post;
            }
        }
        current
    }

    fn apply_head(&self, logits: Matrix) -> Matrix {
        match self.head {
            Head::SigmoidScalar => {
                let mut out = logits;
                for v in out.as_mut_slice() {
                    *v = sigmoid(*v);
                }
                out
            }
            Head::IdentityLogits => logits,
        }
    }

    /// Pre-head outputs (`B x outputs`).
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix, NetError> {
        self.check_input(batch)?;
        Ok(self.run(batch, None))
    }

    /// Post-head outputs: probabilities for the sigmoid head, raw logits otherwise.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix, NetError> {
        Ok(self.apply_head(self.logits(batch)?))
    }

    /// Forward pass that records activations for a subsequent backward pass.
    /// Returns the pre-head logits.
    pub fn forward_cached(&mut self, batch: &Matrix) -> Result<Matrix, NetError> {
        self.check_input(batch)?;
        let mut keep = (Vec::with_capacity(self.layers.len()), Vec::with_capacity(self.layers.len()));
        let logits = self.run(batch, Some(&mut keep));
        self.cache = Some(ForwardCache {
            inputs: keep.0,
            pre: keep.1,
            logits: logits.clone(),
        });
        Ok(logits)
    }

    /// Backpropagates gradients taken with respect to the post-head outputs.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<GradientBuffer, NetError> {
        let cache = self.cache.as_ref().ok_or(NetError::BackwardWithoutForward)?;
        let mut grad = upstream.clone();
        if self.head == Head::SigmoidScalar {
            if grad.shape() != cache.logits.shape() {
                return Err(NetError::DimensionMismatch {
                    expected: cache.logits.rows(),
                    got: grad.rows(),
                    context: "upstream gradient rows",
                });
            }
            for (g, z) in grad.as_mut_slice().iter_mut().zip(cache.logits.as_slice()) {
                let p = sigmoid(*z);
                *g *= p * (1.0 - p);
            }
        }
        self.backward_logits(&grad)
    }

    /// Backpropagates gradients taken with respect to the pre-head logits.
    /// Consumes the cached forward pass.
    pub fn backward_logits(&mut self, upstream: &Matrix) -> Result<GradientBuffer, NetError> {
        let cache = self.cache.take().ok_or(NetError::BackwardWithoutForward)?;
        if upstream.shape() != cache.logits.shape() {
            return Err(NetError::DimensionMismatch {
                expected: cache.logits.rows() * cache.logits.cols(),
                got: upstream.rows() * upstream.cols(),
                context: "upstream gradient shape",
            });
        }
        let mut grads = GradientBuffer::zeros_like(self);
        let mut delta = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            if layer.activation != Activation::Identity {
                for (d, z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= layer.activation.derivative(*z);
                }
            }
            let input = &cache.inputs[l];
            let (gw, gb) = &mut grads.layers[l];
            for r in 0..delta.rows() {
                let d = delta.row(r);
                let x = input.row(r);
                for (j, dj) in d.iter().enumerate() {
                    if *dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let row = &mut gw[j * layer.in_dim..(j + 1) * layer.in_dim];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += dj * xi;
                    }
                }
            }
            if l > 0 {
                let mut next = Matrix::zeros(delta.rows(), layer.in_dim);
                for r in 0..delta.rows() {
                    let d = delta.row(r).to_vec();
                    let out = next.row_mut(r);
                    for (j, dj) in d.iter().enumerate() {
                        if *dj == 0.0 {
                            continue;
                        }
                        let w = &layer.weights[j * layer.in_dim..(j + 1) * layer.in_dim];
                        for (o, wi) in out.iter_mut().zip(w) {
                            *o += dj * wi;
                        }
                    }
                }
                delta = next;
            }
        }
        grads.check_finite()?;
        Ok(grads)
    }

    /// All parameters flattened layer by layer (weights then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
                context: "flat parameter vector",
            });
        }
        let mut offset = 0;
        for (li, l) in self.layers.iter().enumerate() {
            let n = l.num_params();
            if let Some(index) = flat[offset..offset + n].iter().position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteParameter { layer: li, index });
            }
            offset += n;
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        self.cache = None;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut layer_dims = vec![self.input_dim()];
        layer_dims.extend(self.layers.iter().map(|l| l.out_dim));
        Checkpoint {
            header: CheckpointHeader {
                layer_dims,
                activations: self.layers.iter().map(|l| l.activation).collect(),
                head: self.head,
                seed: self.seed,
            },
            params: self.params(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let h = &ckpt.header;
        if h.layer_dims.len() < 2 || h.activations.len() + 1 != h.layer_dims.len() {
            return Err(NetError::Invalid(
                "checkpoint header: layer_dims must have one more entry than activations".into(),
            ));
        }
        let layers = h
            .layer_dims
            .windows(2)
            .zip(&h.activations)
            .map(|(w, &activation)| Dense {
                in_dim: w[0],
                out_dim: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        let mut mlp = Self::from_layers(layers, h.head, h.seed)?;
        mlp.set_params(&ckpt.params)?;
        Ok(mlp)
    }
}

/// Serialized network: JSON header plus a flat parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: Head,
    pub seed: u64,
}

/// Per-parameter gradient accumulators, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    /// `(weights, bias)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl GradientBuffer {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    fn check_finite(&self) -> Result<(), NetError> {
        for (layer, (w, b)) in self.layers.iter().enumerate() {
            if let Some(index) = w.iter().chain(b).position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient { layer, index });
            }
        }
        Ok(())
    }
}

/// `theta <- theta - lr * grad`, elementwise. The network is left untouched on error.
pub fn sgd_step(mlp: &mut Mlp, grads: &GradientBuffer, learning_rate: f64) -> Result<(), NetError> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(NetError::BadLearningRate(learning_rate));
    }
    let theta = mlp.params();
    let g = grads.flat();
    if g.len() != theta.len() {
        return Err(NetError::DimensionMismatch {
            expected: theta.len(),
            got: g.len(),
            context: "gradient buffer size",
        });
    }
    grads.check_finite()?;
    let updated: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - learning_rate * gi).collect();
    mlp.set_params(&updated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer holding its own state (moment estimates for Adam).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &GradientBuffer) -> Result<(), NetError> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(mlp, grads, self.learning_rate),
            OptimizerKind::Adam => {
                let g = grads.flat();
                if self.m.is_empty() {
                    self.m = vec![0.0; g.len()];
                    self.v = vec![0.0; g.len()];
                }
                self.t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(self.t);
                let bc2 = 1.0 - Self::BETA2.powi(self.t);
                let mut theta = mlp.params();
                for i in 0..g.len() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    theta[i] -= self.learning_rate * mhat / (vhat.sqrt() + Self::EPS);
                }
                mlp.set_params(&theta)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>, act: Activation) -> Dense {
        Dense {
            in_dim,
            out_dim,
            weights,
            bias,
            activation: act,
        }
    }

    #[test]
    fn identity_layer_sigmoid_of_zero() {
        let mlp = Mlp::from_layers(
            vec![layer(1, 1, vec![1.0], vec![0.0], Activation::Identity)],
            Head::SigmoidScalar,
            0,
        )
        .unwrap();
        let out = mlp.forward(&Matrix::column(&[0.0])).unwrap();
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let mut mlp = Mlp::new(3, &[4], 1, Head::SigmoidScalar, 1).unwrap();
        let zeros = vec![0.0; mlp.num_params()];
        mlp.set_params(&zeros).unwrap();
        let batch = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![10.0, 0.5, -7.0]]).unwrap();
        let out = mlp.forward(&batch).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        // 2 -> 2 (relu) -> 1 (identity), sigmoid head
        let w1 = vec![0.5, -0.25, 0.1, 0.3];
        let b1 = vec![0.05, -0.2];
        let w2 = vec![0.7, -1.1];
        let b2 = vec![0.15];
        let mlp = Mlp::from_layers(
            vec![
                layer(2, 2, w1, b1, Activation::Relu),
                layer(2, 1, w2, b2, Activation::Identity),
            ],
            Head::SigmoidScalar,
            0,
        )
        .unwrap();
        let x = [0.8, -0.4];
        // straight-line arithmetic
        let h0 = (0.5 * 0.8 + -0.25 * -0.4 + 0.05_f64).max(0.0);
        let h1 = (0.1 * 0.8 + 0.3 * -0.4 - 0.2_f64).max(0.0);
        let z = 0.7 * h0 + -1.1 * h1 + 0.15;
        let expected = 1.0 / (1.0 + (-z).exp());
        let out = mlp.forward(&Matrix::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        assert!((out.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::new(3, &[4], 1, Head::SigmoidScalar, 1).unwrap();
        let err = mlp.forward(&Matrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, NetError::DimensionMismatch { .. }));
    }

    #[test]
    fn backward_requires_forward() {
        let mut mlp = Mlp::new(2, &[3], 1, Head::SigmoidScalar, 1).unwrap();
        assert_eq!(
            mlp.backward(&Matrix::zeros(1, 1)).unwrap_err(),
            NetError::BackwardWithoutForward
        );
        mlp.forward_cached(&Matrix::zeros(1, 2)).unwrap();
        mlp.backward(&Matrix::zeros(1, 1)).unwrap();
        // cache is consumed
        assert_eq!(
            mlp.backward(&Matrix::zeros(1, 1)).unwrap_err(),
            NetError::BackwardWithoutForward
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut mlp = Mlp::new(3, &[5, 4], 1, Head::SigmoidScalar, 7).unwrap();
        let batch = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5]]).unwrap();
        mlp.forward_cached(&batch).unwrap();
        let g = mlp.backward(&Matrix::zeros(2, 1)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_neuron_squared_error() {
        let w = [0.3, -0.6];
        let x = [1.5, 2.0];
        let y = 0.25;
        let mut mlp = Mlp::from_layers(
            vec![layer(2, 1, w.to_vec(), vec![0.0], Activation::Identity)],
            Head::IdentityLogits,
            0,
        )
        .unwrap();
        let out = mlp.forward_cached(&Matrix::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        let residual = out.get(0, 0) - y;
        let g = mlp.backward(&Matrix::column(&[2.0 * residual])).unwrap();
        let (gw, gb) = &g.layers[0];
        let wx = w[0] * x[0] + w[1] * x[1];
        for i in 0..2 {
            assert!((gw[i] - 2.0 * (wx - y) * x[i]).abs() < 1e-15);
        }
        assert!((gb[0] - 2.0 * (wx - y)).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_scalar_cases() {
        let mut mlp = Mlp::from_layers(
            vec![layer(1, 1, vec![1.0], vec![0.0], Activation::Identity)],
            Head::SigmoidScalar,
            0,
        )
        .unwrap();
        let g = GradientBuffer {
            layers: vec![(vec![0.5], vec![0.0])],
        };
        sgd_step(&mut mlp, &g, 0.1).unwrap();
        assert_eq!(mlp.params(), vec![0.95, 0.0]);
        let zero = GradientBuffer::zeros_like(&mlp);
        sgd_step(&mut mlp, &zero, 0.1).unwrap();
        assert_eq!(mlp.params(), vec![0.95, 0.0]);
    }

    #[test]
    fn sgd_step_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mlp = Mlp::new(4, &[6], 3, Head::IdentityLogits, 3).unwrap();
        let before = mlp.params();
        let mut g = GradientBuffer::zeros_like(&mlp);
        for (w, b) in &mut g.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        sgd_step(&mut mlp, &g, 0.03).unwrap();
        for ((t0, gi), t1) in before.iter().zip(g.flat()).zip(mlp.params()) {
            assert_eq!(t1, t0 - 0.03 * gi);
        }
    }

    #[test]
    fn sgd_step_rejects_non_finite() {
        let mut mlp = Mlp::from_layers(
            vec![layer(1, 1, vec![1.0], vec![0.0], Activation::Identity)],
            Head::SigmoidScalar,
            0,
        )
        .unwrap();
        let g = GradientBuffer {
            layers: vec![(vec![f64::MAX], vec![0.0])],
        };
        assert!(matches!(
            sgd_step(&mut mlp, &g, 1e10),
            Err(NetError::NonFiniteParameter { .. })
        ));
        assert_eq!(mlp.params(), vec![1.0, 0.0]);
    }

    #[test]
    fn sigmoid_head_chain_matches_logit_backward() {
        let mut mlp = Mlp::new(2, &[3], 1, Head::SigmoidScalar, 5).unwrap();
        let batch = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.4]]).unwrap();
        let logits = mlp.forward_cached(&batch).unwrap();
        let up = Matrix::column(&[0.7, -1.3]);
        let g_out = mlp.backward(&up).unwrap();
        mlp.forward_cached(&batch).unwrap();
        let chained: Vec<f64> = up
            .as_slice()
            .iter()
            .zip(logits.as_slice())
            .map(|(u, z)| u * sigmoid(*z) * (1.0 - sigmoid(*z)))
            .collect();
        let g_logit = mlp.backward_logits(&Matrix::column(&chained)).unwrap();
        assert_eq!(g_out, g_logit);
    }

    #[test]
    fn relu_positive_homogeneity() {
        let mut mlp = Mlp::new(3, &[8, 8], 2, Head::IdentityLogits, 9).unwrap();
        let n = mlp.num_params();
        let mut p = mlp.params();
        // zero every bias
        let mut offset = 0;
        for l in mlp.layers() {
            offset += l.weights.len();
            for v in &mut p[offset..offset + l.bias.len()] {
                *v = 0.0;
            }
            offset += l.bias.len();
        }
        assert_eq!(offset, n);
        mlp.set_params(&p).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, -0.5, 1.0]]).unwrap();
        let cx = Matrix::from_rows(&[vec![0.2 * 3.0, -0.5 * 3.0, 1.0 * 3.0]]).unwrap();
        let a = mlp.logits(&x).unwrap();
        let b = mlp.logits(&cx).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((3.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mlp = Mlp::new(5, &[32, 32], 4, Head::IdentityLogits, 42).unwrap();
        let json = serde_json::to_string(&mlp.to_checkpoint()).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = Mlp::from_checkpoint(&back).unwrap();
        assert_eq!(restored, mlp);
    }

    #[test]
    fn glorot_bounds_and_seed_determinism() {
        let a = Mlp::new(4, &[32], 1, Head::SigmoidScalar, 3).unwrap();
        let b = Mlp::new(4, &[32], 1, Head::SigmoidScalar, 3).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 36.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= limit));
        assert!(a.layers()[0].bias.iter().all(|&v| v == 0.0));
    }
}
