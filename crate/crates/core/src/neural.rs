//! Feed-forward network with point or distributional head, trained by
//! backpropagation and Adam.
//!
//! Hidden layers compute `H_i = a_i(H_{i-1} W_i + b_i)`; the head is affine.
//! A distributional head emits `S * P` raw values laid out hour-major with the
//! parameter index fastest: column `h * P + p` feeds parameter `p` of hour `h`.
//!
//! L1 penalties follow Keras semantics: kernel penalties are `lambda * sum|W|`,
//! activity penalties are `lambda * sum|H| / batch_rows`. The subgradient of
//! `|w|` at zero is taken as zero.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{link_unchecked, Family};
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};
use crate::special::{sigmoid, softplus};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
}

/// Training failure; carries the history recorded up to the failure.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        history: History,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, NetError>;

// ---------------------------------------------------------------------------
// Activations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
    Softmax,
    Softplus,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Elu,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Softmax,
        Activation::Softplus,
        Activation::Tanh,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            "softplus" => Ok(Activation::Softplus),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(NetError::UnknownActivation(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
    }

    /// Applies the activation to one layer row in place. Softmax normalizes
    /// across the row; the others act elementwise.
    pub fn apply_row<T: Scalar>(self, row: &mut [T]) {
        match self {
            Activation::Softmax => {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            _ => row.iter_mut().for_each(|v| *v = activation(self, *v)),
        }
    }

    /// Maps the gradient with respect to a layer output row into the gradient
    /// with respect to its pre-activation row.
    fn backward_row<T: Scalar>(self, pre: &[T], post: &[T], grad: &mut [T]) {
        match self {
            Activation::Softmax => {
                let dot: T = post.iter().zip(grad.iter()).map(|(&s, &g)| s * g).sum();
                for (g, &s) in grad.iter_mut().zip(post) {
                    *g = s * (*g - dot);
                }
            }
            Activation::Sigmoid => {
                for (g, &s) in grad.iter_mut().zip(post) {
                    *g *= s * (T::one() - s);
                }
            }
            Activation::Tanh => {
                for (g, &t) in grad.iter_mut().zip(post) {
                    *g *= T::one() - t * t;
                }
            }
            _ => {
                for (g, &z) in grad.iter_mut().zip(pre) {
                    *g *= activation_grad(self, z);
                }
            }
        }
    }
}

/// Elementwise activation value. For softmax this is the single-unit case (1).
pub fn activation<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Relu => x.max(T::zero()),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softmax => T::one(),
        Activation::Softplus => softplus(x),
        Activation::Tanh => x.tanh(),
    }
}

/// Elementwise derivative. Softmax couples a whole row; its elementwise
/// derivative here is that of a single unit (0).
pub fn activation_grad<T: Scalar>(act: Activation, x: T) -> T {
    match act {
        Activation::Elu => {
            if x > T::zero() {
                T::one()
            } else {
                x.exp()
            }
        }
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
        Activation::Softmax => T::zero(),
        Activation::Softplus => sigmoid(x),
        Activation::Tanh => {
            let t = x.tanh();
            T::one() - t * t
        }
    }
}

// ---------------------------------------------------------------------------
// Network

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "family", rename_all = "lowercase")]
pub enum HeadKind {
    Point,
    Distributional(Family),
}

impl HeadKind {
    /// Raw outputs per target (P); 1 for a point head.
    pub fn params_per_output(self) -> usize {
        match self {
            HeadKind::Point => 1,
            HeadKind::Distributional(f) => f.n_params(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Layer<T: Scalar> {
    /// `fan_in x fan_out`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    /// `None` for the affine head.
    pub activation: Option<Activation>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HiddenReg<T: Scalar> {
    /// Penalty on the layer output `H_i`.
    pub activity: Option<T>,
    /// Penalty on the weights feeding the layer.
    pub kernel: Option<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct HeadReg<T: Scalar> {
    pub kernel: Option<T>,
    pub bias: Option<T>,
}

/// L1 rates: one entry per hidden layer and one per head parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RegConfig<T: Scalar> {
    pub hidden: Vec<HiddenReg<T>>,
    pub head: Vec<HeadReg<T>>,
}

impl<T: Scalar> RegConfig<T> {
    pub fn none(hidden_layers: usize, head_params: usize) -> Self {
        Self {
            hidden: vec![HiddenReg::default(); hidden_layers],
            head: vec![HeadReg::default(); head_params],
        }
    }

    fn validate(&self) -> Result<()> {
        let rates = self
            .hidden
            .iter()
            .flat_map(|h| [h.activity, h.kernel])
            .chain(self.head.iter().flat_map(|h| [h.kernel, h.bias]))
            .flatten();
        for r in rates {
            if !(r >= T::zero()) || !r.is_finite() {
                return Err(NetError::Config(format!(
                    "L1 rate {r} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Network<T: Scalar> {
    pub input_dim: usize,
    pub hidden: Vec<Layer<T>>,
    pub head: Layer<T>,
    pub head_kind: HeadKind,
    /// Number of modelled targets (S).
    pub outputs: usize,
    pub dropout: T,
    pub reg: RegConfig<T>,
}

/// Architecture description passed to [`init_network`].
#[derive(Clone, Debug)]
pub struct NetSpec<T: Scalar> {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub head: HeadKind,
    pub outputs: usize,
    pub dropout: T,
    pub reg: RegConfig<T>,
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_network<T: Scalar>(spec: NetSpec<T>, seed: u64) -> Result<Network<T>> {
    if spec.input_dim == 0 || spec.outputs == 0 || spec.hidden.iter().any(|(n, _)| *n == 0) {
        return Err(NetError::Config("all layer widths must be positive".into()));
    }
    if !(spec.dropout >= T::zero() && spec.dropout < T::one()) {
        return Err(NetError::Config(format!(
            "dropout rate {} outside [0, 1)",
            spec.dropout
        )));
    }
    let head_params = spec.head.params_per_output();
    if spec.reg.hidden.len() != spec.hidden.len() || spec.reg.head.len() != head_params {
        return Err(NetError::Config(format!(
            "regularization expects {} hidden and {} head entries, got {} and {}",
            spec.hidden.len(),
            head_params,
            spec.reg.hidden.len(),
            spec.reg.head.len()
        )));
    }
    spec.reg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = spec.input_dim;
    let mut hidden = Vec::with_capacity(spec.hidden.len());
    for &(width, act) in &spec.hidden {
        hidden.push(Layer {
            weights: glorot(fan_in, width, &mut rng),
            bias: vec![T::zero(); width],
            activation: Some(act),
        });
        fan_in = width;
    }
    let head_width = spec.outputs * head_params;
    let head = Layer {
        weights: glorot(fan_in, head_width, &mut rng),
        bias: vec![T::zero(); head_width],
        activation: None,
    };
    Ok(Network {
        input_dim: spec.input_dim,
        hidden,
        head,
        head_kind: spec.head,
        outputs: spec.outputs,
        dropout: spec.dropout,
        reg: spec.reg,
    })
}

/// Half-width of the Glorot-uniform interval.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix<T> {
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| lit(rng.gen_range(-bound..bound)))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data)
}

/// Intermediate values kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar> {
    /// Input after dropout (`H_0`).
    pub input: Matrix<T>,
    pub pre: Vec<Matrix<T>>,
    pub post: Vec<Matrix<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "family", rename_all = "lowercase")]
pub enum Loss {
    Mae,
    Nll(Family),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T> {
    pub data: T,
    pub penalty: T,
    pub total: T,
}

/// Gradients with the same layout as the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub hidden: Vec<(Matrix<T>, Vec<T>)>,
    pub head: (Matrix<T>, Vec<T>),
}

impl<T: Scalar> Gradients<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for (w, b) in &self.hidden {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out.push(self.head.0.as_slice());
        out.push(self.head.1.as_slice());
        out
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn l1<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

fn add_bias<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Loss summed over the `S` targets of one row; when `grad` is given it
/// receives the (unscaled) gradient with respect to the raw outputs.
pub(crate) fn head_loss_row<T: Scalar>(
    loss: Loss,
    raw: &[T],
    y: &[T],
    grad: Option<&mut [T]>,
) -> Option<T> {
    match loss {
        Loss::Mae => {
            let mut acc = T::zero();
            match grad {
                Some(g) => {
                    for ((gi, &o), &t) in g.iter_mut().zip(raw).zip(y) {
                        acc += (o - t).abs();
                        *gi = sign(o - t);
                    }
                }
                None => {
                    for (&o, &t) in raw.iter().zip(y) {
                        acc += (o - t).abs();
                    }
                }
            }
            Some(acc)
        }
        Loss::Nll(family) => {
            let p = family.n_params();
            let mut acc = T::zero();
            let mut grad = grad;
            for (h, &target) in y.iter().enumerate() {
                let r = &raw[h * p..(h + 1) * p];
                if r.iter().any(|v| !v.is_finite()) {
                    return None;
                }
                let dist = link_unchecked(r, family);
                acc -= dist.logpdf(target).ok()?;
                if let Some(g) = grad.as_deref_mut() {
                    let d = dist.logpdf_grad_raw(r, target).ok()?;
                    for (gi, di) in g[h * p..(h + 1) * p].iter_mut().zip(d) {
                        *gi = -di;
                    }
                }
            }
            acc.is_finite().then_some(acc)
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn head_width(&self) -> usize {
        self.head.bias.len()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(NetError::Shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass. Dropout on the input is applied only when an RNG is
    /// supplied (training mode), with inverted `1 / (1 - rate)` scaling.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Matrix<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut input = x.clone();
        if let Some(rng) = dropout_rng {
            if self.dropout > T::zero() {
                let rate = self.dropout.to_f64_lossy();
                let keep = T::one() / (T::one() - self.dropout);
                for v in input.as_mut_slice() {
                    if rng.gen::<f64>() < rate {
                        *v = T::zero();
                    } else {
                        *v *= keep;
                    }
                }
            }
        }
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let prev = post.last().unwrap_or(&input);
            let mut z = prev.matmul(&layer.weights);
            add_bias(&mut z, &layer.bias);
            let mut h = z.clone();
            let act = layer.activation.expect("hidden layers carry an activation");
            for i in 0..h.rows() {
                act.apply_row(h.row_mut(i));
            }
            pre.push(z);
            post.push(h);
        }
        let last = post.last().unwrap_or(&input);
        let mut out = last.matmul(&self.head.weights);
        add_bias(&mut out, &self.head.bias);
        Ok((out, ForwardCache { input, pre, post }))
    }

    /// Evaluation-mode raw outputs.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x, None)?.0)
    }

    fn check_targets(&self, x: &Matrix<T>, y: &Matrix<T>, loss: Loss) -> Result<()> {
        if y.rows() != x.rows() || y.cols() != self.outputs {
            return Err(NetError::Shape(format!(
                "targets {}x{} do not match {} rows x {} outputs",
                y.rows(),
                y.cols(),
                x.rows(),
                self.outputs
            )));
        }
        let compatible = match (loss, self.head_kind) {
            (Loss::Mae, HeadKind::Point) => true,
            (Loss::Nll(a), HeadKind::Distributional(b)) => a == b,
            _ => false,
        };
        if !compatible {
            return Err(NetError::Config(format!(
                "loss {loss:?} incompatible with head {:?}",
                self.head_kind
            )));
        }
        if x.rows() == 0 {
            return Err(NetError::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Mean data loss in evaluation mode (no penalties, no dropout).
    pub fn data_loss(&self, x: &Matrix<T>, y: &Matrix<T>, loss: Loss) -> Result<T> {
        self.check_targets(x, y, loss)?;
        let out = self.predict(x)?;
        let mut acc = T::zero();
        for i in 0..out.rows() {
            acc += head_loss_row(loss, out.row(i), y.row(i), None)
                .ok_or(NetError::NonFinite { epoch: 0, batch: 0 })?;
        }
        Ok(acc / T::from_usize_lossy(out.rows() * self.outputs))
    }

    /// Sum of the kernel and bias L1 terms (activity terms need a batch).
    pub fn weight_penalty(&self) -> T {
        let mut acc = T::zero();
        for (layer, reg) in self.hidden.iter().zip(&self.reg.hidden) {
            if let Some(l) = reg.kernel {
                acc += l * l1(layer.weights.as_slice());
            }
        }
        let p = self.head_kind.params_per_output();
        for (c, &b) in self.head.bias.iter().enumerate() {
            let reg = &self.reg.head[c % p];
            if let Some(l) = reg.bias {
                acc += l * b.abs();
            }
            if let Some(l) = reg.kernel {
                for r in 0..self.head.weights.rows() {
                    acc += l * self.head.weights[(r, c)].abs();
                }
            }
        }
        acc
    }

    /// Regularized loss on a batch and its gradient for every weight and bias.
    pub fn loss_and_grads(
        &self,
        x: &Matrix<T>,
        y: &Matrix<T>,
        loss: Loss,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(LossValue<T>, Gradients<T>)> {
        self.check_targets(x, y, loss)?;
        let (out, cache) = self.forward(x, dropout_rng)?;
        let rows = out.rows();
        let scale = T::one() / T::from_usize_lossy(rows * self.outputs);

        let mut d_out = Matrix::zeros(rows, out.cols());
        let mut data = T::zero();
        for i in 0..rows {
            data += head_loss_row(loss, out.row(i), y.row(i), Some(d_out.row_mut(i)))
                .ok_or(NetError::NonFinite { epoch: 0, batch: 0 })?;
        }
        data *= scale;
        d_out.map_inplace(|g| g * scale);

        let mut penalty = T::zero();
        let last = cache.post.last().unwrap_or(&cache.input);
        let mut head_w = last.t_matmul(&d_out);
        let mut head_b = column_sums(&d_out);
        let p = self.head_kind.params_per_output();
        for c in 0..self.head_width() {
            let reg = &self.reg.head[c % p];
            if let Some(l) = reg.kernel {
                for r in 0..head_w.rows() {
                    let w = self.head.weights[(r, c)];
                    penalty += l * w.abs();
                    head_w[(r, c)] += l * sign(w);
                }
            }
            if let Some(l) = reg.bias {
                let b = self.head.bias[c];
                penalty += l * b.abs();
                head_b[c] += l * sign(b);
            }
        }

        let mut hidden_grads = Vec::with_capacity(self.hidden.len());
        let mut d_h = d_out.matmul_t(&self.head.weights);
        let inv_rows = T::one() / T::from_usize_lossy(rows);
        for i in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[i];
            let reg = &self.reg.hidden[i];
            let h = &cache.post[i];
            if let Some(l) = reg.activity {
                penalty += l * l1(h.as_slice()) * inv_rows;
                for (g, &v) in d_h.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *g += l * sign(v) * inv_rows;
                }
            }
            let act = layer.activation.expect("hidden activation");
            let z = &cache.pre[i];
            for r in 0..rows {
                act.backward_row(z.row(r), h.row(r), d_h.row_mut(r));
            }
            let prev = if i == 0 {
                &cache.input
            } else {
                &cache.post[i - 1]
            };
            let mut dw = prev.t_matmul(&d_h);
            let db = column_sums(&d_h);
            if let Some(l) = reg.kernel {
                penalty += l * l1(layer.weights.as_slice());
                for (g, &w) in dw.as_mut_slice().iter_mut().zip(layer.weights.as_slice()) {
                    *g += l * sign(w);
                }
            }
            if i > 0 {
                d_h = d_h.matmul_t(&layer.weights);
            }
            hidden_grads.push((dw, db));
        }
        hidden_grads.reverse();
        let value = LossValue {
            data,
            penalty,
            total: data + penalty,
        };
        Ok((
            value,
            Gradients {
                hidden: hidden_grads,
                head: (head_w, head_b),
            },
        ))
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 2);
        for layer in &mut self.hidden {
            out.push(layer.weights.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
        }
        out.push(self.head.weights.as_mut_slice());
        out.push(self.head.bias.as_mut_slice());
        out
    }

    /// All parameters flattened in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for layer in self.hidden.iter().chain(std::iter::once(&self.head)) {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    /// Weights of the head feeding distribution parameter `p` (columns
    /// `p, p + P, p + 2P, ...`), as a `fan_in x S` matrix.
    pub fn head_kernel_slice(&self, p: usize) -> Matrix<T> {
        let stride = self.head_kind.params_per_output();
        let w = &self.head.weights;
        let mut out = Matrix::zeros(w.rows(), self.outputs);
        for r in 0..w.rows() {
            for h in 0..self.outputs {
                out[(r, h)] = w[(r, h * stride + p)];
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(&NetworkDocument {
            format_version: NETWORK_FORMAT_VERSION,
            network: self.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument<T> = serde_json::from_str(text)
            .map_err(|e| NetError::Config(format!("network json: {e}")))?;
        if doc.format_version != NETWORK_FORMAT_VERSION {
            return Err(NetError::Config(format!(
                "unsupported network format version {}",
                doc.format_version
            )));
        }
        Ok(doc.network)
    }
}

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct NetworkDocument<T: Scalar> {
    format_version: u32,
    network: Network<T>,
}

// ---------------------------------------------------------------------------
// Adam

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for every parameter of a network.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>) -> Self {
        let mut shapes = Vec::new();
        for layer in net.hidden.iter().chain(std::iter::once(&net.head)) {
            shapes.push(layer.weights.as_slice().len());
            shapes.push(layer.bias.len());
        }
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn update(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: T) {
        self.step += 1;
        let b1: T = lit(ADAM_BETA1);
        let b2: T = lit(ADAM_BETA2);
        let eps: T = lit(ADAM_EPSILON);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (((param, grad), m), v) in net
            .params_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), mi), vi) in param
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 1500,
            patience: 50,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(NetError::Config("batch_size must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(NetError::Config(
                "validation_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NetError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were restored.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded shuffle into training and validation row indices.
pub fn split_indices(
    n: usize,
    validation_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val =
        ((n as f64 * validation_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Mini-batch Adam with early stopping on the validation data loss; the
/// weights of the best validation epoch are restored.
pub fn train<T: Scalar>(
    net: Network<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg: &TrainConfig,
    loss: Loss,
) -> std::result::Result<(Network<T>, History), TrainError> {
    cfg.validate()?;
    net.check_targets(x, y, loss)?;
    let mut history = History::default();
    if cfg.max_epochs == 0 {
        return Ok((net, history));
    }
    let min_rows = (2.0 / cfg.validation_fraction).ceil() as usize;
    if x.rows() < min_rows {
        return Err(NetError::Config(format!(
            "need at least {min_rows} rows to train, got {}",
            x.rows()
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) = split_indices(x.rows(), cfg.validation_fraction, &mut rng);
    let x_val = x.select_rows(&val_idx);
    let y_val = y.select_rows(&val_idx);
    let lr: T = lit(cfg.learning_rate);

    let mut net = net;
    let mut adam = Adam::new(&net);
    let mut best = (f64::INFINITY, net.clone(), None);
    let mut wait = 0usize;
    for epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let xb = x.select_rows(chunk);
            let yb = y.select_rows(chunk);
            let step = net.loss_and_grads(&xb, &yb, loss, Some(&mut rng));
            let (value, grads) = match step {
                Ok(v) if v.0.total.is_finite() => v,
                Ok(_) | Err(NetError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: b,
                        history,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            adam.update(&mut net, &grads, lr);
            sum += value.total.to_f64_lossy();
            batches += 1;
        }
        let val = match net.data_loss(&x_val, &y_val, loss) {
            Ok(v) if v.is_finite() => v.to_f64_lossy(),
            Ok(_) | Err(NetError::NonFinite { .. }) => {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batches,
                    history,
                });
            }
            Err(e) => return Err(e.into()),
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            val_loss: val,
        });
        if val < best.0 {
            best = (val, net.clone(), Some(epoch));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }
    history.best_epoch = best.2;
    Ok((best.1, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(
        input: usize,
        hidden: Vec<(usize, Activation)>,
        head: HeadKind,
        outputs: usize,
    ) -> NetSpec<f64> {
        let p = head.params_per_output();
        let n = hidden.len();
        NetSpec {
            input_dim: input,
            hidden,
            head,
            outputs,
            dropout: 0.0,
            reg: RegConfig::none(n, p),
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let s = spec(3, vec![(2, Activation::Tanh)], HeadKind::Point, 1);
        let a = init_network(s.clone(), 42).unwrap();
        let b = init_network(s.clone(), 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_network(s, 43).unwrap());
        assert_eq!(
            (a.hidden[0].weights.rows(), a.hidden[0].weights.cols()),
            (3, 2)
        );
        assert_eq!((a.head.weights.rows(), a.head.weights.cols()), (2, 1));
        let bound = glorot_bound(3, 2);
        assert!((bound - (6.0_f64 / 5.0).sqrt()).abs() < 1e-15);
        assert!(a.hidden[0]
            .weights
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(a.hidden[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn activation_parsing() {
        for a in Activation::ALL {
            assert_eq!(Activation::parse(a.name()).unwrap(), a);
        }
        assert!(matches!(
            Activation::parse("gelu"),
            Err(NetError::UnknownActivation(_))
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(activation(Activation::Relu, -1.0), 0.0);
        assert_eq!(activation(Activation::Relu, 2.0), 2.0);
        assert!((activation(Activation::Softplus, 0.0_f64) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((activation(Activation::Elu, -1.0_f64) - ((-1.0_f64).exp() - 1.0)).abs() < 1e-16);
        let mut row = [1.0, 2.0, 3.0];
        Activation::Softmax.apply_row(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for act in Activation::ALL
            .into_iter()
            .filter(|a| *a != Activation::Softmax)
        {
            for _ in 0..100 {
                let mut x: f64 = rng.gen_range(-4.0..4.0);
                if x.abs() < 1e-3 {
                    x += 0.01;
                }
                let fd = (activation(act, x + h) - activation(act, x - h)) / (2.0 * h);
                let g = activation_grad(act, x);
                assert!(
                    (g - fd).abs() / fd.abs().max(1.0) < 1e-6,
                    "{act:?} at {x}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net =
            init_network(spec(4, vec![(3, Activation::Relu)], HeadKind::Point, 2), 0).unwrap();
        net.hidden[0].weights.map_inplace(|_| 0.0);
        net.head.weights.map_inplace(|_| 0.0);
        let x = Matrix::from_vec(2, 4, vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]);
        assert!(net
            .predict(&x)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
        assert!(net.predict(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn tanh_identity_unit() {
        let mut net =
            init_network(spec(1, vec![(1, Activation::Tanh)], HeadKind::Point, 1), 0).unwrap();
        net.hidden[0].weights[(0, 0)] = 1.0;
        net.head.weights[(0, 0)] = 1.0;
        assert_eq!(
            net.predict(&Matrix::from_vec(1, 1, vec![0.0])).unwrap()[(0, 0)],
            0.0
        );
    }

    #[test]
    fn forward_matches_hand_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = init_network(
            spec(
                3,
                vec![(4, Activation::Sigmoid), (2, Activation::Elu)],
                HeadKind::Point,
                2,
            ),
            9,
        )
        .unwrap();
        let x = random_matrix(5, 3, &mut rng);
        let out = net.predict(&x).unwrap();
        for r in 0..5 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for layer in &net.hidden {
                let mut next = vec![0.0; layer.bias.len()];
                for (j, n) in next.iter_mut().enumerate() {
                    let mut z = layer.bias[j];
                    for (i, &hi) in h.iter().enumerate() {
                        z += hi * layer.weights[(i, j)];
                    }
                    *n = activation(layer.activation.unwrap(), z);
                }
                h = next;
            }
            for j in 0..2 {
                let mut o = net.head.bias[j];
                for (i, &hi) in h.iter().enumerate() {
                    o += hi * net.head.weights[(i, j)];
                }
                assert!((o - out[(r, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l1_kernel_algebra() {
        let mut s = spec(1, vec![], HeadKind::Point, 1);
        s.reg.head[0].kernel = Some(0.5);
        let mut net = init_network(s, 0).unwrap();
        net.head.weights[(0, 0)] = 2.0;
        let x = Matrix::from_vec(1, 1, vec![0.0]);
        let y = Matrix::from_vec(1, 1, vec![0.0]);
        let (v, g) = net.loss_and_grads(&x, &y, Loss::Mae, None).unwrap();
        assert_eq!(v.data, 0.0);
        assert_eq!(v.penalty, 1.0);
        assert_eq!(g.head.0[(0, 0)], 0.5);
        net.head.weights[(0, 0)] = -2.0;
        let (_, g) = net.loss_and_grads(&x, &y, Loss::Mae, None).unwrap();
        assert_eq!(g.head.0[(0, 0)], -0.5);
    }

    #[test]
    fn perfect_mae_prediction_has_zero_grads() {
        let net =
            init_network(spec(3, vec![(4, Activation::Tanh)], HeadKind::Point, 2), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(4, 3, &mut rng);
        let y = net.predict(&x).unwrap();
        let (v, g) = net.loss_and_grads(&x, &y, Loss::Mae, None).unwrap();
        assert_eq!(v.total, 0.0);
        for s in g.slices() {
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn loss_must_match_head() {
        let net =
            init_network(spec(2, vec![(2, Activation::Relu)], HeadKind::Point, 1), 0).unwrap();
        let x = Matrix::zeros(1, 2);
        let y = Matrix::zeros(1, 1);
        assert!(net
            .loss_and_grads(&x, &y, Loss::Nll(Family::Normal), None)
            .is_err());
    }

    #[test]
    fn adam_zero_grad_keeps_weights() {
        let mut net =
            init_network(spec(2, vec![(2, Activation::Relu)], HeadKind::Point, 1), 0).unwrap();
        let before = net.clone();
        let zero = Gradients {
            hidden: vec![(Matrix::zeros(2, 2), vec![0.0; 2])],
            head: (Matrix::zeros(2, 1), vec![0.0]),
        };
        let mut adam = Adam::new(&net);
        adam.update(&mut net, &zero, 0.01);
        assert_eq!(net, before);
    }

    #[test]
    fn adam_trace_matches_hand_recursion() {
        let mut net = init_network(spec(1, vec![], HeadKind::Point, 1), 0).unwrap();
        net.head.weights[(0, 0)] = 0.3;
        let grads = [0.5, -0.2, 0.1];
        let lr = 0.01;
        let mut adam = Adam::new(&net);
        let (mut w, mut m, mut v) = (0.3_f64, 0.0_f64, 0.0_f64);
        for (t, &g) in grads.iter().enumerate() {
            let gr = Gradients {
                hidden: vec![],
                head: (Matrix::from_vec(1, 1, vec![g]), vec![0.0]),
            };
            adam.update(&mut net, &gr, lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            w -= lr * (m / (1.0 - 0.9_f64.powi(k)))
                / ((v / (1.0 - 0.999_f64.powi(k))).sqrt() + 1e-8);
            assert!((net.head.weights[(0, 0)] - w).abs() < 1e-12);
        }
        // first step moves by ~lr
        let mut fresh = init_network(spec(1, vec![], HeadKind::Point, 1), 0).unwrap();
        let start = fresh.head.weights[(0, 0)];
        let gr = Gradients {
            hidden: vec![],
            head: (Matrix::from_vec(1, 1, vec![3.0]), vec![0.0]),
        };
        Adam::new(&fresh).update(&mut fresh, &gr, 0.01);
        assert!((fresh.head.weights[(0, 0)] - (start - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn dropout_eval_identity_and_train_expectation() {
        let mut s = spec(50, vec![(3, Activation::Relu)], HeadKind::Point, 1);
        s.dropout = 0.3;
        let net = init_network(s, 1).unwrap();
        let x = Matrix::from_vec(1, 50, (0..50).map(|i| 1.0 + i as f64 / 50.0).collect());
        let (_, cache) = net.forward(&x, None).unwrap();
        assert_eq!(cache.input, x);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mean = vec![0.0; 50];
        let draws = 10_000;
        for _ in 0..draws {
            let (_, c) = net.forward(&x, Some(&mut rng)).unwrap();
            for (m, v) in mean.iter_mut().zip(c.input.as_slice()) {
                *m += v / draws as f64;
            }
        }
        let total: f64 = mean.iter().sum();
        let expected: f64 = x.as_slice().iter().sum();
        assert!((total - expected).abs() / expected < 0.02);
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let net =
            init_network(spec(2, vec![(3, Activation::Relu)], HeadKind::Point, 1), 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (out, hist) = train(
            net.clone(),
            &Matrix::zeros(20, 2),
            &Matrix::zeros(20, 1),
            &cfg,
            Loss::Mae,
        )
        .unwrap();
        assert_eq!(out, net);
        assert!(hist.records.is_empty());
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(200, 2, &mut rng);
        let y = Matrix::from_vec(
            200,
            1,
            (0..200)
                .map(|i| 2.0 * x[(i, 0)] - x[(i, 1)] + 0.5)
                .collect(),
        );
        let net =
            init_network(spec(2, vec![(8, Activation::Tanh)], HeadKind::Point, 1), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 200,
            seed: 1,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(net.clone(), &x, &y, &cfg, Loss::Mae).unwrap();
        let (trained2, hist2) = train(net.clone(), &x, &y, &cfg, Loss::Mae).unwrap();
        assert_eq!(trained, trained2);
        assert_eq!(hist, hist2);

        let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, val) = split_indices(200, 0.2, &mut split_rng);
        let xv = x.select_rows(&val);
        let yv = y.select_rows(&val);
        assert!(
            trained.data_loss(&xv, &yv, Loss::Mae).unwrap()
                < net.data_loss(&xv, &yv, Loss::Mae).unwrap()
        );
        let best = hist.best_epoch.unwrap();
        let min = hist
            .records
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(hist.records[best].val_loss, min);
    }

    #[test]
    fn json_roundtrip() {
        let net = init_network(
            spec(
                3,
                vec![(2, Activation::Softmax)],
                HeadKind::Distributional(Family::Jsu),
                2,
            ),
            1,
        )
        .unwrap();
        let text = net.to_json().unwrap();
        assert!(text.contains("\"format_version\":1"));
        assert_eq!(Network::<f64>::from_json(&text).unwrap(), net);
    }
}
