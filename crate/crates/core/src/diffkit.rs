//! Dense-network kernel with first- and second-order differentiation.
//!
//! A [`DenseNet`] is a stack of affine layers `s_k = W_k a_k + b_k`,
//! `a_{k+1} = φ_k(s_k)`, with one activation for every hidden layer and a
//! separate one on the output.
//!
//! Training a gradient-field model needs `∂/∂θ` of a loss that itself
//! contains `∇_x H_θ(x)`. For a seed `u = ∂loss/∂(∇_x H)` the second-order
//! part is `∂/∂θ [uᵀ ∇_x H]`, and `uᵀ ∇_x H` is just the directional
//! derivative of `H` along `u`. The [`Tape`] therefore runs a forward-mode
//! tangent pass (`ȧ_0 = u`, `ṡ_k = W_k ȧ_k`, `ȧ_{k+1} = φ'(s_k) ṡ_k`) next
//! to the primal pass and then one reverse sweep over both, which for layer
//! `k` reads
//!
//! ```text
//! ṡ̄_k = ǡ_{k+1} ⊙ φ'(s_k)
//! s̄_k = ā_{k+1} ⊙ φ'(s_k) + ǡ_{k+1} ⊙ φ''(s_k) ⊙ ṡ_k
//! W̄_k += s̄_k a_kᵀ + ṡ̄_k ȧ_kᵀ        b̄_k += s̄_k
//! ā_k  = W_kᵀ s̄_k                     ǡ_k = W_kᵀ ṡ̄_k
//! ```
//!
//! With `ǡ = 0` this collapses to ordinary backpropagation.
//!
//! Parameters are addressed as one flat vector: layer by layer, the weight
//! matrix in row-major `(out, in)` order followed by the bias.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Rng;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Identity,
    /// `½ s²`. Lets a two-layer net represent a quadratic potential exactly.
    HalfSquare,
}

/// Overflow-safe `ln(1 + e^s)`.
#[inline]
pub fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(s),
            Activation::Identity => s,
            Activation::HalfSquare => 0.5 * s * s,
        }
    }

    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(s),
            Activation::Identity => 1.0,
            Activation::HalfSquare => s,
        }
    }

    #[inline]
    pub fn second_derivative(self, s: f64) -> f64 {
        match self {
            Activation::Softplus => {
                let p = sigmoid(s);
                p * (1.0 - p)
            }
            Activation::Identity => 0.0,
            Activation::HalfSquare => 1.0,
        }
    }
}

/// One affine layer. `w` is row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer_dims", "layer dimensions must be positive"));
        }
        check_dim(in_dim * out_dim, w.len())?;
        check_dim(out_dim, b.len())?;
        if !w.iter().chain(&b).all(|v| v.is_finite()) {
            return Err(Error::config("layers", "weights and biases must be finite"));
        }
        Ok(Self { in_dim, out_dim, w, b })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }

    fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `out = W x + b`
    #[inline]
    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.w.chunks_exact(self.in_dim).zip(&self.b).map(|(row, &b)| {
            row.iter().zip(x).fold(b, |acc, (w, x)| acc + w * x)
        }));
    }

    /// `out = W x`
    #[inline]
    fn linear(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.w
                .chunks_exact(self.in_dim)
                .map(|row| row.iter().zip(x).fold(0.0, |acc, (w, x)| acc + w * x)),
        );
    }

    /// `out = Wᵀ y`
    #[inline]
    fn transpose_mul(&self, y: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.in_dim, 0.0);
        for (row, &yi) in self.w.chunks_exact(self.in_dim).zip(y) {
            if yi != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * yi;
                }
            }
        }
    }
}

/// Fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetJson", into = "NetJson")]
pub struct DenseNet {
    layers: Vec<Dense>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// On-disk layout of a [`DenseNet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetJson {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub layers: Vec<LayerJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerJson {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl From<DenseNet> for NetJson {
    fn from(net: DenseNet) -> Self {
        NetJson {
            layer_dims: net.layer_dims(),
            hidden_activation: net.hidden_activation,
            output_activation: net.output_activation,
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerJson {
                    w: l.w.chunks_exact(l.in_dim).map(<[f64]>::to_vec).collect(),
                    b: l.b,
                })
                .collect(),
        }
    }
}

impl TryFrom<NetJson> for DenseNet {
    type Error = Error;

    fn try_from(json: NetJson) -> Result<Self> {
        if json.layer_dims.len() != json.layers.len() + 1 {
            return Err(Error::config(
                "layer_dims",
                format!(
                    "{} dims do not describe {} layers",
                    json.layer_dims.len(),
                    json.layers.len()
                ),
            ));
        }
        let layers = json
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                let (in_dim, out_dim) = (json.layer_dims[k], json.layer_dims[k + 1]);
                check_dim(out_dim, l.w.len())?;
                for row in &l.w {
                    check_dim(in_dim, row.len())?;
                }
                Dense::new(in_dim, out_dim, l.w.concat(), l.b)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers, json.hidden_activation, json.output_activation)
    }
}

/// Whether a tape also carries the tangent pass needed for second-order
/// parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeMode {
    FirstOrder,
    SecondOrder,
}

impl DenseNet {
    pub fn from_layers(
        layers: Vec<Dense>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layer_dims", "a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].out_dim, pair[1].in_dim)?;
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// All-zero network with the given shape.
    pub fn zeros(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config("layer_dims", "need input and output dimensions"));
        }
        let layers = layer_dims
            .windows(2)
            .map(|d| Dense::new(d[0], d[1], vec![0.0; d[0] * d[1]], vec![0.0; d[1]]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, hidden_activation, output_activation)
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init(
        layer_dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden_activation, output_activation)?;
        for layer in &mut net.layers {
            let a = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.uniform_in(-a, a);
            }
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Flat parameter vector.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::numeric("set_params", format!("parameter {i} is not finite")));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.w.len());
            let (b, tail) = tail.split_at(l.b.len());
            l.w.copy_from_slice(w);
            l.b.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    #[inline]
    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut a = x.to_vec();
        let mut s = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut s);
            let act = self.activation(k);
            a.clear();
            a.extend(s.iter().map(|&v| act.apply(v)));
        }
        Ok(a)
    }

    /// Exact gradient of the scalar output with respect to the input.
    pub fn input_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.record(x, TapeMode::FirstOrder)?.input_grad()
    }

    /// Runs the forward pass and keeps every intermediate needed for the
    /// reverse sweeps.
    pub fn record(&self, x: &[f64], mode: TapeMode) -> Result<Tape<'_>> {
        check_dim(self.input_dim(), x.len())?;
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut post = Vec::with_capacity(n + 1);
        post.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut s = Vec::with_capacity(layer.out_dim);
            layer.affine(&post[k], &mut s);
            let act = self.activation(k);
            post.push(s.iter().map(|&v| act.apply(v)).collect());
            pre.push(s);
        }
        Ok(Tape {
            net: self,
            mode,
            pre,
            post,
        })
    }
}

/// Recorded forward pass of one input through a [`DenseNet`].
///
/// Single use; holds a borrow of the network it was recorded on.
#[derive(Debug, Clone)]
pub struct Tape<'a> {
    net: &'a DenseNet,
    mode: TapeMode,
    /// Pre-activations `s_k`.
    pre: Vec<Vec<f64>>,
    /// Activations `a_k`, `a_0 = x`.
    post: Vec<Vec<f64>>,
}

impl<'a> Tape<'a> {
    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn input(&self) -> &[f64] {
        &self.post[0]
    }

    pub fn output(&self) -> &[f64] {
        &self.post[self.post.len() - 1]
    }

    /// Re-runs the forward pass and reports whether it reproduces the
    /// recorded output bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let out = self.net.forward(self.input())?;
        Ok(out
            .iter()
            .zip(self.output())
            .all(|(a, b)| a.to_bits() == b.to_bits()))
    }

    fn require_scalar(&self, what: &str) -> Result<()> {
        if self.net.output_dim() != 1 {
            return Err(Error::ContractViolation(format!(
                "{what} needs a scalar-output network, got output dimension {}",
                self.net.output_dim()
            )));
        }
        Ok(())
    }

    /// Reverse sweep seeded with 1 on the scalar output.
    pub fn input_grad(&self) -> Result<Vec<f64>> {
        self.require_scalar("input_grad")?;
        let mut adj = vec![1.0];
        let mut next = Vec::new();
        for k in (0..self.net.layers.len()).rev() {
            let act = self.net.activation(k);
            for (a, &s) in adj.iter_mut().zip(&self.pre[k]) {
                *a *= act.derivative(s);
            }
            self.net.layers[k].transpose_mul(&adj, &mut next);
            std::mem::swap(&mut adj, &mut next);
        }
        Ok(adj)
    }

    /// Accumulates `scale · ∂J/∂θ` into `grad`, where
    /// `J = d_outputᵀ y + d_input_gradᵀ ∇_x y`.
    ///
    /// The second term needs a [`TapeMode::SecondOrder`] tape and a scalar
    /// output.
    pub fn accumulate_param_grad(
        &self,
        d_output: &[f64],
        d_input_grad: Option<&[f64]>,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let net = self.net;
        check_dim(net.output_dim(), d_output.len())?;
        check_dim(net.num_params(), grad.len())?;
        let nl = net.layers.len();

        // Forward tangent pass along the seed direction.
        let tangent = match d_input_grad {
            None => None,
            Some(u) => {
                if self.mode != TapeMode::SecondOrder {
                    return Err(Error::ContractViolation(
                        "loss depends on the input gradient but the tape was recorded first-order"
                            .into(),
                    ));
                }
                self.require_scalar("second-order parameter gradients")?;
                check_dim(net.input_dim(), u.len())?;
                let mut ds = Vec::with_capacity(nl);
                let mut da = Vec::with_capacity(nl + 1);
                da.push(u.to_vec());
                for (k, layer) in net.layers.iter().enumerate() {
                    let mut s_dot = Vec::with_capacity(layer.out_dim);
                    layer.linear(&da[k], &mut s_dot);
                    let act = net.activation(k);
                    da.push(
                        s_dot
                            .iter()
                            .zip(&self.pre[k])
                            .map(|(&sd, &s)| act.derivative(s) * sd)
                            .collect(),
                    );
                    ds.push(s_dot);
                }
                Some((ds, da))
            }
        };

        // Parameter offsets per layer.
        let mut offsets = Vec::with_capacity(nl);
        let mut off = 0;
        for l in &net.layers {
            offsets.push(off);
            off += l.num_params();
        }

        let mut adj: Vec<f64> = d_output.iter().map(|v| v * scale).collect();
        let mut adj_t: Option<Vec<f64>> = tangent.as_ref().map(|_| vec![scale]);
        let mut s_bar = Vec::new();
        let mut sd_bar = Vec::new();
        let mut next = Vec::new();
        for k in (0..nl).rev() {
            let layer = &net.layers[k];
            let act = net.activation(k);
            let pre = &self.pre[k];
            s_bar.clear();
            sd_bar.clear();
            match (&adj_t, &tangent) {
                (Some(at), Some((ds, _))) => {
                    for i in 0..layer.out_dim {
                        let d1 = act.derivative(pre[i]);
                        sd_bar.push(at[i] * d1);
                        s_bar.push(adj[i] * d1 + at[i] * act.second_derivative(pre[i]) * ds[k][i]);
                    }
                }
                _ => s_bar.extend(adj.iter().zip(pre).map(|(a, &s)| a * act.derivative(s))),
            }

            let g = &mut grad[offsets[k]..offsets[k] + layer.num_params()];
            let (gw, gb) = g.split_at_mut(layer.w.len());
            let a_in = &self.post[k];
            for (i, row) in gw.chunks_exact_mut(layer.in_dim).enumerate() {
                let sb = s_bar[i];
                if sb != 0.0 {
                    for (gwij, &aj) in row.iter_mut().zip(a_in) {
                        *gwij += sb * aj;
                    }
                }
                gb[i] += sb;
            }
            if let Some((_, da)) = &tangent {
                let ad_in = &da[k];
                for (i, row) in gw.chunks_exact_mut(layer.in_dim).enumerate() {
                    let sdb = sd_bar[i];
                    if sdb != 0.0 {
                        for (gwij, &aj) in row.iter_mut().zip(ad_in) {
                            *gwij += sdb * aj;
                        }
                    }
                }
            }

            if k > 0 {
                layer.transpose_mul(&s_bar, &mut next);
                std::mem::swap(&mut adj, &mut next);
                if let Some(at) = adj_t.as_mut() {
                    layer.transpose_mul(&sd_bar, &mut next);
                    std::mem::swap(at, &mut next);
                }
            }
        }
        Ok(())
    }
}

/// Per-sample loss contribution returned by a loss evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLoss {
    pub value: f64,
    /// `∂value/∂y` for the network output `y`.
    pub d_output: Vec<f64>,
    /// `∂value/∂(∇_x y)`; only meaningful for scalar-output networks.
    pub d_input_grad: Option<Vec<f64>>,
}

/// Batch loss together with its parameter gradient.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub value: f64,
    /// Per-sample loss terms in batch order; `value` is their plain mean.
    pub terms: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Fixed work-unit size for the parallel batch reduction. Partial sums are
/// always combined in chunk order, so results do not depend on the number
/// of worker threads.
const CHUNK: usize = 16;

/// Mean loss over `inputs` and its exact parameter gradient.
///
/// `eval(i, y, g)` receives the network output `y` for sample `i` and, on a
/// second-order tape, the input gradient `g = ∇_x y`.
pub fn loss_param_grad<F>(
    net: &DenseNet,
    inputs: &[Vec<f64>],
    mode: TapeMode,
    eval: F,
) -> Result<BatchGrad>
where
    F: Fn(usize, &[f64], Option<&[f64]>) -> Result<LocalLoss> + Sync,
{
    if inputs.is_empty() {
        return Err(Error::config("batch_size", "batch must contain at least one sample"));
    }
    let n = inputs.len();
    let scale = 1.0 / n as f64;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = inputs
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grad = vec![0.0; net.num_params()];
            let mut terms = Vec::with_capacity(chunk.len());
            for (j, x) in chunk.iter().enumerate() {
                let i = c * CHUNK + j;
                let tape = net.record(x, mode)?;
                let g = match mode {
                    TapeMode::SecondOrder => Some(tape.input_grad()?),
                    TapeMode::FirstOrder => None,
                };
                let local = eval(i, tape.output(), g.as_deref())?;
                tape.accumulate_param_grad(
                    &local.d_output,
                    local.d_input_grad.as_deref(),
                    scale,
                    &mut grad,
                )?;
                terms.push(local.value);
            }
            Ok((terms, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0; net.num_params()];
    let mut terms = Vec::with_capacity(n);
    for (t, g) in partials {
        terms.extend(t);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let value = terms.iter().sum::<f64>() / n as f64;
    Ok(BatchGrad { value, terms, grad })
}

/// Central differences `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let fp = f(&probe);
        probe[i] = xi - h;
        let fm = f(&probe);
        probe[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(
                "finite_diff_grad",
                format!("non-finite evaluation around coordinate {i}"),
            ));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Largest per-coordinate relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates that are zero up to rounding from dominating.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
