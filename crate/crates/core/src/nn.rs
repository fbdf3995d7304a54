//! Dense multilayer perceptrons with hand-written forward and reverse passes.
//!
//! Every expert, gate and baseline in the crate is an [`Mlp`]: a short chain of
//! fully connected layers with ReLU hidden activations and raw (identity) logits
//! at the output. All arithmetic is `f64`; weights are stored row-major as
//! `out_dim x in_dim`.
//!
//! Gradients use the same [`Mlp`] layout as the parameters they belong to, so
//! an optimizer can walk parameters and gradients in lockstep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Current version tag written into serialized parameter documents.
pub const SCHEMA_VERSION: u32 = 1;

/// Default hidden widths of a three-layer MLP.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "id")]
    Identity,
}

/// One fully connected layer, `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Builds a layer from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>], bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let out_dim = rows.len();
        if out_dim == 0 {
            return Err(Error::EmptyInput("layer weight rows"));
        }
        let in_dim = rows[0].len();
        if in_dim == 0 {
            return Err(Error::EmptyInput("layer weight columns"));
        }
        if bias.len() != out_dim {
            return Err(Error::dims("layer bias", out_dim, bias.len()));
        }
        let mut weights = Vec::with_capacity(in_dim * out_dim);
        for row in rows {
            if row.len() != in_dim {
                return Err(Error::dims("layer weight row", in_dim, row.len()));
            }
            weights.extend_from_slice(row);
        }
        let layer = DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        };
        if !layer.is_finite() {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.in_dim).map(<[f64]>::to_vec).collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi)
        }));
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

impl Serialize for DenseLayer {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        LayerDoc {
            w: self.rows(),
            b: self.bias.clone(),
            act: self.activation,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DenseLayer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = LayerDoc::deserialize(deserializer)?;
        DenseLayer::from_rows(&doc.w, doc.b, doc.act).map_err(serde::de::Error::custom)
    }
}

/// A chain of dense layers. Hidden layers use ReLU, the last layer is identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Gradients share the parameter layout.
pub type GradientBundle = Mlp;

/// Activations recorded by [`Mlp::forward`] for reuse in [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation of each hidden layer (the output layer is identity).
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

#[derive(Serialize, Deserialize)]
struct MlpDoc {
    schema_version: u32,
    layers: Vec<DenseLayer>,
}

impl Serialize for Mlp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        MlpDoc {
            schema_version: SCHEMA_VERSION,
            layers: self.layers.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = MlpDoc::deserialize(deserializer)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        Mlp::from_layers(doc.layers).map_err(serde::de::Error::custom)
    }
}

impl Mlp {
    /// Validates that layer dimensions chain and the output layer is linear.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("mlp layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dims(
                    format!("layer {} input", i + 1),
                    pair[0].out_dim,
                    pair[1].in_dim,
                ));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidConfig(
                "final mlp layer must use identity activation".into(),
            ));
        }
        if !layers.iter().all(DenseLayer::is_finite) {
            return Err(Error::NonFinite("mlp parameters"));
        }
        Ok(Mlp { layers })
    }

    /// All-zero network with the given widths.
    pub fn zeros(in_dim: usize, hidden: &[usize], out_dim: usize) -> Result<Self> {
        let dims = layer_dims(in_dim, hidden, out_dim)?;
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| DenseLayer::zeros(d[0], d[1], hidden_or_output(i, last)))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim, l.activation))
                .collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn fill(&mut self, value: f64) {
        for layer in &mut self.layers {
            layer.weights.fill(value);
            layer.bias.fill(value);
        }
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    /// Visits each parameter as `(value, is_weight)` in a fixed order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64, bool)) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| f(w, true));
            layer.bias.iter_mut().for_each(|b| f(b, false));
        }
    }

    /// Visits every parameter value in the order of [`Mlp::for_each_param_mut`].
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    /// Mutable reference to the `index`-th parameter in visiting order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if index < nw {
                return Some(&mut layer.weights[index]);
            }
            index -= nw;
            let nb = layer.bias.len();
            if index < nb {
                return Some(&mut layer.bias[index]);
            }
            index -= nb;
        }
        None
    }

    /// Runs the network and records every activation for the reverse pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::dims("mlp input", self.in_dim(), x.len()));
        }
        let mut cache = ForwardCache {
            input: x.to_vec(),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len() - 1),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            let mut z = Vec::with_capacity(layer.out_dim);
            layer.affine(input, &mut z);
            if i + 1 < self.layers.len() {
                let a = match layer.activation {
                    Activation::ReLU => z.iter().map(|v| v.max(0.0)).collect(),
                    Activation::Identity => z.clone(),
                };
                cache.post.push(a);
            }
            cache.pre.push(z);
        }
        let logits = cache.pre[self.layers.len() - 1].clone();
        Ok((logits, cache))
    }

    /// Output only; skips building a cache.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dims("mlp input", self.in_dim(), x.len()));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i + 1 < self.layers.len() && layer.activation == Activation::ReLU {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Reverse-mode pass returning fresh parameter gradients and the input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
    ) -> Result<(GradientBundle, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let grad_input = self.backward_into(cache, grad_logits, &mut grads)?;
        Ok((grads, grad_input))
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    ///
    /// The ReLU subgradient at zero is zero.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: &mut GradientBundle,
    ) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if grad_logits.len() != self.out_dim() {
            return Err(Error::dims("mlp output gradient", self.out_dim(), grad_logits.len()));
        }
        if cache.pre.len() != n || cache.input.len() != self.in_dim() {
            return Err(Error::dims("mlp forward cache", n, cache.pre.len()));
        }
        if !grads.same_shape(self) {
            return Err(Error::InvalidConfig("gradient bundle shape differs from mlp".into()));
        }
        let mut delta = grad_logits.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if cache.pre[i].len() != layer.out_dim {
                return Err(Error::dims("mlp forward cache layer", layer.out_dim, cache.pre[i].len()));
            }
            if i + 1 < n && layer.activation == Activation::ReLU {
                for (d, z) in delta.iter_mut().zip(&cache.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            let g = &mut grads.layers[i];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                let row = &mut g.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (r, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

fn hidden_or_output(index: usize, last: usize) -> Activation {
    if index == last {
        Activation::Identity
    } else {
        Activation::ReLU
    }
}

fn layer_dims(in_dim: usize, hidden: &[usize], out_dim: usize) -> Result<Vec<usize>> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(in_dim);
    dims.extend_from_slice(hidden);
    dims.push(out_dim);
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!("layer widths must be positive, got {dims:?}")));
    }
    Ok(dims)
}

/// Glorot-uniform weights, zero biases, drawn from a ChaCha8 stream seeded with `seed`.
pub fn init_params(in_dim: usize, hidden: &[usize], out_dim: usize, seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(in_dim, hidden, out_dim, &mut rng)
}

/// [`init_params`] drawing from a caller-owned generator.
pub fn init_params_with<R: Rng + ?Sized>(
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    rng: &mut R,
) -> Result<Mlp> {
    let mut mlp = Mlp::zeros(in_dim, hidden, out_dim)?;
    for layer in &mut mlp.layers {
        let a = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-a..a);
        }
    }
    Ok(mlp)
}

/// Softmax with max-subtraction.
pub fn stable_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax input"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    Ok(softmax(v))
}

/// Unchecked softmax for internal callers whose inputs are known finite.
pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Pulls an upstream gradient on softmax outputs back onto its logits.
pub(crate) fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}
