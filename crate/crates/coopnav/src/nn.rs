//! Minimal dense numerics: multilayer perceptrons with hand-written
//! reverse-mode gradients, an Adam optimizer, and categorical utilities.
//!
//! Everything is `f64`. Networks use tanh hidden activations and a linear
//! output layer. The batched forward/backward paths are the training hot
//! loop, so they lean on `ndarray`'s matrix products; the math itself
//! (backpropagation, Adam, softmax) is implemented here.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// FNV-1a over raw bytes; used for cheap, stable state digests.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Softmax with an explicit temperature: `p_i ∝ exp(logits_i / temperature)`.
///
/// Numerically stable for logit magnitudes up to at least `1e4`. Errors on
/// non-finite logits or a non-positive temperature.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !all_finite(logits) || !temperature.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    if logits.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            details: "empty logit vector".into(),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Log-probabilities of `softmax(logits, 1.0)`, computed stably.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - max - log_sum).collect()
}

/// Entropy `-Σ p ln p` of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Draws an index from a probability vector by inverse CDF.
///
/// The vector is assumed normalized; accumulated rounding is absorbed by
/// returning the last index when the draw exceeds the running sum.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    debug_assert!(!probs.is_empty(), "sample_index: empty distribution");
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Per-layer parameter gradients produced by [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
}

impl Gradients {
    /// Zero gradients shaped like `net`'s parameters.
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            dw: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            db: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }
}

/// Activations retained by a cached forward pass, consumed by backprop.
///
/// `layers[0]` is the input batch; `layers[l]` the post-activation output of
/// layer `l`. The last entry is the (linear) network output.
pub struct ForwardCache {
    layers: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("cache holds at least the input")
    }
}

/// A fully connected network: tanh hidden layers, linear output.
///
/// Weights are stored row-major as `[out_dim, in_dim]` per layer. Initial
/// weights are uniform with fan-in scaling `U(-1/√fan_in, 1/√fan_in)` and
/// biases start at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Builds a network with the given layer sizes (input first, output last).
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        Self::with_output_scale(sizes, 1.0, rng)
    }

    /// Like [`Mlp::new`] but scales the final layer's weights, e.g. `0.01`
    /// for a policy head that should start near-uniform.
    pub fn with_output_scale(sizes: &[usize], output_scale: f64, rng: &mut impl Rng) -> Self {
        assert!(
            sizes.len() >= 2,
            "Mlp::new: need at least input and output sizes, got {sizes:?}"
        );
        assert!(
            sizes.iter().all(|&s| s > 0),
            "Mlp::new: zero-width layer in {sizes:?}"
        );
        let last = sizes.len() - 2;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                scale * rng.gen_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Order-stable digest of every parameter bit; two networks digest equal
    /// iff their parameters are bitwise identical.
    pub fn state_digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for w in &self.weights {
            for v in w.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        for b in &self.biases {
            for v in b.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    /// Single-sample forward pass with input validation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "Mlp::forward",
                details: format!(
                    "input len {} != input dim {}",
                    input.len(),
                    self.input_dim()
                ),
            });
        }
        if !all_finite(input) {
            return Err(Error::NonFinite { op: "Mlp::forward" });
        }
        let mut a = Array1::from_iter(input.iter().cloned());
        let last = self.layer_count() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&a) + b;
            if l != last {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        Ok(a.to_vec())
    }

    /// Batched forward pass over rows of `x` (shape `[n, input_dim]`).
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "Mlp::forward_batch",
                details: format!("input cols {} != input dim {}", x.ncols(), self.input_dim()),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Mlp::forward_batch",
            });
        }
        Ok(self.forward_batch_cached(x).layers.pop().unwrap())
    }

    /// Forward pass that keeps every layer's activations for backprop.
    /// Shape contracts are programmer errors and assert.
    pub fn forward_batch_cached(&self, x: &Array2<f64>) -> ForwardCache {
        assert_eq!(
            x.ncols(),
            self.input_dim(),
            "forward_batch_cached: input cols must equal input dim"
        );
        let mut layers = Vec::with_capacity(self.layer_count() + 1);
        layers.push(x.to_owned());
        let last = self.layer_count() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = layers[l].dot(&w.t()) + b;
            if l != last {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z);
        }
        ForwardCache { layers }
    }

    /// Reverse-mode gradients for a batch.
    ///
    /// `out_grad` holds `∂L/∂output` per sample (shape `[n, output_dim]`);
    /// the caller folds any `1/n` averaging into it. Returns `∂L/∂params`
    /// summed over the batch.
    pub fn backward_batch(&self, cache: &ForwardCache, out_grad: &Array2<f64>) -> Gradients {
        let n_layers = self.layer_count();
        assert_eq!(
            cache.layers.len(),
            n_layers + 1,
            "backward_batch: cache does not match network depth"
        );
        assert_eq!(
            out_grad.dim(),
            cache.layers[n_layers].dim(),
            "backward_batch: out_grad shape must match the cached output"
        );
        let mut dw = vec![Array2::zeros((0, 0)); n_layers];
        let mut db = vec![Array1::zeros(0); n_layers];
        // The output layer is linear, so the first delta is out_grad itself.
        let mut delta = out_grad.to_owned();
        for l in (0..n_layers).rev() {
            dw[l] = delta.t().dot(&cache.layers[l]);
            db[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                // tanh'(z) expressed through the cached activation a: 1 - a².
                prev.zip_mut_with(&cache.layers[l], |g, &a| *g *= 1.0 - a * a);
                delta = prev;
            }
        }
        Gradients { dw, db }
    }
}

/// Adam optimizer state for one [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    mw: Vec<Array2<f64>>,
    vw: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
}

impl Adam {
    /// Fresh optimizer state (zero moments) for `net` with the given
    /// learning rate and the standard defaults `β1=0.9, β2=0.999, ε=1e-8`.
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            mw: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            vw: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            mb: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            vb: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one Adam update in place. Gradient shapes must match the
    /// network; mismatches assert.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        assert_eq!(
            grads.dw.len(),
            net.weights.len(),
            "Adam::step: gradient layer count mismatch"
        );
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            assert_eq!(
                grads.dw[l].dim(),
                net.weights[l].dim(),
                "Adam::step: weight gradient shape mismatch at layer {l}"
            );
            assert_eq!(
                grads.db[l].len(),
                net.biases[l].len(),
                "Adam::step: bias gradient shape mismatch at layer {l}"
            );
            let (w, g, m, v) = (
                &mut net.weights[l],
                &grads.dw[l],
                &mut self.mw[l],
                &mut self.vw[l],
            );
            for ((p, &g), (m, v)) in w
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                apply(p, g, m, v);
            }
            let (b, g, m, v) = (
                &mut net.biases[l],
                &grads.db[l],
                &mut self.mb[l],
                &mut self.vb[l],
            );
            for ((p, &g), (m, v)) in b
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                apply(p, g, m, v);
            }
        }
    }
}
