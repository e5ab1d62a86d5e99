//! Small feedforward network with a sparse-aware first layer, trained by
//! minibatch Adam.
//!
//! Inputs are a dense block (context features) followed by a one-hot block
//! given as a list of hot indices. The first layer's weights are stored
//! input-major so each hot unit touches one contiguous row.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OffcemError, Result};

/// One network input: dense features plus indices of active one-hot units.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub dense: &'a [f64],
    pub hot: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    /// `inputs × outputs`, row `i` holds the weights leaving input `i`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn reset(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-layer activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Gradient buffers with the same shape as the network's parameters.
#[derive(Debug, Clone)]
pub struct Gradient {
    layers: Vec<Dense>,
}

impl Gradient {
    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(Dense::reset);
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.w.iter().chain(&l.b).copied())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dense_dim: usize,
    sparse_dim: usize,
    layers: Vec<Dense>,
}

impl Mlp {
    /// He-uniform initialization for hidden layers, with the fan-in of the
    /// first layer counted as the number of inputs active per example.
    pub fn new(dense_dim: usize, sparse_dim: usize, active_hot: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![dense_dim + sparse_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (l, pair) in sizes.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let fan_in = if l == 0 { dense_dim + active_hot } else { inputs }.max(1);
            let is_output = l == sizes.len() - 2;
            let limit = if is_output {
                (3.0 / fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let mut layer = Dense::zeros(inputs, outputs);
            layer.w.iter_mut().for_each(|w| *w = rng.random_range(-limit..limit));
            layers.push(layer);
        }
        Mlp {
            dense_dim,
            sparse_dim,
            layers,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "parameter vector length");
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            layer.w.iter_mut().chain(layer.b.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    /// Sets the output bias, e.g. to the target mean before training.
    pub fn set_output_bias(&mut self, value: f64) {
        let last = self.layers.last_mut().expect("network has an output layer");
        last.b[0] = value;
    }

    /// Adds `delta` to every output, used by tests of shift invariance.
    pub fn shift_output(&mut self, delta: f64) {
        let last = self.layers.last_mut().expect("network has an output layer");
        last.b[0] += delta;
    }

    pub fn trace(&self) -> Trace {
        let hidden = &self.layers[..self.layers.len() - 1];
        Trace {
            pre: hidden.iter().map(|l| vec![0.0; l.outputs]).collect(),
            post: hidden.iter().map(|l| vec![0.0; l.outputs]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }

    fn first_layer(&self, layer: &Dense, input: Input<'_>, out: &mut [f64]) {
        out.copy_from_slice(&layer.b);
        let n = layer.outputs;
        for (i, &v) in input.dense.iter().enumerate() {
            if v != 0.0 {
                let row = &layer.w[i * n..(i + 1) * n];
                out.iter_mut().zip(row).for_each(|(o, w)| *o += v * w);
            }
        }
        for &h in input.hot {
            let i = self.dense_dim + h;
            let row = &layer.w[i * n..(i + 1) * n];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += w);
        }
    }

    fn check_input(&self, input: Input<'_>) {
        debug_assert_eq!(input.dense.len(), self.dense_dim);
        debug_assert!(input.hot.iter().all(|&h| h < self.sparse_dim));
    }

    /// Output for one input, recording activations in `trace`.
    pub fn forward(&self, input: Input<'_>, trace: &mut Trace) -> f64 {
        self.check_input(input);
        let depth = self.layers.len();
        if depth == 1 {
            let mut out = [0.0];
            self.first_layer(&self.layers[0], input, &mut out);
            return out[0];
        }
        for l in 0..depth - 1 {
            let layer = &self.layers[l];
            let (done, rest) = trace.post.split_at_mut(l);
            if l == 0 {
                self.first_layer(layer, input, &mut trace.pre[0]);
            } else {
                let prev = &done[l - 1];
                let pre = &mut trace.pre[l];
                pre.copy_from_slice(&layer.b);
                let n = layer.outputs;
                for (i, &v) in prev.iter().enumerate() {
                    if v != 0.0 {
                        let row = &layer.w[i * n..(i + 1) * n];
                        pre.iter_mut().zip(row).for_each(|(o, w)| *o += v * w);
                    }
                }
            }
            let post = &mut rest[0];
            post.iter_mut()
                .zip(&trace.pre[l])
                .for_each(|(p, z)| *p = z.max(0.0));
        }
        let last = &self.layers[depth - 1];
        let prev = &trace.post[depth - 2];
        last.b[0] + prev.iter().zip(&last.w).map(|(a, w)| a * w).sum::<f64>()
    }

    /// Output without keeping a caller-visible trace.
    pub fn predict(&self, input: Input<'_>) -> f64 {
        let mut trace = self.trace();
        self.forward(input, &mut trace)
    }

    /// Accumulates `dout · ∂output/∂params` into `grad`, using the
    /// activations left in `trace` by the matching [`Mlp::forward`] call.
    pub fn backward(&self, input: Input<'_>, trace: &mut Trace, dout: f64, grad: &mut Gradient) {
        let depth = self.layers.len();
        trace.delta.clear();
        trace.delta.push(dout);
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            let n = layer.outputs;
            g.b.iter_mut().zip(&trace.delta).for_each(|(b, d)| *b += d);
            if l == 0 {
                for (i, &v) in input.dense.iter().enumerate() {
                    if v != 0.0 {
                        let row = &mut g.w[i * n..(i + 1) * n];
                        row.iter_mut().zip(&trace.delta).for_each(|(w, d)| *w += v * d);
                    }
                }
                for &h in input.hot {
                    let i = self.dense_dim + h;
                    let row = &mut g.w[i * n..(i + 1) * n];
                    row.iter_mut().zip(&trace.delta).for_each(|(w, d)| *w += d);
                }
                break;
            }
            let prev_post = &trace.post[l - 1];
            let prev_pre = &trace.pre[l - 1];
            trace.delta_prev.clear();
            for (i, &a) in prev_post.iter().enumerate() {
                let row_w = &layer.w[i * n..(i + 1) * n];
                if a != 0.0 {
                    let row_g = &mut g.w[i * n..(i + 1) * n];
                    row_g.iter_mut().zip(&trace.delta).for_each(|(w, d)| *w += a * d);
                }
                let back = if prev_pre[i] > 0.0 {
                    row_w.iter().zip(&trace.delta).map(|(w, d)| w * d).sum()
                } else {
                    0.0
                };
                trace.delta_prev.push(back);
            }
            std::mem::swap(&mut trace.delta, &mut trace.delta_prev);
        }
    }

    /// ½ λ Σ w² over weights (biases excluded).
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        0.5 * lambda
            * self
                .layers
                .iter()
                .map(|l| l.w.iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    fn add_l2_gradient(&self, lambda: f64, grad: &mut Gradient) {
        if lambda == 0.0 {
            return;
        }
        for (layer, g) in self.layers.iter().zip(&mut grad.layers) {
            g.w.iter_mut().zip(&layer.w).for_each(|(g, w)| *g += lambda * w);
        }
    }
}

// ── Training ────────────────────────────────────────────────────────────

/// Optimizer and schedule settings for [`train`].
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

/// Scratch space handed to per-example loss callbacks: two traces so that
/// pairwise objectives can run two forward passes.
pub struct Scratch {
    pub first: Trace,
    pub second: Trace,
}

struct Adam {
    m: Gradient,
    v: Gradient,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, net: &mut Mlp, grad: &Gradient, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let step = lr * c2.sqrt() / c1;
        for (((p, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let params = p.w.iter_mut().chain(p.b.iter_mut());
            let grads = g.w.iter().chain(&g.b);
            let ms = m.w.iter_mut().chain(m.b.iter_mut());
            let vs = v.w.iter_mut().chain(v.b.iter_mut());
            for (((p, g), m), v) in params.zip(grads).zip(ms).zip(vs) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= step * *m / (v.sqrt() + Self::EPS);
            }
        }
    }
}

/// Mean objective over `examples` plus the L2 penalty, and its gradient.
/// `example` returns one example's loss and accumulates its gradient.
pub fn batch_loss_and_gradient<F>(net: &Mlp, examples: &[usize], weight_decay: f64, scratch: &mut Scratch, grad: &mut Gradient, example: &mut F) -> f64
where
    F: FnMut(&Mlp, usize, &mut Scratch, &mut Gradient, f64) -> f64,
{
    grad.reset();
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    for &i in examples {
        loss += example(net, i, scratch, grad, scale);
    }
    net.add_l2_gradient(weight_decay, grad);
    loss * scale + net.l2_penalty(weight_decay)
}

/// Minibatch Adam over `num_examples` examples. The callback receives the
/// example index and a gradient scale (1/batch) and must add
/// `scale · ∂loss_i/∂params` to the gradient. Returns the mean loss of the
/// final epoch (NaN when no epochs ran).
pub fn train<F>(net: &mut Mlp, num_examples: usize, settings: TrainSettings, rng: &mut ChaCha8Rng, mut example: F) -> Result<f64>
where
    F: FnMut(&Mlp, usize, &mut Scratch, &mut Gradient, f64) -> f64,
{
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut grad = net.zero_gradient();
    let mut adam = Adam {
        m: net.zero_gradient(),
        v: net.zero_gradient(),
        t: 0,
    };
    let mut scratch = Scratch {
        first: net.trace(),
        second: net.trace(),
    };
    let batch = settings.batch_size.max(1);
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let loss = batch_loss_and_gradient(net, chunk, settings.weight_decay, &mut scratch, &mut grad, &mut example);
            if !loss.is_finite() {
                return Err(OffcemError::TrainingDiverged { epoch });
            }
            total += loss * chunk.len() as f64;
            adam.step(net, &grad, settings.learning_rate);
        }
        last_epoch_loss = total / num_examples.max(1) as f64;
    }
    Ok(last_epoch_loss)
}
