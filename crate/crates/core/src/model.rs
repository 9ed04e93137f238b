//! Fully connected ReLU network with softmax cross-entropy and hand-written
//! backpropagation.
//!
//! # Parameter layout
//!
//! All parameters live in one flat vector, layer by layer. Layer `k` maps
//! `dims[k]` inputs to `dims[k+1]` outputs and contributes
//!
//! 1. its weight matrix, `dims[k] * dims[k+1]` entries stored input-major:
//!    the weight from input `i` to output `j` sits at `i * dims[k+1] + j`;
//! 2. its bias vector, `dims[k+1]` entries.
//!
//! Gradients, sign vectors and residuals all index into this layout.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::rng::{substream, Domain};
use crate::vector::{GradVector, SignVector};

/// Layer sizes of the default MNIST network.
pub const DEFAULT_LAYER_DIMS: [usize; 3] = [784, 64, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

impl LayerSpan {
    fn weight(&self, i: usize, j: usize) -> usize {
        self.weights + i * self.fan_out + j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    layers: Vec<LayerSpan>,
    params: Vec<f64>,
}

/// A set of labelled examples handed to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    inputs: Vec<f32>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(input_dim: usize, inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch has no examples"));
        }
        check_len(input_dim * labels.len(), inputs.len())?;
        Ok(Self {
            input_dim,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn example(&self, k: usize) -> (&[f32], usize) {
        let d = self.input_dim;
        (&self.inputs[k * d..(k + 1) * d], self.labels[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        self.inputs
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }
}

/// Scratch buffers for one example's forward and backward pass.
#[derive(Debug, Clone)]
struct Workspace {
    /// Post-activation outputs of every layer; the last holds logits.
    acts: Vec<Vec<f64>>,
    /// Loss gradients w.r.t. each layer's pre-activation.
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        Self {
            acts: dims[1..].iter().map(|&n| vec![0.0; n]).collect(),
            deltas: dims[1..].iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Mean gradient of a mini-batch plus the loss observed while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGradient {
    pub grad: GradVector,
    pub mean_loss: f64,
    pub batch_len: usize,
}

impl MlpModel {
    fn layout(dims: &[usize]) -> Result<(Vec<LayerSpan>, usize)> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dims need at least two positive sizes, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(LayerSpan {
                fan_in,
                fan_out,
                weights: offset,
                biases: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Ok((layers, offset))
    }

    /// All-zero parameters.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let (layers, d) = Self::layout(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params: vec![0.0; d],
        })
    }

    /// Weights uniform in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = substream(seed, Domain::Init, 0, 0);
        for layer in &model.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut model.params[layer.weights..layer.biases] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(model)
    }

    /// Rebuild a model from its flat parameter vector.
    pub fn from_flat(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let (layers, d) = Self::layout(dims)?;
        check_len(d, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    /// Total parameter count `d`.
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn check_input(&self, input_dim: usize) -> Result<()> {
        check_len(self.input_dim(), input_dim)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_input(batch.input_dim)?;
        let classes = self.num_classes();
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    /// Forward pass leaving logits in the last activation; returns the loss.
    fn forward_into(&self, x: &[f32], label: usize, ws: &mut Workspace) -> f64 {
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(k);
            let out = &mut after[0];
            out.copy_from_slice(&self.params[layer.biases..layer.biases + layer.fan_out]);
            let mut accumulate = |i: usize, v: f64| {
                let row = &self.params[layer.weight(i, 0)..layer.weight(i, 0) + layer.fan_out];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += v * w;
                }
            };
            if k == 0 {
                // Image inputs are mostly zero.
                for (i, &v) in x.iter().enumerate() {
                    if v != 0.0 {
                        accumulate(i, f64::from(v));
                    }
                }
            } else {
                for (i, &v) in before[k - 1].iter().enumerate() {
                    if v != 0.0 {
                        accumulate(i, v);
                    }
                }
            }
            if k != last {
                out.iter_mut().for_each(|o| *o = o.max(0.0));
            }
        }
        let logits = &ws.acts[last];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        log_sum - logits[label]
    }

    /// Backward pass after `forward_into`; fills every layer's delta and
    /// returns the example's squared gradient norm.
    fn backward_into(&self, x: &[f32], label: usize, ws: &mut Workspace) -> f64 {
        let last = self.layers.len() - 1;
        {
            let logits = &ws.acts[last];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let delta = &mut ws.deltas[last];
            let mut total = 0.0;
            for (d, z) in delta.iter_mut().zip(logits) {
                *d = (z - max).exp();
                total += *d;
            }
            delta.iter_mut().for_each(|d| *d /= total);
            delta[label] -= 1.0;
        }
        for k in (1..=last).rev() {
            let layer = self.layers[k];
            let (lower, upper) = ws.deltas.split_at_mut(k);
            let below = &mut lower[k - 1];
            let delta = &upper[0];
            let act = &ws.acts[k - 1];
            for (i, b) in below.iter_mut().enumerate() {
                *b = if act[i] > 0.0 {
                    let row =
                        &self.params[layer.weight(i, 0)..layer.weight(i, 0) + layer.fan_out];
                    row.iter().zip(delta).map(|(w, d)| w * d).sum()
                } else {
                    0.0
                };
            }
        }

        // ‖a ⊗ δ‖² = ‖a‖²·‖δ‖², plus ‖δ‖² for the bias.
        let input_sq: f64 = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        let mut norm_sq = 0.0;
        for k in 0..=last {
            let delta_sq: f64 = ws.deltas[k].iter().map(|d| d * d).sum();
            let act_sq = if k == 0 {
                input_sq
            } else {
                ws.acts[k - 1].iter().map(|a| a * a).sum()
            };
            norm_sq += delta_sq * (act_sq + 1.0);
        }
        norm_sq
    }

    /// Add `scale` times the example's gradient into `grad`.
    fn accumulate_gradient(&self, x: &[f32], ws: &Workspace, scale: f64, grad: &mut [f64]) {
        for (k, layer) in self.layers.iter().enumerate() {
            let delta = &ws.deltas[k];
            let mut outer = |i: usize, a: f64| {
                let start = layer.weight(i, 0);
                let factor = scale * a;
                for (g, d) in grad[start..start + layer.fan_out].iter_mut().zip(delta) {
                    *g += factor * d;
                }
            };
            if k == 0 {
                for (i, &v) in x.iter().enumerate() {
                    if v != 0.0 {
                        outer(i, f64::from(v));
                    }
                }
            } else {
                for (i, &a) in ws.acts[k - 1].iter().enumerate() {
                    if a != 0.0 {
                        outer(i, a);
                    }
                }
            }
            for (g, d) in grad[layer.biases..layer.biases + layer.fan_out]
                .iter_mut()
                .zip(delta)
            {
                *g += scale * d;
            }
        }
    }

    fn predicted(ws: &Workspace) -> usize {
        let logits = ws.acts.last().expect("at least one layer");
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        best
    }

    /// Per-example cross-entropy losses and argmax predictions.
    pub fn forward(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<usize>)> {
        self.check_batch(batch)?;
        let mut ws = Workspace::new(&self.dims);
        let mut losses = Vec::with_capacity(batch.len());
        let mut predictions = Vec::with_capacity(batch.len());
        for (x, label) in batch.iter() {
            losses.push(self.forward_into(x, label, &mut ws));
            predictions.push(Self::predicted(&ws));
        }
        Ok((losses, predictions))
    }

    /// Gradient of each example's loss, in the flat parameter layout.
    pub fn per_example_gradients(&self, batch: &Batch) -> Result<Vec<GradVector>> {
        self.check_batch(batch)?;
        let mut ws = Workspace::new(&self.dims);
        Ok(batch
            .iter()
            .map(|(x, label)| {
                self.forward_into(x, label, &mut ws);
                self.backward_into(x, label, &mut ws);
                let mut grad = vec![0.0; self.num_params()];
                self.accumulate_gradient(x, &ws, 1.0, &mut grad);
                GradVector::new(grad)
            })
            .collect())
    }

    /// Gradient of the batch-mean loss.
    pub fn batch_gradient(&self, batch: &Batch) -> Result<GradVector> {
        self.clipped_mean_gradient(batch, f64::INFINITY)
            .map(|local| local.grad)
    }

    /// Mean over the batch of per-example gradients, each first clipped to L2
    /// norm `clip_bound`. Norms are obtained from the outer-product structure
    /// of each layer's gradient, so no per-example vector is materialized.
    pub fn clipped_mean_gradient(&self, batch: &Batch, clip_bound: f64) -> Result<LocalGradient> {
        if clip_bound.is_nan() || clip_bound <= 0.0 {
            return Err(Error::Domain(format!(
                "clip bound must be positive, got {clip_bound}"
            )));
        }
        self.check_batch(batch)?;
        let n = batch.len() as f64;
        let mut ws = Workspace::new(&self.dims);
        let mut grad = vec![0.0; self.num_params()];
        let mut loss_sum = 0.0;
        for (x, label) in batch.iter() {
            loss_sum += self.forward_into(x, label, &mut ws);
            let norm = self.backward_into(x, label, &mut ws).sqrt();
            let clip = if norm > clip_bound { clip_bound / norm } else { 1.0 };
            self.accumulate_gradient(x, &ws, clip / n, &mut grad);
        }
        Ok(LocalGradient {
            grad: GradVector::new(grad),
            mean_loss: loss_sum / n,
            batch_len: batch.len(),
        })
    }

    /// Mean loss and accuracy over a dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        self.check_input(data.input_dim())?;
        if data.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        let mut ws = Workspace::new(&self.dims);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, label) in data.iter() {
            if label >= self.num_classes() {
                return Err(Error::Domain(format!("label {label} out of range")));
            }
            loss += self.forward_into(x, label, &mut ws);
            correct += usize::from(Self::predicted(&ws) == label);
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// `w ← w − η·direction`.
    pub fn apply_update(&mut self, direction: &[f64], eta: f64) -> Result<()> {
        check_len(self.num_params(), direction.len())?;
        for (w, d) in self.params.iter_mut().zip(direction) {
            *w -= eta * d;
        }
        Ok(())
    }

    /// `w ← w − η·signs`; every parameter moves by exactly η.
    pub fn apply_sign_update(&mut self, signs: &SignVector, eta: f64) -> Result<()> {
        check_len(self.num_params(), signs.len())?;
        for (w, &s) in self.params.iter_mut().zip(signs.as_slice()) {
            if s > 0 {
                *w -= eta;
            } else {
                *w += eta;
            }
        }
        Ok(())
    }
}

/// Mini-batch gradient for one party: draw the next batch from its epoch
/// shuffle, clip each example's gradient to `clip_bound`, and average.
pub fn local_gradient<R: Rng + ?Sized>(
    model: &MlpModel,
    party: &mut crate::data::PartyData,
    batch_size: usize,
    clip_bound: f64,
    rng: &mut R,
) -> Result<LocalGradient> {
    let indices = party.next_batch(batch_size, rng)?;
    let batch = party.dataset().batch(&indices)?;
    model.clipped_mean_gradient(&batch, clip_bound)
}
