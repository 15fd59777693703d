//! A small MLP noise predictor with hand-written backpropagation and Adam.
//!
//! The network maps `[x, time_embedding, one_hot_label]` to a predicted noise
//! vector of the data dimension. With `time_embed_dim = 0` the timestep is
//! structurally absent from the input, which is the mode used by
//! single-latent-state models: their output cannot depend on `t`.
//!
//! Everything is 64-bit and sequential, so identical seeds give identical
//! weights on every platform and thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("time embedding dimension must be even, got {0}")]
    OddEmbedDim(usize),
    #[error("batch must not be empty")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for label_dim {label_dim}")]
    LabelOutOfRange { label: usize, label_dim: usize },
    #[error("model conditions on a label but none was provided")]
    MissingLabel,
    #[error("model has no layers")]
    NoLayers,
}

/// Hidden-layer nonlinearity. The output layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Anything that predicts the injected noise at a state. Implemented by
/// trained models and by analytic oracles used in tests and experiments.
pub trait EpsSource: Sync {
    fn eps(&self, x: &Vec2, t: usize, label: Option<usize>) -> Vec2;

    /// Predictions for a whole batch at one state. Implementations may reuse
    /// buffers across the batch; results must equal per-point [`EpsSource::eps`].
    fn eps_batch(&self, xs: &[Vec2], t: usize, label: Option<usize>, out: &mut Vec<Vec2>) {
        out.clear();
        out.extend(xs.iter().map(|x| self.eps(x, t, label)));
    }
}

/// Architecture description, independent of learned parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Even; 0 disables time conditioning entirely.
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    /// One-hot label width; 0 disables label conditioning.
    #[serde(default)]
    pub label_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_activation() -> Activation {
    Activation::Silu
}

fn default_time_embed_dim() -> usize {
    64
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            time_embed_dim: default_time_embed_dim(),
            label_dim: 0,
        }
    }
}

impl ModelSpec {
    /// The per-state variant: no time conditioning.
    pub fn single_state(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            activation: Activation::Silu,
            time_embed_dim: 0,
            label_dim: 0,
        }
    }
}

/// Sinusoidal timestep embedding: pairs `(sin(t / w_j), cos(t / w_j))` with
/// `dim / 2` wavelengths geometrically spaced from 1 to `t_count`.
pub fn time_embed(t: usize, t_count: usize, dim: usize) -> Result<Vec<f64>, ModelError> {
    if !dim.is_multiple_of(2) {
        return Err(ModelError::OddEmbedDim(dim));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let exponent = if half > 1 {
            j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let wavelength = (t_count as f64).powf(exponent);
        let phase = t as f64 / wavelength;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// Precomputed embeddings for every state of a schedule; the training and
/// sampling hot paths index this instead of recomputing sines.
#[derive(Debug, Clone)]
pub struct EmbedTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbedTable {
    pub fn new(t_count: usize, dim: usize) -> Result<Self, ModelError> {
        let rows = (0..t_count)
            .map(|t| time_embed(t, t_count, dim))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `[out_dim x in_dim]`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl DenseLayer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// The epsilon-predictor MLP together with its conditioning layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    data_dim: usize,
    time_embed_dim: usize,
    label_dim: usize,
    t_count: usize,
    activation: Activation,
    layers: Vec<DenseLayer>,
    init_seed: u64,
}

impl DenoiserModel {
    /// Initialize with per-layer uniform weights in
    /// `+/- sqrt(6 / (fan_in + fan_out))` and zero biases.
    pub fn init(spec: &ModelSpec, t_count: usize, init_seed: u64) -> Result<Self, ModelError> {
        if !spec.time_embed_dim.is_multiple_of(2) {
            return Err(ModelError::OddEmbedDim(spec.time_embed_dim));
        }
        let data_dim = 2;
        let in_dim = data_dim + spec.time_embed_dim + spec.label_dim;
        let mut sizes = Vec::with_capacity(spec.hidden.len() + 2);
        sizes.push(in_dim);
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(data_dim);

        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(DenseLayer {
                in_dim: fan_in,
                out_dim: fan_out,
                weights,
                biases: vec![0.0; fan_out],
            });
        }
        Ok(Self {
            data_dim,
            time_embed_dim: spec.time_embed_dim,
            label_dim: spec.label_dim,
            t_count,
            activation: spec.activation,
            layers,
            init_seed,
        })
    }

    /// Rebuild a model from persisted parts. `layer_sizes` is the full chain
    /// including input and output widths; `flat` is the parameter blob in
    /// layer order (weights row-major, then biases, per layer).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layer_sizes: &[usize],
        activation: Activation,
        time_embed_dim: usize,
        label_dim: usize,
        t_count: usize,
        init_seed: u64,
        flat: &[f64],
    ) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 {
            return Err(ModelError::NoLayers);
        }
        let data_dim = *layer_sizes.last().expect("non-empty");
        if layer_sizes[0] != data_dim + time_embed_dim + label_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "input width {} does not match data {} + embed {} + label {}",
                layer_sizes[0], data_dim, time_embed_dim, label_dim
            )));
        }
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        let mut offset = 0usize;
        for w in layer_sizes.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let n_w = in_dim * out_dim;
            let end = offset + n_w + out_dim;
            if end > flat.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "parameter blob too short: need {end}, have {}",
                    flat.len()
                )));
            }
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                weights: flat[offset..offset + n_w].to_vec(),
                biases: flat[offset + n_w..end].to_vec(),
            });
            offset = end;
        }
        if offset != flat.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "parameter blob too long: consumed {offset} of {}",
                flat.len()
            )));
        }
        Ok(Self {
            data_dim,
            time_embed_dim,
            label_dim,
            t_count,
            activation,
            layers,
            init_seed,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn time_embed_dim(&self) -> usize {
        self.time_embed_dim
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Full width chain `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Parameters in serialization order: per layer, weights row-major then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.biases);
        }
        flat
    }

    /// Overwrite parameters from serialization order.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n_w = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + n_w]);
            offset += n_w;
            let n_b = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + n_b]);
            offset += n_b;
        }
        Ok(())
    }

    fn build_input(
        &self,
        x: &Vec2,
        embed: &[f64],
        label: Option<usize>,
        buf: &mut Vec<f64>,
    ) -> Result<(), ModelError> {
        if embed.len() != self.time_embed_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "embedding width {} != {}",
                embed.len(),
                self.time_embed_dim
            )));
        }
        buf.clear();
        buf.extend_from_slice(x);
        buf.extend_from_slice(embed);
        if self.label_dim > 0 {
            let label = label.ok_or(ModelError::MissingLabel)?;
            if label >= self.label_dim {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    label_dim: self.label_dim,
                });
            }
            let base = buf.len();
            buf.resize(base + self.label_dim, 0.0);
            buf[base + label] = 1.0;
        }
        Ok(())
    }

    fn forward_from_input(&self, input: &[f64], scratch: &mut Scratch) {
        debug_assert_eq!(input.len(), self.input_dim());
        let n_layers = self.layers.len();
        for (idx, layer) in self.layers.iter().enumerate() {
            {
                let src: &[f64] = if idx == 0 {
                    input
                } else {
                    &scratch.acts[idx - 1]
                };
                let zs = &mut scratch.zs[idx];
                zs.clear();
                for o in 0..layer.out_dim {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let mut acc = layer.biases[o];
                    for (w, v) in row.iter().zip(src) {
                        acc += w * v;
                    }
                    zs.push(acc);
                }
            }
            let is_output = idx == n_layers - 1;
            let zs = &scratch.zs[idx];
            let acts = &mut scratch.acts[idx];
            acts.clear();
            if is_output {
                acts.extend_from_slice(zs);
            } else {
                acts.extend(zs.iter().map(|&z| self.activation.apply(z)));
            }
        }
    }

    /// Predicted noise for one point, given a precomputed embedding row.
    pub fn forward_embedded(
        &self,
        x: &Vec2,
        embed: &[f64],
        label: Option<usize>,
        scratch: &mut Scratch,
    ) -> Result<Vec2, ModelError> {
        self.build_input(x, embed, label, &mut scratch.input)?;
        let input = std::mem::take(&mut scratch.input);
        self.forward_from_input(&input, scratch);
        scratch.input = input;
        let out = scratch.acts.last().expect("at least one layer");
        Ok([out[0], out[1]])
    }

    /// Predicted noise for one point; computes the embedding inline.
    pub fn forward(&self, x: &Vec2, t: usize, label: Option<usize>) -> Result<Vec2, ModelError> {
        let embed = time_embed(t, self.t_count, self.time_embed_dim)?;
        let mut scratch = Scratch::for_model(self);
        self.forward_embedded(x, &embed, label, &mut scratch)
    }

    /// Mean-squared loss and exact parameter gradients over a batch.
    ///
    /// The loss is averaged over batch elements and output dimensions, so a
    /// constant prediction error of 1 in every component gives loss 1.
    pub fn loss_and_grad(
        &self,
        batch: &[TrainSample],
        embeds: &EmbedTable,
        grads: &mut Gradients,
        scratch: &mut Scratch,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if embeds.dim() != self.time_embed_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "embed table width {} != {}",
                embeds.dim(),
                self.time_embed_dim
            )));
        }
        grads.zero();
        let norm = 1.0 / (batch.len() * self.data_dim) as f64;
        let mut loss = 0.0;
        let n_layers = self.layers.len();

        for sample in batch {
            self.build_input(x_of(sample), embeds.row(sample.t), sample.label, &mut scratch.input)?;
            let input = std::mem::take(&mut scratch.input);
            self.forward_from_input(&input, scratch);

            // Output delta: d(loss)/d(z_out) = 2 * (pred - eps) * norm.
            {
                let out = &scratch.acts[n_layers - 1];
                let delta = &mut scratch.deltas[n_layers - 1];
                delta.clear();
                for (pred, target) in out.iter().zip(&sample.eps) {
                    let err = pred - target;
                    loss += err * err * norm;
                    delta.push(2.0 * err * norm);
                }
            }

            // Backward pass.
            for idx in (0..n_layers).rev() {
                let layer = &self.layers[idx];
                // Gradients for this layer.
                {
                    let delta = &scratch.deltas[idx];
                    let src: &[f64] = if idx == 0 {
                        &input
                    } else {
                        &scratch.acts[idx - 1]
                    };
                    let g = &mut grads.layers[idx];
                    for (o, &dz) in delta.iter().enumerate() {
                        g.biases[o] += dz;
                        let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (gw, v) in row.iter_mut().zip(src) {
                            *gw += dz * v;
                        }
                    }
                }
                // Delta for the previous layer.
                if idx > 0 {
                    let (d_prev_slice, d_cur_slice) = scratch.deltas.split_at_mut(idx);
                    let delta: &[f64] = &d_cur_slice[0];
                    let d_prev = &mut d_prev_slice[idx - 1];
                    d_prev.clear();
                    d_prev.resize(layer.in_dim, 0.0);
                    for (o, &dz) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (dp, w) in d_prev.iter_mut().zip(row) {
                            *dp += dz * w;
                        }
                    }
                    let zs_prev = &scratch.zs[idx - 1];
                    for (dp, &z) in d_prev.iter_mut().zip(zs_prev) {
                        *dp *= self.activation.derivative(z);
                    }
                }
            }
            scratch.input = input;
        }
        Ok(loss)
    }
}

fn x_of(sample: &TrainSample) -> &Vec2 {
    &sample.x_t
}

/// One supervised pair for the noise-prediction loss.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x_t: Vec2,
    pub t: usize,
    pub label: Option<usize>,
    pub eps: Vec2,
}

/// Reusable forward/backward buffers sized for one model.
#[derive(Debug, Clone)]
pub struct Scratch {
    input: Vec<f64>,
    zs: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn for_model(model: &DenoiserModel) -> Self {
        let widths: Vec<usize> = model.layers.iter().map(|l| l.out_dim).collect();
        Self {
            input: Vec::with_capacity(model.input_dim()),
            zs: widths.iter().map(|&w| Vec::with_capacity(w)).collect(),
            acts: widths.iter().map(|&w| Vec::with_capacity(w)).collect(),
            deltas: widths.iter().map(|&w| Vec::with_capacity(w)).collect(),
        }
    }
}

/// Parameter gradients shaped like a model.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
struct LayerGrad {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &DenoiserModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for layer in &mut self.layers {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
    }

    /// Gradients in the same flat order as [`DenoiserModel::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.biases);
        }
        flat
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(0.0_f64, |m, &g| m.max(g.abs()))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state: step count and first/second moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    step: u64,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
}

impl AdamState {
    pub fn new(model: &DenoiserModel, params: AdamParams) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect::<Vec<_>>()
        };
        Self {
            params,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    model: &mut DenoiserModel,
    state: &mut AdamState,
    grads: &Gradients,
) -> Result<(), ModelError> {
    if grads.layers.len() != model.layers.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "gradient layer count {} != {}",
            grads.layers.len(),
            model.layers.len()
        )));
    }
    for (idx, layer) in model.layers.iter().enumerate() {
        if grads.layers[idx].weights.len() != layer.weights.len()
            || grads.layers[idx].biases.len() != layer.biases.len()
        {
            return Err(ModelError::ShapeMismatch(format!(
                "gradient shape mismatch at layer {idx}"
            )));
        }
    }

    state.step += 1;
    let p = state.params;
    let bc1 = 1.0 - p.beta1.powi(state.step as i32);
    let bc2 = 1.0 - p.beta2.powi(state.step as i32);

    for (idx, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        update_params(&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights, p, bc1, bc2);
        update_params(&mut layer.biases, &g.biases, &mut m.biases, &mut v.biases, p, bc1, bc2);
    }
    Ok(())
}

#[inline]
fn update_params(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    p: AdamParams,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..w.len() {
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= p.lr * m_hat / (v_hat.sqrt() + p.eps);
    }
}

impl EpsSource for DenoiserModel {
    fn eps(&self, x: &Vec2, t: usize, label: Option<usize>) -> Vec2 {
        self.forward(x, t, label)
            .expect("model forward on validated inputs")
    }

    fn eps_batch(&self, xs: &[Vec2], t: usize, label: Option<usize>, out: &mut Vec<Vec2>) {
        let embed =
            time_embed(t, self.t_count, self.time_embed_dim).expect("validated embed dim");
        let mut scratch = Scratch::for_model(self);
        out.clear();
        for x in xs {
            out.push(
                self.forward_embedded(x, &embed, label, &mut scratch)
                    .expect("model forward on validated inputs"),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>, te: usize, label: usize) -> ModelSpec {
        ModelSpec {
            hidden,
            activation: Activation::Silu,
            time_embed_dim: te,
            label_dim: label,
        }
    }

    #[test]
    fn embed_at_zero_is_sin_cos_pattern() {
        assert_eq!(time_embed(0, 1000, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!(time_embed(3, 1000, 5).is_err());
        assert_eq!(time_embed(7, 1000, 0).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn embed_components_bounded() {
        for t in [0usize, 1, 500, 999] {
            for &v in &time_embed(t, 1000, 64).unwrap() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn embed_distinguishes_all_timesteps() {
        let table = EmbedTable::new(1000, 64).unwrap();
        let mut min_sep = f64::INFINITY;
        for a in 0..1000 {
            for b in (a + 1)..1000 {
                let sep = table
                    .row(a)
                    .iter()
                    .zip(table.row(b))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0_f64, f64::max);
                min_sep = min_sep.min(sep);
            }
        }
        assert!(min_sep > 1e-6, "closest embedding pair separated by {min_sep}");
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut model = DenoiserModel::init(&spec(vec![8], 4, 0), 100, 3).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_flat_params(&zeros).unwrap();
        assert_eq!(model.forward(&[1.5, -0.5], 42, None).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_x_through() {
        // Single affine layer, weights = identity on the x slice.
        let mut model = DenoiserModel::init(&spec(vec![], 4, 0), 100, 3).unwrap();
        let mut flat = vec![0.0; model.param_count()];
        // Row-major [2 x 6]: rows of the output layer.
        flat[0] = 1.0; // out0 <- x0
        flat[6 + 1] = 1.0; // out1 <- x1
        model.set_flat_params(&flat).unwrap();
        let x = [0.3, -2.25];
        assert_eq!(model.forward(&x, 7, None).unwrap(), x);
    }

    /// Second forward implementation with a different accumulation order.
    fn forward_oracle(model: &DenoiserModel, input: &[f64]) -> Vec<f64> {
        let sizes = model.layer_sizes();
        let flat = model.flat_params();
        let mut offset = 0;
        let mut cur = input.to_vec();
        for (l, w) in sizes.windows(2).enumerate() {
            let (in_dim, out_dim) = (w[0], w[1]);
            let weights = &flat[offset..offset + in_dim * out_dim];
            offset += in_dim * out_dim;
            let biases = &flat[offset..offset + out_dim];
            offset += out_dim;
            let mut next = biases.to_vec();
            // Column-major accumulation: input-outer instead of output-outer.
            for (i, &v) in cur.iter().enumerate() {
                for o in 0..out_dim {
                    next[o] += weights[o * in_dim + i] * v;
                }
            }
            if l + 1 < sizes.len() - 1 {
                for z in &mut next {
                    *z = model.activation().apply(*z);
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_independent_arithmetic() {
        let model = DenoiserModel::init(&spec(vec![13, 7], 6, 0), 50, 99).unwrap();
        let x = [0.8, -1.1];
        let embed = time_embed(17, 50, 6).unwrap();
        let mut input = x.to_vec();
        input.extend_from_slice(&embed);
        let expected = forward_oracle(&model, &input);
        let got = model.forward(&x, 17, None).unwrap();
        for d in 0..2 {
            let rel = (got[d] - expected[d]).abs() / expected[d].abs().max(1e-12);
            assert!(rel <= 1e-12, "dim {d}: {} vs {}", got[d], expected[d]);
        }
    }

    #[test]
    fn phi_mode_output_ignores_t_bitwise() {
        let model = DenoiserModel::init(&spec(vec![16, 16], 0, 0), 1000, 11).unwrap();
        let x = [0.7, 0.2];
        let a = model.forward(&x, 3, None).unwrap();
        let b = model.forward(&x, 998, None).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn label_conditioning_changes_output_and_validates() {
        let model = DenoiserModel::init(&spec(vec![16], 4, 3), 100, 5).unwrap();
        let x = [0.1, 0.4];
        let a = model.forward(&x, 10, Some(0)).unwrap();
        let b = model.forward(&x, 10, Some(2)).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            model.forward(&x, 10, None),
            Err(ModelError::MissingLabel)
        ));
        assert!(matches!(
            model.forward(&x, 10, Some(3)),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    fn batch_for(model: &DenoiserModel, n: usize, seed: u64) -> Vec<TrainSample> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        (0..n)
            .map(|_| TrainSample {
                x_t: [normal.sample(&mut rng), normal.sample(&mut rng)],
                t: rng.random_range(0..model.t_count()),
                label: if model.label_dim() > 0 {
                    Some(rng.random_range(0..model.label_dim()))
                } else {
                    None
                },
                eps: [normal.sample(&mut rng), normal.sample(&mut rng)],
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_means_zero_loss_and_zero_grads() {
        // All-zero model predicts zero; make the targets zero too.
        let mut model = DenoiserModel::init(&spec(vec![4], 0, 0), 10, 1).unwrap();
        model.set_flat_params(&vec![0.0; model.param_count()]).unwrap();
        let batch: Vec<TrainSample> = (0..4)
            .map(|i| TrainSample {
                x_t: [i as f64, -(i as f64)],
                t: 9,
                label: None,
                eps: [0.0, 0.0],
            })
            .collect();
        let table = EmbedTable::new(10, 0).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        let mut scratch = Scratch::for_model(&model);
        let loss = model
            .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
            .unwrap();
        assert_eq!(loss, 0.0);
        // Output-layer gradients vanish with a zero residual.
        let flat = grads.flat();
        let out_params = 4 * 2 + 2;
        for g in &flat[flat.len() - out_params..] {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn constant_unit_error_gives_unit_loss() {
        // Output biases produce a constant prediction c; targets are c - 1.
        let mut model = DenoiserModel::init(&spec(vec![], 0, 0), 10, 1).unwrap();
        let mut flat = vec![0.0; model.param_count()];
        flat[4] = 0.5; // bias 0
        flat[5] = -2.0; // bias 1
        model.set_flat_params(&flat).unwrap();
        let batch: Vec<TrainSample> = (0..3)
            .map(|_| TrainSample {
                x_t: [0.0, 0.0],
                t: 0,
                label: None,
                eps: [-0.5, -3.0],
            })
            .collect();
        let table = EmbedTable::new(10, 0).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        let mut scratch = Scratch::for_model(&model);
        let loss = model
            .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
            .unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let model = DenoiserModel::init(&spec(vec![4], 0, 0), 10, 1).unwrap();
        let table = EmbedTable::new(10, 0).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        let mut scratch = Scratch::for_model(&model);
        assert!(matches!(
            model.loss_and_grad(&[], &table, &mut grads, &mut scratch),
            Err(ModelError::EmptyBatch)
        ));
    }

    /// Central finite differences over every parameter of a small model.
    #[test]
    fn gradients_match_finite_differences_exhaustively() {
        let model = DenoiserModel::init(&spec(vec![6, 5], 4, 2), 20, 77).unwrap();
        let batch = batch_for(&model, 5, 123);
        let table = EmbedTable::new(20, 4).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        let mut scratch = Scratch::for_model(&model);
        model
            .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
            .unwrap();
        let analytic = grads.flat();

        let h = 1e-6;
        let base = model.flat_params();
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let mut probe = model.clone();
            let mut params = base.clone();
            params[i] = base[i] + h;
            probe.set_flat_params(&params).unwrap();
            let up = probe
                .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
                .unwrap();
            params[i] = base[i] - h;
            probe.set_flat_params(&params).unwrap();
            let down = probe
                .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
                .unwrap();
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn adam_zero_gradient_leaves_weights_and_increments_step() {
        let mut model = DenoiserModel::init(&spec(vec![4], 0, 0), 10, 1).unwrap();
        let before = model.flat_params();
        let mut state = AdamState::new(&model, AdamParams::default());
        let grads = Gradients::zeros_like(&model);
        adam_step(&mut model, &mut state, &grads).unwrap();
        assert_eq!(model.flat_params(), before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut model = DenoiserModel::init(&spec(vec![], 0, 0), 10, 1).unwrap();
        let before = model.flat_params();
        // Vanishing eps: the bias-corrected update is exactly lr * g / |g|,
        // while zero-gradient parameters still divide by a nonzero value.
        let mut state = AdamState::new(
            &model,
            AdamParams {
                lr: 0.01,
                eps: 1e-300,
                ..AdamParams::default()
            },
        );
        let mut grads = Gradients::zeros_like(&model);
        let mut g = vec![0.0; model.param_count()];
        g[0] = 0.3;
        g[3] = -1.7;
        grads.layers[0].weights[0] = g[0];
        grads.layers[0].weights[3] = g[3];
        adam_step(&mut model, &mut state, &grads).unwrap();
        let after = model.flat_params();
        // Bias correction divides out the fresh-moment factors, so the first
        // update is the signed learning rate up to rounding.
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-15);
        assert!((after[3] - (before[3] + 0.01)).abs() < 1e-15);
        assert_eq!(after[1], before[1]);
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // Single affine layer on a fixed input: the loss is a convex
        // quadratic in the parameters.
        let mut model = DenoiserModel::init(&spec(vec![], 0, 0), 10, 1).unwrap();
        model.set_flat_params(&vec![0.0; model.param_count()]).unwrap();
        let batch = vec![TrainSample {
            x_t: [1.0, -0.5],
            t: 0,
            label: None,
            eps: [3.0, -2.0],
        }];
        let table = EmbedTable::new(10, 0).unwrap();
        let mut grads = Gradients::zeros_like(&model);
        let mut scratch = Scratch::for_model(&model);
        // Light momentum and a short second-moment memory let the oscillation
        // around the optimum decay well within the step budget.
        let params = AdamParams {
            lr: 0.2,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        };
        let mut state = AdamState::new(&model, params);
        for _ in 0..100 {
            model
                .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
                .unwrap();
            adam_step(&mut model, &mut state, &grads).unwrap();
        }
        model
            .loss_and_grad(&batch, &table, &mut grads, &mut scratch)
            .unwrap();
        assert!(
            grads.max_abs() < 1e-6,
            "gradient magnitude {} after 100 steps",
            grads.max_abs()
        );
    }

    #[test]
    fn flat_roundtrip_preserves_bits() {
        let model = DenoiserModel::init(&spec(vec![9, 3], 8, 4), 123, 5).unwrap();
        let flat = model.flat_params();
        let rebuilt = DenoiserModel::from_parts(
            &model.layer_sizes(),
            model.activation(),
            model.time_embed_dim(),
            model.label_dim(),
            model.t_count(),
            model.init_seed(),
            &flat,
        )
        .unwrap();
        assert_eq!(model, rebuilt);
        assert!(DenoiserModel::from_parts(
            &model.layer_sizes(),
            model.activation(),
            model.time_embed_dim(),
            model.label_dim(),
            model.t_count(),
            model.init_seed(),
            &flat[..flat.len() - 1],
        )
        .is_err());
    }
}
