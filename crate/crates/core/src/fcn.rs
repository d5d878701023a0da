//! Fully convolutional waveform-to-waveform model.
//!
//! Every layer is a same-length, zero-padded cross-correlation with a centred
//! window: for a filter with `L` taps and `h = (L - 1) / 2`,
//!
//! ```text
//! y_j(t) = act( b_j + sum_c sum_l w[j][c][l] * x[inputs_j[c]](t + l - h) )
//! ```
//!
//! Filters keep their own list of input channels so the same type describes a
//! dense model, a masked model, and a compacted model with ragged connectivity.
//! A filter whose channels are all masked (or removed) emits exactly zero; its
//! bias is inactive from then on.
//!
//! Parameters are held as `f64` but stay on the `f32` grid: initialisation and
//! every optimiser update round through `f32`, which is what the model file
//! stores.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{PairedExample, Waveform};

/// Multichannel signal, one `Vec` per channel, all of equal length.
pub type Channels = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub filters: usize,
    pub taps: usize,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn new(filters: usize, taps: usize, activation: Activation, bias: bool) -> Self {
        Self {
            filters,
            taps,
            activation,
            bias,
        }
    }
}

/// Architecture recipe. The first layer always reads a single waveform channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcnConfig {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl Default for FcnConfig {
    /// Three layers of 11 taps: 16 tanh filters, 16 tanh filters, one linear output.
    fn default() -> Self {
        Self {
            layers: vec![
                LayerSpec::new(16, 11, Activation::Tanh, true),
                LayerSpec::new(16, 11, Activation::Tanh, true),
                LayerSpec::new(1, 11, Activation::Identity, true),
            ],
            seed: 7,
        }
    }
}

impl FcnConfig {
    /// Bias-free 8-layer, 55-tap, 30-filter network holding exactly 300,300
    /// weights. Used for size arithmetic; too large to train in tests.
    pub fn reference_scale() -> Self {
        let mut layers = vec![LayerSpec::new(30, 55, Activation::Tanh, false); 7];
        layers.push(LayerSpec::new(1, 55, Activation::Identity, false));
        Self { layers, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Parameter("model needs at least one layer".into()));
        };
        if let Some(bad) = self.layers.iter().find(|l| l.filters == 0 || l.taps == 0) {
            return Err(Error::Parameter(format!(
                "layer with {} filters and {} taps",
                bad.filters, bad.taps
            )));
        }
        if last.filters != 1 || last.activation != Activation::Identity {
            return Err(Error::Parameter(
                "final layer must have one filter and identity activation".into(),
            ));
        }
        Ok(())
    }
}

/// One filter `F_j`: a weight row of `taps` values for each input channel it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    /// Index of this filter in the layer as originally built.
    pub id: usize,
    /// Positions, in the previous layer's current output, of the channels read.
    pub inputs: Vec<usize>,
    /// `inputs.len() * taps` weights, channel-major.
    pub weights: Vec<f64>,
    /// Channel mask; `false` channels hold zero weights and contribute nothing.
    pub active: Vec<bool>,
    pub bias: f64,
}

impl Filter {
    pub fn channel(&self, c: usize, taps: usize) -> &[f64] {
        &self.weights[c * taps..(c + 1) * taps]
    }

    pub fn channel_mut(&mut self, c: usize, taps: usize) -> &mut [f64] {
        &mut self.weights[c * taps..(c + 1) * taps]
    }

    pub fn active_channels(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Whether the filter's output is identically zero: every stored channel
    /// is masked, or it stores no channels and has a zero bias. Dead filters
    /// emit zero and their bias is inactive. A channel-less filter with a
    /// nonzero bias emits the constant `act(bias)`.
    pub fn is_dead(&self) -> bool {
        if self.active.is_empty() {
            self.bias == 0.0
        } else {
            self.active_channels() == 0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub taps: usize,
    pub activation: Activation,
    pub has_bias: bool,
    pub filters: Vec<Filter>,
}

impl ConvLayer {
    /// Dense layer with every filter reading every input channel.
    pub fn dense(
        weights: Vec<Vec<Vec<f64>>>,
        biases: Vec<f64>,
        activation: Activation,
        has_bias: bool,
    ) -> Result<Self> {
        let in_channels = weights.first().map_or(0, |f| f.len());
        let taps = weights
            .first()
            .and_then(|f| f.first())
            .map_or(0, |c| c.len());
        if weights.is_empty() || in_channels == 0 || taps == 0 || biases.len() != weights.len() {
            return Err(Error::Shape("dense layer needs J, I, L >= 1 and J biases".into()));
        }
        let mut filters = Vec::with_capacity(weights.len());
        for (j, (rows, bias)) in weights.into_iter().zip(biases).enumerate() {
            if rows.len() != in_channels || rows.iter().any(|r| r.len() != taps) {
                return Err(Error::Shape(format!("filter {j} is not {in_channels}x{taps}")));
            }
            filters.push(Filter {
                id: j,
                inputs: (0..in_channels).collect(),
                weights: rows.concat(),
                active: vec![true; in_channels],
                bias: if has_bias { bias } else { 0.0 },
            });
        }
        let layer = Self {
            in_channels,
            taps,
            activation,
            has_bias,
            filters,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn filter_count(&self) -> usize {
        self.filters.len()
    }

    fn half_window(&self) -> isize {
        (self.taps as isize - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 {
            return Err(Error::Shape("layer needs at least one tap".into()));
        }
        for f in &self.filters {
            if f.weights.len() != f.inputs.len() * self.taps || f.active.len() != f.inputs.len() {
                return Err(Error::Shape(format!(
                    "filter {} stores {} weights for {} channels of {} taps",
                    f.id,
                    f.weights.len(),
                    f.inputs.len(),
                    self.taps
                )));
            }
            if f.inputs.windows(2).any(|w| w[0] >= w[1])
                || f.inputs.last().is_some_and(|&i| i >= self.in_channels)
            {
                return Err(Error::Shape(format!(
                    "filter {} has invalid input list {:?} for {} channels",
                    f.id, f.inputs, self.in_channels
                )));
            }
            if f.weights.iter().any(|w| !w.is_finite()) || !f.bias.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "filter {} has non-finite parameters",
                    f.id
                )));
            }
            if !self.has_bias && f.bias != 0.0 {
                return Err(Error::Integrity(format!(
                    "bias-free layer has bias on filter {}",
                    f.id
                )));
            }
        }
        Ok(())
    }

    /// Zeroes the weights of every masked channel.
    pub fn apply_mask(&mut self) {
        let taps = self.taps;
        for f in &mut self.filters {
            for c in 0..f.inputs.len() {
                if !f.active[c] {
                    f.channel_mut(c, taps).fill(0.0);
                }
            }
        }
    }

    /// Pre-activation sums `z_j(t)`; dead filters yield `None`.
    fn pre_activations(&self, input: &[Vec<f64>], len: usize) -> Vec<Option<Vec<f64>>> {
        let h = self.half_window();
        self.filters
            .iter()
            .map(|f| {
                if f.is_dead() {
                    return None;
                }
                let mut z = vec![f.bias; len];
                for (c, &src) in f.inputs.iter().enumerate() {
                    if !f.active[c] {
                        continue;
                    }
                    let x = &input[src];
                    for (l, &w) in f.channel(c, self.taps).iter().enumerate() {
                        let (t0, t1, s) = tap_range(l, h, len);
                        if t0 >= t1 {
                            continue;
                        }
                        let xs = &x[(t0 as isize + s) as usize..(t1 as isize + s) as usize];
                        for (zt, &xt) in z[t0..t1].iter_mut().zip(xs) {
                            *zt += w * xt;
                        }
                    }
                }
                Some(z)
            })
            .collect()
    }

    fn check_input(&self, input: &[Vec<f64>], len: usize) -> Result<()> {
        if input.len() != self.in_channels {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.in_channels,
                input.len()
            )));
        }
        if input.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("input channels differ in length".into()));
        }
        Ok(())
    }
}

/// Valid output range `[t0, t1)` and input shift for tap `l`.
fn tap_range(l: usize, h: isize, len: usize) -> (usize, usize, isize) {
    let s = l as isize - h;
    let t0 = (-s).max(0) as usize;
    let t1 = (len as isize - s).clamp(0, len as isize) as usize;
    (t0.min(len), t1, s)
}

/// Applies one layer to an `I x T` signal, producing `J x T`.
pub fn conv_forward(layer: &ConvLayer, input: &[Vec<f64>]) -> Result<Channels> {
    let len = input
        .first()
        .ok_or_else(|| Error::Shape("input has no channels".into()))?
        .len();
    forward_with_len(layer, input, len)
}

/// Like [`conv_forward`] but with an explicit length, so layers whose inputs
/// were all pruned away still produce `J x T` output.
fn forward_with_len(layer: &ConvLayer, input: &[Vec<f64>], len: usize) -> Result<Channels> {
    layer.check_input(input, len)?;
    let act = layer.activation;
    Ok(layer
        .pre_activations(input, len)
        .into_iter()
        .map(|z| match z {
            Some(mut z) => {
                z.iter_mut().for_each(|v| *v = act.apply(*v));
                z
            }
            None => vec![0.0; len],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    pub layers: Vec<ConvLayer>,
    pub config: FcnConfig,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl FcnModel {
    /// Randomly initialised dense model; weights uniform in `±sqrt(1/(I·L))`,
    /// biases zero.
    pub fn new(config: FcnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut in_channels = 1;
        for spec in &config.layers {
            let bound = (1.0 / (in_channels * spec.taps) as f64).sqrt();
            let filters = (0..spec.filters)
                .map(|j| Filter {
                    id: j,
                    inputs: (0..in_channels).collect(),
                    weights: (0..in_channels * spec.taps)
                        .map(|_| round_f32(rng.random_range(-bound..bound)))
                        .collect(),
                    active: vec![true; in_channels],
                    bias: 0.0,
                })
                .collect();
            layers.push(ConvLayer {
                in_channels,
                taps: spec.taps,
                activation: spec.activation,
                has_bias: spec.bias,
                filters,
            });
            in_channels = spec.filters;
        }
        Ok(Self { layers, config })
    }

    pub fn from_layers(layers: Vec<ConvLayer>, config: FcnConfig) -> Result<Self> {
        let model = Self { layers, config };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Shape("model has no layers".into()));
        };
        if last.filters.len() != 1 {
            return Err(Error::Shape("final layer must emit one channel".into()));
        }
        let mut expected = 1;
        for (n, layer) in self.layers.iter().enumerate() {
            if layer.in_channels != expected {
                return Err(Error::Shape(format!(
                    "layer {n} reads {} channels but receives {expected}",
                    layer.in_channels
                )));
            }
            layer.validate()?;
            expected = layer.filters.len();
        }
        Ok(())
    }

    /// Fails when a masked channel still carries a nonzero weight.
    pub fn check_mask_integrity(&self) -> Result<()> {
        for (n, layer) in self.layers.iter().enumerate() {
            for f in &layer.filters {
                for c in 0..f.inputs.len() {
                    if !f.active[c] && f.channel(c, layer.taps).iter().any(|&w| w != 0.0) {
                        return Err(Error::Integrity(format!(
                            "layer {n} filter {} channel {} is masked but nonzero",
                            f.id, f.inputs[c]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_masks(&mut self) {
        self.layers.iter_mut().for_each(ConvLayer::apply_mask);
    }

    pub fn masked_channels(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.filters)
            .map(|f| f.active.len() - f.active_channels())
            .sum()
    }

    pub fn total_channels(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.filters)
            .map(|f| f.inputs.len())
            .sum()
    }

    /// Weight count; `active_only` skips masked channels.
    pub fn count_weights(&self, active_only: bool) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.filters
                    .iter()
                    .map(|f| {
                        let ch = if active_only {
                            f.active_channels()
                        } else {
                            f.inputs.len()
                        };
                        ch * l.taps
                    })
                    .sum::<usize>()
            })
            .sum()
    }

    /// Weights plus biases. With `active_only`, masked channels are skipped and
    /// only filters with at least one active channel contribute a bias.
    pub fn count_params(&self, active_only: bool) -> usize {
        let biases: usize = self
            .layers
            .iter()
            .filter(|l| l.has_bias)
            .map(|l| {
                l.filters
                    .iter()
                    .filter(|f| !active_only || !f.is_dead())
                    .count()
            })
            .sum();
        self.count_weights(active_only) + biases
    }

    /// Parameters in layer → filter → (weights, bias) order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for f in &l.filters {
                out.extend_from_slice(&f.weights);
                if l.has_bias {
                    out.push(f.bias);
                }
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.flat_len(),
                params.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for f in &mut l.filters {
                let n = f.weights.len();
                f.weights.copy_from_slice(&params[k..k + n]);
                k += n;
                if l.has_bias {
                    f.bias = params[k];
                    k += 1;
                }
            }
        }
        Ok(())
    }

    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.filters
                    .iter()
                    .map(|f| f.weights.len() + usize::from(l.has_bias))
                    .sum::<usize>()
            })
            .sum()
    }

    /// Which flat parameters the optimiser may touch: weights of active
    /// channels and biases of live filters.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.flat_len());
        for l in &self.layers {
            for f in &l.filters {
                for &a in &f.active {
                    out.extend(std::iter::repeat_n(a, l.taps));
                }
                if l.has_bias {
                    out.push(!f.is_dead());
                }
            }
        }
        out
    }

    fn flat_offsets(&self) -> Vec<Vec<usize>> {
        let mut k = 0;
        self.layers
            .iter()
            .map(|l| {
                l.filters
                    .iter()
                    .map(|f| {
                        let at = k;
                        k += f.weights.len() + usize::from(l.has_bias);
                        at
                    })
                    .collect()
            })
            .collect()
    }
}

/// Runs the whole model on a waveform; output has the input's length.
pub fn fcn_forward(model: &FcnModel, input: &Waveform) -> Result<Waveform> {
    let len = input.len();
    let mut x: Channels = vec![input.samples().to_vec()];
    for layer in &model.layers {
        x = forward_with_len(layer, &x, len)?;
    }
    let out = x
        .into_iter()
        .next()
        .ok_or_else(|| Error::Shape("model produced no output channel".into()))?;
    Waveform::new(out, input.sample_rate())
}

/// Squared-error sum over one example and its gradient in flat-parameter order.
fn example_gradient(
    model: &FcnModel,
    offsets: &[Vec<usize>],
    ex: &PairedExample,
) -> Result<(f64, Vec<f64>)> {
    let len = ex.noisy.len();
    if ex.clean.len() != len {
        return Err(Error::Shape("example clean/noisy lengths differ".into()));
    }
    // Forward, keeping every layer's input.
    let mut acts: Vec<Channels> = vec![vec![ex.noisy.samples().to_vec()]];
    for layer in &model.layers {
        let next = forward_with_len(layer, acts.last().unwrap(), len)?;
        acts.push(next);
    }
    let out = &acts.last().unwrap()[0];
    let mut sse = 0.0;
    let mut dout: Channels = vec![out
        .iter()
        .zip(ex.clean.samples())
        .map(|(y, c)| {
            let e = y - c;
            sse += e * e;
            2.0 * e
        })
        .collect()];

    let mut grad = vec![0.0; model.flat_len()];
    for (n, layer) in model.layers.iter().enumerate().rev() {
        let input = &acts[n];
        let output = &acts[n + 1];
        let h = layer.half_window();
        let need_dinput = n > 0;
        let mut dinput: Channels = if need_dinput {
            vec![vec![0.0; len]; layer.in_channels]
        } else {
            Vec::new()
        };
        for (j, f) in layer.filters.iter().enumerate() {
            if f.is_dead() {
                continue;
            }
            let dz: Vec<f64> = dout[j]
                .iter()
                .zip(&output[j])
                .map(|(d, &y)| d * layer.activation.derivative_from_output(y))
                .collect();
            let base = offsets[n][j];
            if layer.has_bias {
                grad[base + f.weights.len()] = dz.iter().sum();
            }
            for (c, &src) in f.inputs.iter().enumerate() {
                if !f.active[c] {
                    continue;
                }
                let x = &input[src];
                for (l, &w) in f.channel(c, layer.taps).iter().enumerate() {
                    let (t0, t1, s) = tap_range(l, h, len);
                    if t0 >= t1 {
                        continue;
                    }
                    let lo = (t0 as isize + s) as usize;
                    let hi = (t1 as isize + s) as usize;
                    grad[base + c * layer.taps + l] =
                        dz[t0..t1].iter().zip(&x[lo..hi]).map(|(a, b)| a * b).sum();
                    if need_dinput {
                        for (dx, &d) in dinput[src][lo..hi].iter_mut().zip(&dz[t0..t1]) {
                            *dx += d * w;
                        }
                    }
                }
            }
        }
        dout = dinput;
    }
    Ok((sse, grad))
}

/// Mean squared error over a batch and its gradient with respect to
/// [`FcnModel::flat_params`]. Masked parameters get zero gradient.
pub fn loss_gradient(model: &FcnModel, batch: &[PairedExample]) -> Result<(f64, Vec<f64>)> {
    let refs: Vec<&PairedExample> = batch.iter().collect();
    batch_gradient(model, &refs)
}

fn batch_gradient(model: &FcnModel, batch: &[&PairedExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let offsets = model.flat_offsets();
    let parts = batch
        .par_iter()
        .map(|ex| example_gradient(model, &offsets, ex))
        .collect::<Result<Vec<_>>>()?;
    // Fixed-order reduction keeps results independent of the worker count.
    let samples: usize = batch.iter().map(|e| e.clean.len()).sum();
    let mut sse = 0.0;
    let mut grad = vec![0.0; model.flat_len()];
    for (s, g) in parts {
        sse += s;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / samples as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((sse * scale, grad))
}

/// Mean squared error of the model over a set of examples.
pub fn mse_loss(model: &FcnModel, batch: &[PairedExample]) -> Result<f64> {
    let parts = batch
        .par_iter()
        .map(|ex| {
            let y = fcn_forward(model, &ex.noisy)?;
            Ok(y.samples()
                .iter()
                .zip(ex.clean.samples())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let samples: usize = batch.iter().map(|e| e.clean.len()).sum();
    Ok(parts.iter().sum::<f64>() / samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

enum OptimizerState {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, step: i32 },
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        match kind {
            Optimizer::SgdMomentum => OptimizerState::Sgd {
                velocity: vec![0.0; n],
            },
            Optimizer::Adam => OptimizerState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        }
    }

    /// Updates `params` in place; frozen entries are never touched.
    fn step(&mut self, params: &mut [f64], grad: &[f64], trainable: &[bool], lr: f64) {
        const MOMENTUM: f64 = 0.9;
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self {
            OptimizerState::Sgd { velocity } => {
                for i in 0..params.len() {
                    if !trainable[i] {
                        continue;
                    }
                    velocity[i] = MOMENTUM * velocity[i] + grad[i];
                    let delta = lr * velocity[i];
                    if delta != 0.0 {
                        params[i] = round_f32(params[i] - delta);
                    }
                }
            }
            OptimizerState::Adam { m, v, step } => {
                *step += 1;
                let c1 = 1.0 - BETA1.powi(*step);
                let c2 = 1.0 - BETA2.powi(*step);
                for i in 0..params.len() {
                    if !trainable[i] {
                        continue;
                    }
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * grad[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    if delta != 0.0 {
                        params[i] = round_f32(params[i] - delta);
                    }
                }
            }
        }
    }
}

/// Minimises waveform MSE by mini-batch backpropagation.
///
/// Masked channels and dead filters are frozen. Returns the trained model and
/// the mean training loss of each epoch (measured before each batch's update).
pub fn train(
    model: &FcnModel,
    corpus: &[PairedExample],
    cfg: &TrainConfig,
) -> Result<(FcnModel, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::DegenerateInput("training corpus is empty".into()));
    }
    model.validate()?;
    let mut model = model.clone();
    let trainable = model.trainable_mask();
    let mut params = model.flat_params();
    let mut state = OptimizerState::new(cfg.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sse = 0.0;
        let mut epoch_samples = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PairedExample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, mut grad) = batch_gradient(&model, &batch)?;
            let samples: usize = batch.iter().map(|e| e.clean.len()).sum();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            epoch_sse += loss * samples as f64;
            epoch_samples += samples;
            grad.iter_mut()
                .zip(&trainable)
                .filter(|(_, &t)| !t)
                .for_each(|(g, _)| *g = 0.0);
            state.step(&mut params, &grad, &trainable, cfg.learning_rate);
            model.set_flat_params(&params)?;
        }
        let epoch_loss = epoch_sse / epoch_samples as f64;
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        history.push(epoch_loss);
    }
    Ok((model, history))
}
