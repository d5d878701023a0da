//! Weight sharing through k-means codebooks.
//!
//! Surviving weights are replaced by indices into a small table of centroids,
//! one table per layer or one for the whole model. Biases stay at full precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::FcnModel;
use crate::kmeans::{index_bits, kmeans_fit, Codebook, DEFAULT_RESTARTS};

/// Bits of a full-precision stored value.
pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantScope {
    PerLayer,
    Global,
}

impl fmt::Display for QuantScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantScope::PerLayer => "per-layer",
            QuantScope::Global => "global",
        })
    }
}

impl FromStr for QuantScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(QuantScope::PerLayer),
            "global" => Ok(QuantScope::Global),
            other => Err(Error::Parameter(format!("unknown quantization scope `{other}`"))),
        }
    }
}

/// Index stream of one layer's active weights (filter → channel → tap order).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Codebook used by this layer; `None` when the layer has no active weights.
    pub codebook: Option<usize>,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Architecture, masks and biases; all weights are zero.
    pub skeleton: FcnModel,
    pub scope: QuantScope,
    pub codebooks: Vec<Codebook>,
    pub layers: Vec<QuantizedLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub original_bits: u64,
    pub compressed_bits: u64,
    pub rate: f64,
    pub size_fraction: f64,
}

impl CompressionReport {
    fn from_bits(original_bits: u64, compressed_bits: u64) -> Self {
        Self {
            original_bits,
            compressed_bits,
            rate: original_bits as f64 / compressed_bits as f64,
            size_fraction: compressed_bits as f64 / original_bits as f64,
        }
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "original_bits={}\ncompressed_bits={}\nrate={:.6}\nsize_fraction={:.6}\n",
            self.original_bits, self.compressed_bits, self.rate, self.size_fraction
        )
    }
}

/// Storage of `n_weights` values as a `k`-entry codebook plus `ceil(log2 k)`-bit
/// indices, against storing them at `bits_per_value`.
pub fn compression_rate(n_weights: u64, k: u64, bits_per_value: u64) -> Result<CompressionReport> {
    if n_weights == 0 || k == 0 || bits_per_value == 0 {
        return Err(Error::Parameter(
            "weight count, k and value width must be positive".into(),
        ));
    }
    let original = n_weights * bits_per_value;
    let compressed = k * bits_per_value + u64::from(index_bits(k)) * n_weights;
    Ok(CompressionReport::from_bits(original, compressed))
}

/// Size after pruning to `remaining_weights` and, if `k` is given,
/// quantizing with `scopes` codebooks of `k` centroids each.
pub fn size_report(
    remaining_weights: u64,
    original_weights: u64,
    k: Option<u64>,
    scopes: u64,
) -> Result<CompressionReport> {
    if original_weights == 0 || remaining_weights > original_weights {
        return Err(Error::Parameter(format!(
            "remaining {remaining_weights} must be within original {original_weights} (> 0)"
        )));
    }
    let original = original_weights * FLOAT_BITS;
    let compressed = match k {
        None => remaining_weights * FLOAT_BITS,
        Some(0) => return Err(Error::Parameter("k must be at least 1".into())),
        Some(k) => remaining_weights * u64::from(index_bits(k)) + scopes * k * FLOAT_BITS,
    };
    Ok(CompressionReport::from_bits(original, compressed))
}

fn active_weights(model: &FcnModel, layer: usize) -> Vec<f64> {
    let l = &model.layers[layer];
    let mut out = Vec::new();
    for f in &l.filters {
        for (c, &a) in f.active.iter().enumerate() {
            if a {
                out.extend_from_slice(f.channel(c, l.taps));
            }
        }
    }
    out
}

/// Rounds centroids to `f32` (the stored precision) and merges any that collide.
fn storable(fit_centroids: &[f64], assignments: &[usize]) -> Result<(Codebook, Vec<u32>)> {
    let rounded: Vec<f64> = fit_centroids.iter().map(|&c| c as f32 as f64).collect();
    let mut table = rounded.clone();
    table.dedup();
    let remap: Vec<u32> = rounded
        .iter()
        .map(|c| table.partition_point(|x| x < c) as u32)
        .collect();
    Ok((
        Codebook::new(table)?,
        assignments.iter().map(|&a| remap[a]).collect(),
    ))
}

/// Quantizes with the default number of k-means restarts.
pub fn quantize_model(model: &FcnModel, k: usize, scope: QuantScope, seed: u64) -> Result<QuantizedModel> {
    quantize_model_with(model, k, scope, seed, DEFAULT_RESTARTS)
}

pub fn quantize_model_with(
    model: &FcnModel,
    k: usize,
    scope: QuantScope,
    seed: u64,
    restarts: usize,
) -> Result<QuantizedModel> {
    if k < 1 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    model.validate()?;
    model.check_mask_integrity()?;
    let per_layer: Vec<Vec<f64>> = (0..model.layers.len())
        .map(|n| active_weights(model, n))
        .collect();

    let mut codebooks = Vec::new();
    let mut layers = Vec::with_capacity(per_layer.len());
    match scope {
        QuantScope::PerLayer => {
            for (n, values) in per_layer.iter().enumerate() {
                if values.is_empty() {
                    layers.push(QuantizedLayer {
                        codebook: None,
                        indices: Vec::new(),
                    });
                    continue;
                }
                let fit = kmeans_fit(values, k, seed.wrapping_add(n as u64), restarts)?;
                let (cb, indices) = storable(fit.codebook.centroids(), &fit.assignments)?;
                layers.push(QuantizedLayer {
                    codebook: Some(codebooks.len()),
                    indices,
                });
                codebooks.push(cb);
            }
        }
        QuantScope::Global => {
            let all: Vec<f64> = per_layer.concat();
            if all.is_empty() {
                return Err(Error::DegenerateInput("model has no active weights".into()));
            }
            let fit = kmeans_fit(&all, k, seed, restarts)?;
            let (cb, indices) = storable(fit.codebook.centroids(), &fit.assignments)?;
            codebooks.push(cb);
            let mut rest = indices.as_slice();
            for values in &per_layer {
                let (head, tail) = rest.split_at(values.len());
                rest = tail;
                layers.push(QuantizedLayer {
                    codebook: (!values.is_empty()).then_some(0),
                    indices: head.to_vec(),
                });
            }
        }
    }

    let mut skeleton = model.clone();
    for l in &mut skeleton.layers {
        for f in &mut l.filters {
            f.weights.fill(0.0);
        }
    }
    Ok(QuantizedModel {
        skeleton,
        scope,
        codebooks,
        layers,
    })
}

/// Rebuilds a full-precision model whose active weights are codebook entries.
pub fn dequantize(q: &QuantizedModel) -> Result<FcnModel> {
    if q.layers.len() != q.skeleton.layers.len() {
        return Err(Error::Integrity("layer count differs from skeleton".into()));
    }
    let mut model = q.skeleton.clone();
    for (n, (layer, ql)) in model.layers.iter_mut().zip(&q.layers).enumerate() {
        let taps = layer.taps;
        let expected: usize = layer.filters.iter().map(|f| f.active_channels() * taps).sum();
        if ql.indices.len() != expected {
            return Err(Error::Integrity(format!(
                "layer {n} has {} indices for {expected} active weights",
                ql.indices.len()
            )));
        }
        if expected == 0 {
            continue;
        }
        let cb = ql
            .codebook
            .and_then(|i| q.codebooks.get(i))
            .ok_or_else(|| Error::Integrity(format!("layer {n} has no valid codebook")))?;
        let table = cb.centroids();
        let mut idx = ql.indices.iter();
        for f in &mut layer.filters {
            for c in 0..f.inputs.len() {
                if !f.active[c] {
                    continue;
                }
                for w in f.channel_mut(c, taps) {
                    let i = *idx.next().unwrap() as usize;
                    *w = *table.get(i).ok_or_else(|| {
                        Error::Integrity(format!(
                            "layer {n} index {i} outside codebook of {}",
                            table.len()
                        ))
                    })?;
                }
            }
        }
    }
    Ok(model)
}

impl QuantizedModel {
    pub fn quantized_weights(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    /// Bits used by codebooks and index streams.
    pub fn payload_bits(&self) -> u64 {
        let tables: u64 = self.codebooks.iter().map(|c| c.len() as u64 * FLOAT_BITS).sum();
        let indices: u64 = self
            .layers
            .iter()
            .filter_map(|l| {
                let cb = &self.codebooks[l.codebook?];
                Some(l.indices.len() as u64 * u64::from(cb.bit_width()))
            })
            .sum();
        tables + indices
    }

    /// Bits per index for each layer.
    pub fn layer_bit_widths(&self) -> Vec<u32> {
        self.layers
            .iter()
            .map(|l| l.codebook.map_or(0, |i| self.codebooks[i].bit_width()))
            .collect()
    }

    /// Payload size against `original_weights` full-precision weights.
    pub fn compression_report(&self, original_weights: u64) -> CompressionReport {
        CompressionReport::from_bits(original_weights * FLOAT_BITS, self.payload_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{Activation, ConvLayer, FcnConfig, LayerSpec};

    #[test]
    fn rate_example_300300_weights() {
        let r = compression_rate(10, 4, 32).unwrap();
        assert_eq!((r.original_bits, r.compressed_bits), (320, 148));
        assert_eq!(format!("{:.2}", r.rate), "2.16");
        assert_eq!(r.rate, 320.0 / 148.0);
    }

    #[test]
    fn single_cluster_and_large_k_rates() {
        let r = compression_rate(10, 1, 32).unwrap();
        assert_eq!(r.rate, 10.0);
        let r = compression_rate(16, 16, 32).unwrap();
        assert_eq!(r.compressed_bits, 576);
        assert!((r.rate - 512.0 / 576.0).abs() < 1e-15);
        assert!(r.rate < 1.0);
        assert!(compression_rate(0, 4, 32).is_err());
    }

    #[test]
    fn size_report_cases() {
        let r = size_report(240_900, 300_300, Some(16), 1).unwrap();
        assert_eq!(r.compressed_bits, 240_900 * 4 + 512);
        assert_eq!(format!("{:.2}", r.size_fraction * 100.0), "10.03");
        let r = size_report(300_300, 300_300, None, 0).unwrap();
        assert_eq!(r.size_fraction, 1.0);
        let r = size_report(1000, 2000, Some(1 << 32), 1).unwrap();
        let expected = 0.5 + (1u64 << 32) as f64 / 2000.0;
        assert!((r.size_fraction - expected).abs() < 1e-9);
        assert!(size_report(3, 2, Some(4), 1).is_err());
    }

    fn fig2_model() -> FcnModel {
        // Ten weights in one 1-channel layer, as in a ten-weight codebook example.
        let w = vec![2.09, -0.98, 1.48, 0.09, 0.05, -0.14, -1.08, 2.12, -0.91, 1.92];
        let w: Vec<f64> = w.into_iter().map(|x: f64| x as f32 as f64).collect();
        let layer = ConvLayer::dense(vec![vec![w]], vec![0.0], Activation::Identity, false).unwrap();
        FcnModel::from_layers(vec![layer], FcnConfig::default()).unwrap()
    }

    #[test]
    fn ten_weights_four_clusters() {
        let model = fig2_model();
        let q = quantize_model(&model, 4, QuantScope::Global, 1).unwrap();
        assert_eq!(q.codebooks.len(), 1);
        assert_eq!(q.codebooks[0].len(), 4);
        assert_eq!(q.codebooks[0].bit_width(), 2);
        assert_eq!(q.quantized_weights(), 10);
        assert_eq!(q.payload_bits(), 148);
        let r = q.compression_report(10);
        assert_eq!(format!("{:.2}", r.rate), "2.16");
        let deq = dequantize(&q).unwrap();
        for w in &deq.layers[0].filters[0].weights {
            assert!(q.codebooks[0].centroids().contains(w));
        }
    }

    #[test]
    fn large_k_round_trips_exactly() {
        let model = FcnModel::new(FcnConfig {
            layers: vec![
                LayerSpec::new(3, 5, Activation::Tanh, true),
                LayerSpec::new(1, 5, Activation::Identity, true),
            ],
            seed: 4,
        })
        .unwrap();
        for scope in [QuantScope::PerLayer, QuantScope::Global] {
            let q = quantize_model(&model, 64, scope, 0).unwrap();
            assert_eq!(dequantize(&q).unwrap(), model);
        }
    }

    #[test]
    fn masked_channels_not_quantized() {
        let mut model = FcnModel::new(FcnConfig {
            layers: vec![
                LayerSpec::new(2, 3, Activation::Tanh, true),
                LayerSpec::new(1, 3, Activation::Identity, true),
            ],
            seed: 8,
        })
        .unwrap();
        model.layers[1].filters[0].active[1] = false;
        model.apply_masks();
        let q = quantize_model(&model, 2, QuantScope::PerLayer, 0).unwrap();
        assert_eq!(q.layers[1].indices.len(), 3);
        let deq = dequantize(&q).unwrap();
        assert_eq!(deq.layers[1].filters[0].channel(1, 3), &[0.0, 0.0, 0.0]);
        assert_eq!(deq.layers[1].filters[0].active, vec![true, false]);
    }

    #[test]
    fn bad_index_is_integrity_error() {
        let mut q = quantize_model(&fig2_model(), 4, QuantScope::Global, 1).unwrap();
        q.layers[0].indices[3] = 9;
        assert!(matches!(dequantize(&q), Err(Error::Integrity(_))));
        q.layers[0].indices.pop();
        assert!(matches!(dequantize(&q), Err(Error::Integrity(_))));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("global".parse::<QuantScope>().unwrap(), QuantScope::Global);
        assert_eq!(QuantScope::PerLayer.to_string(), "per-layer");
        assert!("both".parse::<QuantScope>().is_err());
    }
}
