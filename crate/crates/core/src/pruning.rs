//! Sparsity-driven channel pruning.
//!
//! For each filter the mean absolute weight `M` is taken over a set of its
//! channels, and a channel's sparsity is the fraction of its taps with
//! `|w| < M` (strict). Channels whose sparsity is strictly greater than the
//! threshold `θ` are masked to zero, the model is retrained with those channels
//! frozen, and after a few mask/retrain rounds the masked channels are deleted
//! outright by [`compact_model`].

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::{model_score, Metric};
use crate::error::{Error, Result};
use crate::fcn::{train, ConvLayer, FcnModel, TrainConfig};
use crate::signal::Corpus;

/// Which channels enter the mean-absolute statistic of a filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeMode {
    AllChannels,
    ActiveChannelsOnly,
}

/// Mean absolute weight over the channels in `scope`, summed channel by
/// channel. `weights` is channel-major with `taps` values per channel.
pub fn filter_mean_abs(weights: &[f64], taps: usize, scope: &[usize]) -> Result<f64> {
    if scope.is_empty() || taps == 0 {
        return Err(Error::DegenerateInput(
            "mean absolute value over an empty channel set".into(),
        ));
    }
    let mut total = 0.0;
    for &c in scope {
        let row = weights
            .get(c * taps..(c + 1) * taps)
            .ok_or_else(|| Error::Shape(format!("channel {c} out of range")))?;
        total += row.iter().map(|w| w.abs()).sum::<f64>();
    }
    Ok(total / (scope.len() * taps) as f64)
}

/// Per-channel sparsity: fraction of taps with `|w| < mean_abs`.
pub fn channel_sparsity(weights: &[f64], taps: usize, mean_abs: f64) -> Vec<f64> {
    weights
        .chunks_exact(taps)
        .map(|row| row.iter().filter(|w| w.abs() < mean_abs).count() as f64 / taps as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSparsity {
    pub filter_id: usize,
    pub mean_abs: f64,
    /// One value per stored channel, masked ones included.
    pub sparsity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub computed_over: ScopeMode,
    /// `layers[n][j]`; filters with no channel in scope are omitted.
    pub layers: Vec<Vec<FilterSparsity>>,
}

fn scope_channels(active: &[bool], mode: ScopeMode) -> Vec<usize> {
    match mode {
        ScopeMode::AllChannels => (0..active.len()).collect(),
        ScopeMode::ActiveChannelsOnly => (0..active.len()).filter(|&c| active[c]).collect(),
    }
}

fn layer_sparsity(layer: &ConvLayer, mode: ScopeMode) -> Vec<FilterSparsity> {
    layer
        .filters
        .iter()
        .filter_map(|f| {
            let scope = scope_channels(&f.active, mode);
            let mean_abs = filter_mean_abs(&f.weights, layer.taps, &scope).ok()?;
            Some(FilterSparsity {
                filter_id: f.id,
                mean_abs,
                sparsity: channel_sparsity(&f.weights, layer.taps, mean_abs),
            })
        })
        .collect()
}

pub fn sparsity_report(model: &FcnModel, mode: ScopeMode) -> SparsityReport {
    SparsityReport {
        computed_over: mode,
        layers: model.layers.iter().map(|l| layer_sparsity(l, mode)).collect(),
    }
}

/// Masks and zeroes every active channel with sparsity strictly above `theta`.
///
/// With `protect_single_input`, layers whose filters together read exactly one
/// active input channel are left alone (masking would delete whole filters). Returns the count of newly
/// masked channels.
pub fn mask_step(
    model: &FcnModel,
    theta: f64,
    mode: ScopeMode,
    protect_single_input: bool,
) -> Result<(FcnModel, usize)> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Parameter(format!("threshold {theta} outside [0, 1]")));
    }
    let mut out = model.clone();
    let mut newly = 0;
    for layer in &mut out.layers {
        if protect_single_input && active_inputs(layer) <= 1 {
            continue;
        }
        let taps = layer.taps;
        for f in &mut layer.filters {
            let scope = scope_channels(&f.active, mode);
            let Ok(mean_abs) = filter_mean_abs(&f.weights, taps, &scope) else {
                continue;
            };
            let sparsity = channel_sparsity(&f.weights, taps, mean_abs);
            for (c, s) in sparsity.into_iter().enumerate() {
                if f.active[c] && s > theta {
                    f.active[c] = false;
                    f.channel_mut(c, taps).fill(0.0);
                    newly += 1;
                }
            }
        }
    }
    Ok((out, newly))
}

fn active_inputs(layer: &ConvLayer) -> usize {
    let mut read = vec![false; layer.in_channels];
    for f in &layer.filters {
        for (&i, &a) in f.inputs.iter().zip(&f.active) {
            read[i] |= a;
        }
    }
    read.into_iter().filter(|&r| r).count()
}

/// Deletes masked channels and any filter left without a purpose.
///
/// Dead filters (every channel masked) emit zero, so they are removed together
/// with the consumer channels reading them. A filter that thereby loses all of
/// its channels emits the constant `act(bias)`; it is kept unless that constant
/// is zero. Producers that no remaining channel reads are removed last. The
/// final layer always keeps its single filter.
pub fn compact_model(model: &FcnModel) -> Result<FcnModel> {
    model.validate()?;
    model.check_mask_integrity()?;
    let mut layers = model.layers.clone();
    let last = layers.len() - 1;
    let dead: Vec<Vec<bool>> = layers
        .iter()
        .map(|l| l.filters.iter().map(|f| f.is_dead()).collect())
        .collect();

    for layer in &mut layers {
        let taps = layer.taps;
        for f in &mut layer.filters {
            let keep: Vec<usize> = (0..f.inputs.len()).filter(|&c| f.active[c]).collect();
            f.weights = keep.iter().flat_map(|&c| f.channel(c, taps).to_vec()).collect();
            f.inputs = keep.iter().map(|&c| f.inputs[c]).collect();
            f.active = vec![true; keep.len()];
        }
    }

    for n in 0..=last {
        let has_bias = layers[n].has_bias;
        let silent: Vec<bool> = layers[n]
            .filters
            .iter()
            .zip(&dead[n])
            .map(|(f, &d)| d || (f.inputs.is_empty() && (!has_bias || f.bias == 0.0)))
            .collect();
        if n == last {
            for (f, &s) in layers[n].filters.iter_mut().zip(&silent) {
                if s {
                    f.bias = 0.0;
                }
            }
        } else {
            let keep: Vec<bool> = silent.iter().map(|&s| !s).collect();
            retain_filters(&mut layers, n, &keep);
        }
    }
    // Producers nobody reads.
    for n in (1..=last).rev() {
        let mut used = vec![false; layers[n].in_channels];
        for f in &layers[n].filters {
            for &i in &f.inputs {
                used[i] = true;
            }
        }
        retain_filters(&mut layers, n - 1, &used);
    }

    FcnModel::from_layers(layers, model.config.clone())
}

/// Keeps filters of layer `n` where `keep` is true and remaps layer `n + 1`.
fn retain_filters(layers: &mut [ConvLayer], n: usize, keep: &[bool]) {
    if keep.iter().all(|&k| k) {
        return;
    }
    let mut remap = vec![None; keep.len()];
    let mut next = 0;
    for (old, &k) in keep.iter().enumerate() {
        if k {
            remap[old] = Some(next);
            next += 1;
        }
    }
    let mut k = keep.iter();
    layers[n].filters.retain(|_| *k.next().unwrap());
    if let Some(consumer) = layers.get_mut(n + 1) {
        let taps = consumer.taps;
        consumer.in_channels = next;
        for f in &mut consumer.filters {
            let kept: Vec<(usize, usize)> = f
                .inputs
                .iter()
                .enumerate()
                .filter_map(|(c, &i)| remap[i].map(|new| (c, new)))
                .collect();
            f.weights = kept
                .iter()
                .flat_map(|&(c, _)| f.channel(c, taps).to_vec())
                .collect();
            f.active = kept.iter().map(|&(c, _)| f.active[c]).collect();
            f.inputs = kept.into_iter().map(|(_, new)| new).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Strictly descending thresholds, each in `[0, 1]`.
    pub theta_schedule: Vec<f64>,
    pub retrain_epochs_per_step: usize,
    /// Mask/retrain rounds per threshold before masked channels are deleted.
    pub settle_iterations: usize,
    pub protect_single_channel_layers: bool,
    pub scope_mode: ScopeMode,
    /// Stop after the first step whose removal ratio reaches this value.
    pub stop_at_removal: Option<f64>,
    pub metric: Metric,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            theta_schedule: theta_schedule(0.60, 0.05),
            retrain_epochs_per_step: 5,
            settle_iterations: 2,
            protect_single_channel_layers: true,
            scope_mode: ScopeMode::ActiveChannelsOnly,
            stop_at_removal: None,
            metric: Metric::SiSdr,
        }
    }
}

/// `1.00, 1.00 − step, …` down to `target` (inclusive, snapped to the step
/// grid), rounded to 1e-9 so decimal thresholds print cleanly.
pub fn theta_schedule(target: f64, step: f64) -> Vec<f64> {
    let snap = |x: f64| (x * 1e9).round() / 1e9;
    let mut out = vec![1.0];
    if step <= 0.0 || target >= 1.0 {
        return out;
    }
    let steps = ((1.0 - target) / step + 1e-9).floor() as usize;
    out.extend((1..=steps).map(|i| snap(1.0 - i as f64 * step)));
    if out.last().is_some_and(|&t| snap(t - target) > 0.0) {
        out.push(snap(target));
    }
    out
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.theta_schedule;
        if s.is_empty() {
            return Err(Error::Parameter("empty threshold schedule".into()));
        }
        if s.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Parameter(format!("thresholds {s:?} must lie in [0, 1]")));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Parameter(format!(
                "threshold schedule {s:?} must be strictly descending"
            )));
        }
        Ok(())
    }
}

/// Result of pruning, measured against the model pruning started from.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub theta: Option<f64>,
    pub removal_ratio: f64,
    pub original_params: usize,
    pub remaining_params: usize,
    /// Per layer, `(filter id, input channel id)` pairs no longer present.
    pub removed_channels: Vec<Vec<(usize, usize)>>,
    /// Per layer, ids of filters deleted outright.
    pub removed_filters: Vec<Vec<usize>>,
    pub metric_before: Option<f64>,
    pub metric_after: Option<f64>,
}

impl PruneOutcome {
    pub fn removed_channel_count(&self) -> usize {
        self.removed_channels.iter().map(Vec::len).sum()
    }

    pub fn removed_filter_count(&self) -> usize {
        self.removed_filters.iter().map(Vec::len).sum()
    }
}

type Connectivity = (Vec<BTreeSet<(usize, usize)>>, Vec<BTreeSet<usize>>);

/// Active `(filter id, input id)` pairs and live filter ids, per layer.
fn connectivity(model: &FcnModel) -> Connectivity {
    let mut channels = Vec::new();
    let mut filters = Vec::new();
    let mut prev_ids: Vec<usize> = vec![0];
    for layer in &model.layers {
        let mut ch = BTreeSet::new();
        let mut live = BTreeSet::new();
        for f in &layer.filters {
            for (c, &i) in f.inputs.iter().enumerate() {
                if f.active[c] {
                    ch.insert((f.id, prev_ids[i]));
                }
            }
            if !f.is_dead() {
                live.insert(f.id);
            }
        }
        prev_ids = layer.filters.iter().map(|f| f.id).collect();
        channels.push(ch);
        filters.push(live);
    }
    (channels, filters)
}

/// Compares a pruned model with the model it came from.
///
/// Counts cover weights plus the biases of live filters, so a bias is counted
/// as removed only when its filter goes.
pub fn removal_report(original: &FcnModel, pruned: &FcnModel) -> PruneOutcome {
    let original_params = original.count_params(true);
    let remaining_params = pruned.count_params(true);
    let (orig_ch, orig_f) = connectivity(original);
    let (new_ch, new_f) = connectivity(pruned);
    let removed_channels = orig_ch
        .iter()
        .enumerate()
        .map(|(n, set)| {
            let empty = BTreeSet::new();
            set.difference(new_ch.get(n).unwrap_or(&empty)).copied().collect()
        })
        .collect();
    let removed_filters = orig_f
        .iter()
        .enumerate()
        .map(|(n, set)| {
            let empty = BTreeSet::new();
            set.difference(new_f.get(n).unwrap_or(&empty)).copied().collect()
        })
        .collect();
    PruneOutcome {
        theta: None,
        removal_ratio: 1.0 - remaining_params as f64 / original_params as f64,
        original_params,
        remaining_params,
        removed_channels,
        removed_filters,
        metric_before: None,
        metric_after: None,
    }
}

/// Walks the threshold schedule: mask, retrain, repeat, then delete.
///
/// A round that has masked nothing so far at the current threshold skips
/// retraining, so thresholds that prune nothing leave the model untouched.
/// One [`PruneOutcome`] per completed threshold, each relative to `model`.
pub fn prune_retrain(
    model: &FcnModel,
    corpus: &Corpus,
    cfg: &PruneConfig,
    train_cfg: &TrainConfig,
) -> Result<(FcnModel, Vec<PruneOutcome>)> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut outcomes = Vec::with_capacity(cfg.theta_schedule.len());
    let mut score = model_score(&current, &corpus.test, cfg.metric)?;
    for (step, &theta) in cfg.theta_schedule.iter().enumerate() {
        let before = score;
        let mut masked_here = 0;
        for round in 0..cfg.settle_iterations {
            let (masked, newly) = mask_step(
                &current,
                theta,
                cfg.scope_mode,
                cfg.protect_single_channel_layers,
            )?;
            current = masked;
            masked_here += newly;
            if masked_here == 0 || cfg.retrain_epochs_per_step == 0 {
                continue;
            }
            let retrain = TrainConfig {
                epochs: cfg.retrain_epochs_per_step,
                seed: train_cfg
                    .seed
                    .wrapping_add(1 + (step as u64) * 1000 + round as u64),
                ..train_cfg.clone()
            };
            current = train(&current, &corpus.train, &retrain)
                .map_err(|e| e.in_stage(format!("retraining at threshold {theta:.2}")))?
                .0;
        }
        current = compact_model(&current)?;
        if masked_here > 0 {
            score = model_score(&current, &corpus.test, cfg.metric)?;
        }
        let mut outcome = removal_report(model, &current);
        outcome.theta = Some(theta);
        outcome.metric_before = Some(before);
        outcome.metric_after = Some(score);
        let ratio = outcome.removal_ratio;
        outcomes.push(outcome);
        if cfg.stop_at_removal.is_some_and(|target| ratio >= target) {
            break;
        }
    }
    Ok((current, outcomes))
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Threshold / removal ratio / remaining parameters table.
pub fn format_table(outcomes: &[PruneOutcome]) -> String {
    let mut out = String::from("threshold\tremoval_ratio\tremaining_params\n");
    for o in outcomes {
        let theta = o.theta.map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
        let _ = writeln!(
            out,
            "{theta}\t{:.1}%\t{}",
            o.removal_ratio * 100.0,
            thousands(o.remaining_params)
        );
    }
    out
}

/// `key=value` lines, one block per outcome separated by a blank line.
pub fn format_key_values(outcomes: &[PruneOutcome]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.6}"));
    outcomes
        .iter()
        .map(|o| {
            format!(
                "theta={}\nremoval_ratio={:.6}\noriginal_params={}\nremaining_params={}\n\
                 removed_channels={}\nremoved_filters={}\nmetric_before={}\nmetric_after={}\n",
                o.theta.map_or_else(|| "none".to_string(), |t| format!("{t:.2}")),
                o.removal_ratio,
                o.original_params,
                o.remaining_params,
                o.removed_channel_count(),
                o.removed_filter_count(),
                opt(o.metric_before),
                opt(o.metric_after),
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::{conv_forward, fcn_forward, Activation, FcnConfig, LayerSpec};
    use crate::signal::Waveform;

    fn two_layer(seed: u64) -> FcnModel {
        FcnModel::new(FcnConfig {
            layers: vec![
                LayerSpec::new(4, 3, Activation::Tanh, true),
                LayerSpec::new(4, 3, Activation::Tanh, true),
                LayerSpec::new(1, 3, Activation::Identity, true),
            ],
            seed,
        })
        .unwrap()
    }

    #[test]
    fn mean_abs_examples() {
        assert_eq!(filter_mean_abs(&[1.0; 6], 3, &[0, 1]).unwrap(), 1.0);
        assert_eq!(filter_mean_abs(&[0.0; 4], 2, &[0, 1]).unwrap(), 0.0);
        let w = [0.1, 0.1, 1.0, 1.0];
        let m = filter_mean_abs(&w, 2, &[0, 1]).unwrap();
        assert!((m - 0.55).abs() < 1e-15);
        assert_eq!(channel_sparsity(&w, 2, m), vec![1.0, 0.0]);
        assert!(matches!(
            filter_mean_abs(&w, 2, &[]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn sparsity_boundaries() {
        // |w| == M everywhere: strict inequality keeps every channel at 0.
        let w = [0.5, -0.5, 0.5, -0.5];
        let m = filter_mean_abs(&w, 2, &[0, 1]).unwrap();
        assert_eq!(channel_sparsity(&w, 2, m), vec![0.0, 0.0]);
        assert_eq!(channel_sparsity(&[0.0, 3.0, 0.0, 0.0], 2, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn mask_step_example_filter() {
        let layer = ConvLayer::dense(
            vec![vec![vec![0.1, 0.1], vec![1.0, 1.0]]],
            vec![0.0],
            Activation::Identity,
            true,
        )
        .unwrap();
        let first = ConvLayer::dense(
            vec![vec![vec![1.0, 1.0]], vec![vec![1.0, 1.0]]],
            vec![0.0, 0.0],
            Activation::Identity,
            true,
        )
        .unwrap();
        let model = FcnModel::from_layers(vec![first, layer], FcnConfig::default()).unwrap();
        let (m, newly) = mask_step(&model, 0.9, ScopeMode::ActiveChannelsOnly, true).unwrap();
        assert_eq!(newly, 1);
        assert_eq!(m.layers[1].filters[0].active, vec![false, true]);
        assert_eq!(m.layers[1].filters[0].weights, vec![0.0, 0.0, 1.0, 1.0]);
        let (_, none) = mask_step(&model, 1.0, ScopeMode::ActiveChannelsOnly, true).unwrap();
        assert_eq!(none, 0);
        assert!(mask_step(&model, 1.5, ScopeMode::ActiveChannelsOnly, true).is_err());
    }

    #[test]
    fn first_layer_is_protected() {
        let mut model = two_layer(3);
        // Make one first-layer filter maximally sparse relative to... itself only:
        // with one channel M is that channel's own mean, so S < 1, but protection
        // must skip the layer regardless of threshold.
        model.layers[0].filters[0].weights = vec![0.0, 0.0, 1.0];
        let (m, _) = mask_step(&model, 0.0, ScopeMode::ActiveChannelsOnly, true).unwrap();
        assert!(m.layers[0].filters.iter().all(|f| f.active[0]));
        let (m, _) = mask_step(&model, 0.0, ScopeMode::ActiveChannelsOnly, false).unwrap();
        assert!(!m.layers[0].filters[0].active[0]);
    }

    #[test]
    fn mask_step_is_idempotent_without_retraining() {
        let model = two_layer(5);
        for theta in [0.3, 0.5, 0.6] {
            let (once, _) = mask_step(&model, theta, ScopeMode::AllChannels, true).unwrap();
            let (twice, newly) = mask_step(&once, theta, ScopeMode::AllChannels, true).unwrap();
            // All-channels scope: zeroing a channel lowers M, which can only
            // reduce other channels' sparsity, so nothing new appears.
            assert_eq!(newly, 0, "theta {theta}");
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn compact_without_masks_is_identity() {
        let model = two_layer(1);
        assert_eq!(compact_model(&model).unwrap(), model);
    }

    #[test]
    fn compact_rejects_nonzero_masked_weights() {
        let mut model = two_layer(1);
        model.layers[1].filters[0].active[2] = false;
        assert!(matches!(compact_model(&model), Err(Error::Integrity(_))));
    }

    #[test]
    fn dead_producer_is_removed() {
        let mut model = two_layer(2);
        for f in &mut model.layers[1].filters {
            f.active[3] = false;
        }
        model.apply_masks();
        let compact = compact_model(&model).unwrap();
        assert_eq!(compact.layers[0].filters.len(), 3);
        assert!(compact.layers[0].filters.iter().all(|f| f.id != 3));
        assert_eq!(compact.layers[1].in_channels, 3);
        let report = removal_report(&model, &compact);
        assert_eq!(report.removed_filters[0], vec![3]);
        // The dead producer's 3 weights and bias disappear with it.
        assert_eq!(model.count_params(true) - compact.count_params(true), 4);

        let x = Waveform::new((0..40).map(|t| (t as f64 * 0.37).sin()).collect(), 8000).unwrap();
        assert_eq!(
            fcn_forward(&model, &x).unwrap(),
            fcn_forward(&compact, &x).unwrap()
        );
    }

    #[test]
    fn emptied_filter_cascades_forward() {
        let mut model = two_layer(4);
        // Layer 1 filter 2 loses every channel: it emits zero, so layer 2's
        // channel from it goes too.
        model.layers[1].filters[2].active = vec![false; 4];
        model.apply_masks();
        let compact = compact_model(&model).unwrap();
        assert_eq!(compact.layers[1].filters.len(), 3);
        assert_eq!(compact.layers[2].in_channels, 3);
        let x = Waveform::new((0..25).map(|t| (t as f64 * 0.9).cos()).collect(), 8000).unwrap();
        let a = fcn_forward(&model, &x).unwrap();
        let b = fcn_forward(&compact, &x).unwrap();
        assert_eq!(a, b);
        // Per-layer forward agrees on the surviving filter outputs as well.
        let layer0 = conv_forward(&model.layers[0], &[x.samples().to_vec()]).unwrap();
        assert_eq!(
            conv_forward(&compact.layers[0], &[x.samples().to_vec()]).unwrap(),
            layer0
        );
    }

    #[test]
    fn filter_reading_only_dead_producers_keeps_its_bias() {
        let mut model = two_layer(5);
        for f in &mut model.layers[0].filters[..2] {
            f.active = vec![false];
        }
        // Layer 1 filter 0 reads only the two dead producers.
        model.layers[1].filters[0].active = vec![true, true, false, false];
        model.layers[1].filters[0].bias = 0.25;
        // Layer 1 filter 1 does the same but has no bias, so it emits zero.
        model.layers[1].filters[1].active = vec![true, true, false, false];
        model.layers[1].filters[1].bias = 0.0;
        model.apply_masks();
        let protect_off = mask_step(&model, 1.0, ScopeMode::ActiveChannelsOnly, false).unwrap();
        assert_eq!(protect_off.1, 0);

        let compact = compact_model(&model).unwrap();
        assert_eq!(compact.layers[0].filters.len(), 2);
        let ids: Vec<usize> = compact.layers[1].filters.iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![0, 2, 3]);
        let constant = &compact.layers[1].filters[0];
        assert!(constant.inputs.is_empty() && !constant.is_dead());
        let x = Waveform::new((0..31).map(|t| (t as f64 * 0.4).sin()).collect(), 8000).unwrap();
        assert_eq!(fcn_forward(&model, &x).unwrap(), fcn_forward(&compact, &x).unwrap());
    }

    #[test]
    fn dead_output_filter_is_kept_with_zero_bias() {
        let mut model = two_layer(6);
        model.layers[2].filters[0].active = vec![false; 4];
        model.layers[2].filters[0].bias = 0.5;
        model.apply_masks();
        let compact = compact_model(&model).unwrap();
        assert_eq!(compact.layers[2].filters.len(), 1);
        assert_eq!(compact.layers[2].filters[0].bias, 0.0);
        let x = Waveform::new(vec![0.3; 12], 8000).unwrap();
        let y = fcn_forward(&compact, &x).unwrap();
        assert_eq!(y, fcn_forward(&model, &x).unwrap());
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_models_remove_nothing() {
        let model = two_layer(9);
        let r = removal_report(&model, &model);
        assert_eq!(r.removal_ratio, 0.0);
        assert_eq!(r.remaining_params, model.count_params(false));
        assert_eq!(r.removed_channel_count(), 0);
    }

    #[test]
    fn schedule_generation() {
        let s = theta_schedule(0.60, 0.05);
        assert_eq!(
            s,
            vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6]
        );
        assert_eq!(theta_schedule(1.0, 0.05), vec![1.0]);
        assert_eq!(theta_schedule(0.72, 0.05), vec![1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.72]);
        let cfg = PruneConfig {
            theta_schedule: vec![0.7, 0.8],
            ..PruneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn table_formatting() {
        let o = PruneOutcome {
            theta: Some(0.7),
            removal_ratio: 59_400.0 / 300_300.0,
            original_params: 300_300,
            remaining_params: 240_900,
            removed_channels: vec![],
            removed_filters: vec![],
            metric_before: None,
            metric_after: Some(1.5),
        };
        assert_eq!(
            format_table(std::slice::from_ref(&o)),
            "threshold\tremoval_ratio\tremaining_params\n0.70\t19.8%\t240,900\n"
        );
        let kv = format_key_values(&[o]);
        assert!(kv.contains("remaining_params=240900\n"));
        assert!(kv.contains("metric_before=none\n"));
        assert!(kv.contains("metric_after=1.500000\n"));
    }
}
