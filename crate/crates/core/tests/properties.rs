mod common;

use fcn_compress::fcn::{conv_forward, fcn_forward, Activation, ConvLayer};
use fcn_compress::kmeans::kmeans_fit;
use fcn_compress::model_io::{pack_indices, unpack_indices};
use fcn_compress::pipeline::{select_operating_point, BapdBound, CellResult, Scores, SweepResult, SweepRow};
use fcn_compress::pruning::{
    channel_sparsity, compact_model, filter_mean_abs, mask_step, ScopeMode,
};
use fcn_compress::quantization::{dequantize, quantize_model, size_report, QuantScope};
use fcn_compress::signal::Waveform;
use fcn_compress::Metric;
use proptest::prelude::*;
use rand::Rng;

use common::{dp_kmeans_sse, random_mask, random_model, random_signal, reference_conv, rng};

fn dense_rows(layer: &ConvLayer) -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
    let rows = layer
        .filters
        .iter()
        .map(|f| (0..f.inputs.len()).map(|c| f.channel(c, layer.taps).to_vec()).collect())
        .collect();
    (rows, layer.filters.iter().map(|f| f.bias).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_preserves_length(seed in any::<u64>(), len in 1usize..80) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 5, 9);
        let x = Waveform::new(random_signal(&mut r, len), 16_000).unwrap();
        prop_assert_eq!(fcn_forward(&model, &x).unwrap().len(), len);
    }

    #[test]
    fn forward_matches_reference_composition(seed in any::<u64>(), len in 1usize..48) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 4, 7);
        let x = random_signal(&mut r, len);
        let mut signal = vec![x.clone()];
        for layer in &model.layers {
            let (rows, biases) = dense_rows(layer);
            signal = reference_conv(&rows, &biases, layer.activation, &signal);
        }
        let y = fcn_forward(&model, &Waveform::new(x, 16_000).unwrap()).unwrap();
        for (a, b) in y.samples().iter().zip(&signal[0]) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn masking_equals_zeroing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut masked = random_model(&mut r, 5, 7);
        random_mask(&mut masked, &mut r, 0.3);
        let mut zeroed = masked.clone();
        for l in &mut zeroed.layers {
            for f in &mut l.filters {
                if !f.is_dead() {
                    f.active.fill(true);
                }
            }
        }
        let x = Waveform::new(random_signal(&mut r, 33), 16_000).unwrap();
        prop_assert_eq!(fcn_forward(&masked, &x).unwrap(), fcn_forward(&zeroed, &x).unwrap());
    }

    #[test]
    fn compaction_never_grows_and_preserves_output(seed in any::<u64>(), p in 0.0f64..0.9) {
        let mut r = rng(seed);
        let mut model = random_model(&mut r, 6, 7);
        random_mask(&mut model, &mut r, p);
        let compact = compact_model(&model).unwrap();
        prop_assert!(compact.count_params(false) <= model.count_params(false));
        prop_assert!(compact.count_params(true) <= model.count_params(true));
        let x = Waveform::new(random_signal(&mut r, 40), 16_000).unwrap();
        let a = fcn_forward(&model, &x).unwrap();
        let b = fcn_forward(&compact, &x).unwrap();
        let peak = a.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in a.samples().iter().zip(b.samples()) {
            prop_assert!((u - v).abs() <= 1e-6 * (1.0 + peak));
        }
        // Compacting again changes nothing.
        prop_assert_eq!(compact_model(&compact).unwrap(), compact);
    }

    #[test]
    fn sparsity_is_scale_invariant(
        weights in prop::collection::vec(-2.0f64..2.0, 1..64),
        c in 0.01f64..100.0,
    ) {
        let taps = weights.len().min(8);
        let weights = &weights[..weights.len() / taps * taps];
        let scope: Vec<usize> = (0..weights.len() / taps).collect();
        // Scale by the nearest power of two so the products are exact.
        let pow2 = 2f64.powi(c.log2().round() as i32);
        let scaled: Vec<f64> = weights.iter().map(|w| w * pow2).collect();
        let m = filter_mean_abs(weights, taps, &scope).unwrap();
        let ms = filter_mean_abs(&scaled, taps, &scope).unwrap();
        prop_assert_eq!(channel_sparsity(weights, taps, m), channel_sparsity(&scaled, taps, ms));
    }

    #[test]
    fn mask_step_is_monotone_and_idempotent(seed in any::<u64>(), hi in 0.5f64..1.0, gap in 0.0f64..0.5) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 6, 9);
        let lo = hi - gap;
        let mode = if r.random_bool(0.5) { ScopeMode::AllChannels } else { ScopeMode::ActiveChannelsOnly };
        let (at_hi, _) = mask_step(&model, hi, mode, true).unwrap();
        let (at_lo, _) = mask_step(&model, lo, mode, true).unwrap();
        for (lh, ll) in at_hi.layers.iter().zip(&at_lo.layers) {
            for (fh, fl) in lh.filters.iter().zip(&ll.filters) {
                for (&a, &b) in fh.active.iter().zip(&fl.active) {
                    prop_assert!(a || !b, "channel masked at {} but not at {}", hi, lo);
                }
            }
        }
        if mode == ScopeMode::AllChannels {
            // Zeroed channels only lower M, so nothing new crosses the threshold.
            let (_, again) = mask_step(&at_hi, hi, mode, true).unwrap();
            prop_assert_eq!(again, 0);
        }
        prop_assert!(at_hi.check_mask_integrity().is_ok());
    }

    #[test]
    fn pack_unpack_round_trip(width in 1u32..=16, raw in prop::collection::vec(any::<u32>(), 0..200)) {
        let indices: Vec<u32> = raw.iter().map(|v| v & ((1u32 << width) - 1)).collect();
        let bytes = pack_indices(&indices, width).unwrap();
        prop_assert_eq!(bytes.len(), (indices.len() * width as usize).div_ceil(8));
        prop_assert_eq!(unpack_indices(&bytes, width, indices.len()).unwrap(), indices);
    }

    #[test]
    fn kmeans_is_deterministic_and_consistent(
        values in prop::collection::vec(-1.0f64..1.0, 1..300),
        k in 1usize..20,
        seed in any::<u64>(),
    ) {
        let a = kmeans_fit(&values, k, seed, 4).unwrap();
        let b = kmeans_fit(&values, k, seed, 4).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.codebook.len() <= k);
        let c = a.codebook.centroids();
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        let sse: f64 = values.iter().zip(&a.assignments).map(|(v, &i)| (v - c[i]).powi(2)).sum();
        prop_assert!((sse - a.sse).abs() <= 1e-12 * sse.max(1.0));
        // Every value sits with its nearest centroid.
        for (v, &i) in values.iter().zip(&a.assignments) {
            prop_assert_eq!(a.codebook.nearest(*v), i);
        }
    }

    #[test]
    fn dequantized_weights_are_centroids(seed in any::<u64>(), k in 1usize..12, global in any::<bool>()) {
        let mut r = rng(seed);
        let mut model = random_model(&mut r, 5, 7);
        random_mask(&mut model, &mut r, 0.2);
        prop_assume!(model.count_weights(true) > 0);
        let scope = if global { QuantScope::Global } else { QuantScope::PerLayer };
        let q = quantize_model(&model, k, scope, seed).unwrap();
        let back = dequantize(&q).unwrap();
        prop_assert_eq!(back.layers.len(), model.layers.len());
        for (n, (lb, lm)) in back.layers.iter().zip(&model.layers).enumerate() {
            let books: Vec<&[f64]> = match q.layers[n].codebook {
                Some(i) => vec![q.codebooks[i].centroids()],
                None => vec![],
            };
            for (fb, fm) in lb.filters.iter().zip(&lm.filters) {
                prop_assert_eq!(fb.bias, fm.bias);
                prop_assert_eq!(&fb.active, &fm.active);
                for c in 0..fb.inputs.len() {
                    for &w in fb.channel(c, lb.taps) {
                        if fm.active[c] {
                            prop_assert!(books.iter().any(|b| b.contains(&w)));
                        } else {
                            prop_assert_eq!(w, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn size_fraction_grows_with_k(remaining in 1u64..400_000, extra in 0u64..100_000, scopes in 1u64..10) {
        let original = remaining + extra;
        let mut last = 0.0;
        for bits in 1..=8u32 {
            let f = size_report(remaining, original, Some(1 << bits), scopes).unwrap().size_fraction;
            prop_assert!(f > last);
            last = f;
        }
    }

    #[test]
    fn selection_respects_the_bound(
        cells in prop::collection::vec((0usize..4, 0usize..6, -5.0f64..5.0, 0.01f64..1.0), 1..20),
        bound in -5.0f64..5.0,
    ) {
        let thetas = [0.60, 0.65, 0.70, 0.75];
        let ks = [2, 4, 8, 16, 32, 64];
        let rows: Vec<SweepRow> = cells
            .iter()
            .map(|&(t, k, score, size)| SweepRow {
                theta: thetas[t],
                k: ks[k],
                outcome: Ok(CellResult {
                    scores: Scores([(Metric::SiSdr, score)].into_iter().collect()),
                    size_fraction: size,
                    remaining_params: 0,
                    removal_ratio: 0.0,
                }),
            })
            .collect();
        let table = SweepResult { rows, bapd: Default::default(), selection_metric: Metric::SiSdr, selected: None };
        let b = BapdBound { noisy_score: bound, original_model_score: bound, bound, metric: Metric::SiSdr };
        let admissible: Vec<&(usize, usize, f64, f64)> = cells.iter().filter(|c| c.2 >= bound).collect();
        match select_operating_point(&table, &b) {
            None => prop_assert!(admissible.is_empty()),
            Some((theta, k)) => {
                let chosen = cells
                    .iter()
                    .filter(|c| thetas[c.0] == theta && ks[c.1] == k && c.2 >= bound)
                    .map(|c| c.3)
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(chosen.is_finite());
                prop_assert!(admissible.iter().all(|c| c.3 >= chosen));
            }
        }
    }
}

#[test]
fn per_layer_error_never_exceeds_global_error() {
    let mut r = rng(21);
    for _ in 0..50 {
        let a: Vec<f64> = (0..r.random_range(2..9)).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..r.random_range(2..9)).map(|_| r.random_range(-0.2..0.2)).collect();
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        for k in 1..=4 {
            let per_layer = dp_kmeans_sse(&a, k) + dp_kmeans_sse(&b, k);
            assert!(per_layer <= dp_kmeans_sse(&all, k) + 1e-15);
        }
    }
}

#[test]
fn three_tap_example_matches_reference_loop() {
    let layer = ConvLayer::dense(vec![vec![vec![1.0, 2.0, 3.0]]], vec![0.0], Activation::Identity, false)
        .unwrap();
    let input = vec![vec![0.0, 1.0, 0.0, 0.0]];
    let expected = reference_conv(&[vec![vec![1.0, 2.0, 3.0]]], &[0.0], Activation::Identity, &input);
    assert_eq!(expected, vec![vec![3.0, 2.0, 1.0, 0.0]]);
    assert_eq!(conv_forward(&layer, &input).unwrap(), expected);
}
