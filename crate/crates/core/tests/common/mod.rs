//! Test fixtures and independent oracles shared by the integration suites.

#![allow(dead_code)]

use fcn_compress::fcn::{Activation, FcnConfig, FcnModel, LayerSpec};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Small random architecture with random (f32-representable) biases.
pub fn random_model(rng: &mut ChaCha8Rng, max_filters: usize, max_taps: usize) -> FcnModel {
    let hidden = rng.random_range(1..=3);
    let mut layers: Vec<LayerSpec> = (0..hidden)
        .map(|_| {
            let act = if rng.random_bool(0.7) {
                Activation::Tanh
            } else {
                Activation::Identity
            };
            LayerSpec::new(
                rng.random_range(1..=max_filters),
                rng.random_range(1..=max_taps),
                act,
                rng.random_bool(0.6),
            )
        })
        .collect();
    layers.push(LayerSpec::new(
        1,
        rng.random_range(1..=max_taps),
        Activation::Identity,
        rng.random_bool(0.5),
    ));
    let cfg = FcnConfig {
        layers,
        seed: rng.random(),
    };
    let mut model = FcnModel::new(cfg).unwrap();
    for l in &mut model.layers {
        if l.has_bias {
            for f in &mut l.filters {
                f.bias = f32_grid(rng.random_range(-0.5..0.5));
            }
        }
    }
    model
}

/// Masks each channel with probability `p` and zeroes it.
pub fn random_mask(model: &mut FcnModel, rng: &mut ChaCha8Rng, p: f64) {
    for l in &mut model.layers {
        for f in &mut l.filters {
            for a in &mut f.active {
                if rng.random_bool(p) {
                    *a = false;
                }
            }
        }
    }
    model.apply_masks();
}

pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct sliding-window cross-correlation with a centred, zero-padded window.
pub fn reference_conv(
    weights: &[Vec<Vec<f64>>],
    biases: &[f64],
    act: Activation,
    input: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let len = input[0].len() as isize;
    weights
        .iter()
        .zip(biases)
        .map(|(filter, &b)| {
            (0..len)
                .map(|t| {
                    let mut z = b;
                    for (i, row) in filter.iter().enumerate() {
                        let h = (row.len() as isize - 1) / 2;
                        for (l, &w) in row.iter().enumerate() {
                            let src = t + l as isize - h;
                            if (0..len).contains(&src) {
                                z += w * input[i][src as usize];
                            }
                        }
                    }
                    match act {
                        Activation::Tanh => z.tanh(),
                        Activation::Identity => z,
                    }
                })
                .collect()
        })
        .collect()
}

/// Brute-force mean absolute weight and per-channel sparsity for an `I x L`
/// filter, restricted to the channels flagged in `scope`.
pub fn brute_sparsity(channels: &[Vec<f64>], scope: &[bool]) -> (f64, Vec<f64>) {
    let taps = channels[0].len();
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &inside) in channels.iter().zip(scope) {
        if inside {
            for w in row {
                total += w.abs();
                count += 1;
            }
        }
    }
    let m = total / count as f64;
    let s = channels
        .iter()
        .map(|row| row.iter().filter(|w| w.abs() < m).count() as f64 / taps as f64)
        .collect();
    (m, s)
}

/// Exact 1-D k-means: minimum within-cluster squared error with at most `k`
/// clusters, by dynamic programming over the sorted values.
pub fn dp_kmeans_sse(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // cost(i, j): squared error of v[i..j] around its mean, computed directly.
    let cost = |i: usize, j: usize| {
        let seg = &v[i..j];
        let mean = seg.iter().sum::<f64>() / seg.len() as f64;
        seg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    };
    let mut best = vec![f64::INFINITY; n + 1];
    best[0] = 0.0;
    for _ in 0..k {
        let mut next = vec![f64::INFINITY; n + 1];
        next[0] = 0.0;
        for j in 1..=n {
            next[j] = best[j];
            for (i, &b) in best[..j].iter().enumerate() {
                if b.is_finite() {
                    next[j] = next[j].min(b + cost(i, j));
                }
            }
        }
        best = next;
    }
    best[n]
}
