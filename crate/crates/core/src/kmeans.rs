//! Scalar k-means: Lloyd iterations from k-means++ seeds, best of several restarts.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 8;
pub const MAX_CODEBOOK_LEN: usize = 1 << 16;

/// Sorted, duplicate-free centroid table.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(centroids: Vec<f64>) -> Result<Self> {
        if centroids.is_empty() || centroids.len() > MAX_CODEBOOK_LEN {
            return Err(Error::Parameter(format!(
                "codebook length {} outside [1, {MAX_CODEBOOK_LEN}]",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateInput("non-finite centroid".into()));
        }
        if centroids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Integrity(
                "centroids must be strictly increasing".into(),
            ));
        }
        Ok(Self { centroids })
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Bits per index: `ceil(log2 k)`, zero for a single centroid.
    pub fn bit_width(&self) -> u32 {
        index_bits(self.centroids.len() as u64)
    }

    /// Nearest centroid, ties going to the lower index.
    pub fn nearest(&self, v: f64) -> usize {
        nearest_sorted(&self.centroids, v)
    }
}

/// `ceil(log2 k)` with `k = 1` needing no bits.
pub fn index_bits(k: u64) -> u32 {
    if k <= 1 {
        0
    } else {
        64 - (k - 1).leading_zeros()
    }
}

/// Nearest entry of an ascending slice; ties resolve to the lowest index.
fn nearest_sorted(c: &[f64], v: f64) -> usize {
    let hi = c.partition_point(|&x| x < v);
    if hi == 0 {
        return 0;
    }
    if hi == c.len() {
        let lo = c.partition_point(|&x| x < c[hi - 1]);
        return lo;
    }
    let lo = c.partition_point(|&x| x < c[hi - 1]);
    if v - c[hi - 1] <= c[hi] - v {
        lo
    } else {
        hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Codebook index of each input value.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared errors.
    pub sse: f64,
}

fn sse_of(values: &[f64], centroids: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(v, &a)| (v - centroids[a]) * (v - centroids[a]))
        .sum()
}

/// Clusters `values` into at most `k` groups.
///
/// When `k` covers every distinct value the codebook is exactly the distinct
/// values and the error is zero. Otherwise each restart seeds with k-means++
/// from its own stream of `seed`, then runs Lloyd until assignments stop
/// changing or [`MAX_ITERATIONS`]. The restart with the lowest error wins;
/// equal errors go to the earlier restart.
pub fn kmeans_fit(values: &[f64], k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    if k < 1 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::DegenerateInput("no values to cluster".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite value".into()));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k >= distinct.len() {
        let assignments = values.iter().map(|&v| nearest_sorted(&distinct, v)).collect();
        return Ok(KMeansFit {
            codebook: Codebook::new(distinct)?,
            assignments,
            sse: 0.0,
        });
    }

    let runs: Vec<(Vec<f64>, Vec<usize>, f64)> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(values, k, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.2 < runs[best].2 {
            best = i;
        }
    }
    let (centroids, assignments, _) = runs.into_iter().nth(best).unwrap();
    finish(values, centroids, &assignments)
}

/// Drops unused centroids, merges equal ones and rebuilds the assignments.
pub(crate) fn finish(values: &[f64], centroids: Vec<f64>, assignments: &[usize]) -> Result<KMeansFit> {
    let mut used: Vec<f64> = {
        let mut seen = vec![false; centroids.len()];
        assignments.iter().for_each(|&a| seen[a] = true);
        centroids
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|(&c, _)| c)
            .collect()
    };
    used.sort_by(f64::total_cmp);
    used.dedup();
    let remap: Vec<usize> = centroids
        .iter()
        .map(|c| used.partition_point(|x| x < c))
        .collect();
    let assignments: Vec<usize> = assignments.iter().map(|&a| remap[a]).collect();
    let sse = sse_of(values, &used, &assignments);
    Ok(KMeansFit {
        codebook: Codebook::new(used)?,
        assignments,
        sse,
    })
}

fn plus_plus_seeds(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(values[rng.random_range(0..values.len())]);
    let mut d2: Vec<f64> = values
        .iter()
        .map(|v| (v - centroids[0]) * (v - centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = values.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Rounding can land on a zero-weight point; step to the last positive one.
        while d2[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        let c = values[pick];
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(values) {
            *d = d.min((v - c) * (v - c));
        }
    }
    centroids
}

fn lloyd(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>, f64) {
    let mut centroids = plus_plus_seeds(values, k, rng);
    let mut assignments = vec![usize::MAX; values.len()];
    for _ in 0..MAX_ITERATIONS {
        centroids.sort_by(f64::total_cmp);
        let next: Vec<usize> = values.iter().map(|&v| nearest_sorted(&centroids, v)).collect();
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = vec![0.0; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (&v, &a) in values.iter().zip(&assignments) {
            sums[a] += v;
            counts[a] += 1;
        }
        for c in 0..centroids.len() {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        for c in 0..centroids.len() {
            if counts[c] == 0 {
                // Re-seed at the point currently farthest from its centroid.
                let (far, _) = values
                    .iter()
                    .zip(&assignments)
                    .map(|(v, &a)| (v - centroids[a]).abs())
                    .enumerate()
                    .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
                centroids[c] = values[far];
                assignments[far] = c;
            }
        }
    }
    centroids.sort_by(f64::total_cmp);
    let assignments: Vec<usize> = values.iter().map(|&v| nearest_sorted(&centroids, v)).collect();
    let sse = sse_of(values, &centroids, &assignments);
    (centroids, assignments, sse)
}
