//! Prune-then-quantize pipeline, the θ × k sweep and operating-point selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{model_score, noisy_score, Metric};
use crate::fcn::{FcnConfig, FcnModel, TrainConfig};
use crate::kmeans::DEFAULT_RESTARTS;
use crate::pruning::{prune_retrain, theta_schedule, PruneConfig, PruneOutcome, ScopeMode};
use crate::quantization::{
    dequantize, quantize_model_with, CompressionReport, QuantScope, QuantizedModel,
};
use crate::signal::{Corpus, CorpusSpec};

/// Everything a run needs besides the model: data, training and compression knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: FcnConfig,
    pub train: TrainConfig,
    pub prune: PruneSettings,
    pub quant: QuantSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSettings {
    pub schedule_step: f64,
    pub retrain_epochs: usize,
    pub settle_iterations: usize,
    pub protect_single_channel_layers: bool,
    pub scope_mode: ScopeMode,
}

impl Default for PruneSettings {
    fn default() -> Self {
        let d = PruneConfig::default();
        Self {
            schedule_step: 0.05,
            retrain_epochs: d.retrain_epochs_per_step,
            settle_iterations: d.settle_iterations,
            protect_single_channel_layers: d.protect_single_channel_layers,
            scope_mode: d.scope_mode,
        }
    }
}

impl PruneSettings {
    /// Prune configuration descending from 1.0 to `theta`.
    pub fn to_config(&self, theta: f64, metric: Metric) -> PruneConfig {
        PruneConfig {
            theta_schedule: theta_schedule(theta, self.schedule_step),
            retrain_epochs_per_step: self.retrain_epochs,
            settle_iterations: self.settle_iterations,
            protect_single_channel_layers: self.protect_single_channel_layers,
            scope_mode: self.scope_mode,
            stop_at_removal: None,
            metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSettings {
    pub scope: QuantScope,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            scope: QuantScope::PerLayer,
            seed: 0,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

/// Bound for acceptable performance drop: midway between the noisy input's
/// score and the uncompressed model's score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BapdBound {
    pub noisy_score: f64,
    pub original_model_score: f64,
    pub bound: f64,
    pub metric: Metric,
}

pub fn compute_bapd(noisy_score: f64, original_score: f64, metric: Metric) -> Result<BapdBound> {
    if !noisy_score.is_finite() || !original_score.is_finite() {
        return Err(Error::Parameter("BAPD needs finite scores".into()));
    }
    Ok(BapdBound {
        noisy_score,
        original_model_score: original_score,
        bound: (noisy_score + original_score) / 2.0,
        metric,
    })
}

/// Mean test-split score per metric.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scores(pub BTreeMap<Metric, f64>);

impl Scores {
    pub fn of_model(model: &FcnModel, corpus: &Corpus) -> Result<Self> {
        Metric::ALL
            .iter()
            .map(|&m| Ok((m, model_score(model, &corpus.test, m)?)))
            .collect::<Result<_>>()
            .map(Scores)
    }

    pub fn of_noisy(corpus: &Corpus) -> Result<Self> {
        Metric::ALL
            .iter()
            .map(|&m| Ok((m, noisy_score(&corpus.test, m)?)))
            .collect::<Result<_>>()
            .map(Scores)
    }

    pub fn get(&self, metric: Metric) -> f64 {
        self.0.get(&metric).copied().unwrap_or(f64::NAN)
    }
}

/// Outcome of pruning to one threshold and quantizing with one `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub theta: f64,
    pub k: usize,
    pub prune_steps: Vec<PruneOutcome>,
    pub baseline: Scores,
    pub pruned: Scores,
    pub quantized: Scores,
    pub original_weights: usize,
    pub remaining_weights: usize,
    pub remaining_params: usize,
    pub compression: CompressionReport,
}

impl PipelineReport {
    pub fn size_fraction(&self) -> f64 {
        self.compression.size_fraction
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!(
            "theta={:.2}\nk={}\noriginal_weights={}\nremaining_weights={}\nremaining_params={}\n",
            self.theta, self.k, self.original_weights, self.remaining_weights, self.remaining_params
        );
        if let Some(last) = self.prune_steps.last() {
            let _ = writeln!(out, "removal_ratio={:.6}", last.removal_ratio);
        }
        for m in Metric::ALL {
            let _ = writeln!(
                out,
                "{m}.baseline={:.6}\n{m}.pruned={:.6}\n{m}.quantized={:.6}",
                self.baseline.get(m),
                self.pruned.get(m),
                self.quantized.get(m)
            );
        }
        out.push_str(&self.compression.to_key_values());
        out
    }
}

/// Settings shared by [`run_pp_pq`] and [`sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub prune: PruneSettings,
    pub quant: QuantSettings,
    pub metric: Metric,
}

impl From<&ExperimentConfig> for PipelineConfig {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            train: c.train.clone(),
            prune: c.prune.clone(),
            quant: c.quant.clone(),
            metric: Metric::SiSdr,
        }
    }
}

fn prune_to(
    model: &FcnModel,
    corpus: &Corpus,
    theta: f64,
    cfg: &PipelineConfig,
) -> Result<(FcnModel, Vec<PruneOutcome>)> {
    prune_retrain(model, corpus, &cfg.prune.to_config(theta, cfg.metric), &cfg.train)
        .map_err(|e| e.in_stage(format!("pruning to {theta:.2}")))
}

#[allow(clippy::too_many_arguments)]
fn quantize_stage(
    baseline: &FcnModel,
    pruned: &FcnModel,
    outcomes: Vec<PruneOutcome>,
    corpus: &Corpus,
    theta: f64,
    k: usize,
    cfg: &PipelineConfig,
    baseline_scores: &Scores,
) -> Result<(QuantizedModel, PipelineReport)> {
    let label = |e: Error| e.in_stage(format!("quantizing with k={k}"));
    let q = quantize_model_with(pruned, k, cfg.quant.scope, cfg.quant.seed, cfg.quant.restarts)
        .map_err(label)?;
    let restored = dequantize(&q).map_err(label)?;
    let original_weights = baseline.count_weights(true);
    let report = PipelineReport {
        theta,
        k,
        prune_steps: outcomes,
        baseline: baseline_scores.clone(),
        pruned: Scores::of_model(pruned, corpus)?,
        quantized: Scores::of_model(&restored, corpus)?,
        original_weights,
        remaining_weights: pruned.count_weights(true),
        remaining_params: pruned.count_params(true),
        compression: q.compression_report(original_weights as u64),
    };
    Ok((q, report))
}

/// Prunes `model` down to `theta`, then quantizes the result with `k` centroids
/// per scope. The order is fixed: pruning first.
pub fn run_pp_pq(
    model: &FcnModel,
    corpus: &Corpus,
    theta: f64,
    k: usize,
    cfg: &PipelineConfig,
) -> Result<(QuantizedModel, PipelineReport)> {
    let baseline_scores = Scores::of_model(model, corpus)?;
    let (pruned, outcomes) = prune_to(model, corpus, theta, cfg)?;
    quantize_stage(model, &pruned, outcomes, corpus, theta, k, cfg, &baseline_scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub k: usize,
    pub outcome: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub scores: Scores,
    pub size_fraction: f64,
    pub remaining_params: usize,
    pub removal_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub bapd: BTreeMap<Metric, BapdBound>,
    pub selection_metric: Metric,
    pub selected: Option<(f64, usize)>,
}

/// Evaluates every `(θ, k)` cell starting from the trained baseline.
///
/// Pruning depends only on θ, so each distinct θ is pruned once (from its own
/// copy of the baseline) and shared by that θ's cells. Failures are recorded
/// per cell.
pub fn sweep(
    model: &FcnModel,
    corpus: &Corpus,
    theta_grid: &[f64],
    k_grid: &[usize],
    cfg: &PipelineConfig,
) -> Result<SweepResult> {
    if theta_grid.is_empty() || k_grid.is_empty() {
        return Err(Error::Parameter("sweep grids must be non-empty".into()));
    }
    let baseline = Scores::of_model(model, corpus)?;
    let noisy = Scores::of_noisy(corpus)?;
    let bapd = Metric::ALL
        .iter()
        .map(|&m| Ok((m, compute_bapd(noisy.get(m), baseline.get(m), m)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let mut thetas: Vec<f64> = theta_grid.to_vec();
    thetas.sort_by(|a, b| b.total_cmp(a));
    thetas.dedup();
    let pruned: Vec<std::result::Result<(FcnModel, Vec<PruneOutcome>), String>> = thetas
        .par_iter()
        .map(|&t| prune_to(model, corpus, t, cfg).map_err(|e| e.to_string()))
        .collect();
    let lookup = |theta: f64| {
        let i = thetas.iter().position(|&t| t == theta).unwrap();
        &pruned[i]
    };

    let cells: Vec<(f64, usize)> = theta_grid
        .iter()
        .flat_map(|&t| k_grid.iter().map(move |&k| (t, k)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(theta, k)| {
            let outcome = match lookup(theta) {
                Err(e) => Err(e.clone()),
                Ok((p, steps)) => quantize_stage(
                    model,
                    p,
                    steps.clone(),
                    corpus,
                    theta,
                    k,
                    cfg,
                    &baseline,
                )
                .map(|(_, r)| CellResult {
                    scores: r.quantized,
                    size_fraction: r.compression.size_fraction,
                    remaining_params: r.remaining_params,
                    removal_ratio: r.prune_steps.last().map_or(0.0, |o| o.removal_ratio),
                })
                .map_err(|e| e.to_string()),
            };
            SweepRow { theta, k, outcome }
        })
        .collect();

    let mut result = SweepResult {
        rows,
        bapd,
        selection_metric: cfg.metric,
        selected: None,
    };
    result.selected = select_operating_point(&result, &result.bapd[&cfg.metric]);
    Ok(result)
}

/// Smallest model whose score stays at or above the bound. Equal sizes prefer
/// the larger θ, then the larger k.
pub fn select_operating_point(sweep: &SweepResult, bapd: &BapdBound) -> Option<(f64, usize)> {
    sweep
        .rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|c| (r, c)))
        .filter(|(_, c)| c.scores.get(bapd.metric) >= bapd.bound)
        .min_by(|(ra, ca), (rb, cb)| {
            ca.size_fraction
                .total_cmp(&cb.size_fraction)
                .then(rb.theta.total_cmp(&ra.theta))
                .then(rb.k.cmp(&ra.k))
        })
        .map(|(r, _)| (r.theta, r.k))
}

impl SweepResult {
    /// Tab-separated table with BAPD and selection as `#` comment lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for b in self.bapd.values() {
            let _ = writeln!(
                out,
                "# bapd\t{}\tnoisy={:.6}\toriginal={:.6}\tbound={:.6}",
                b.metric, b.noisy_score, b.original_model_score, b.bound
            );
        }
        out.push_str("theta\tk");
        for m in Metric::ALL {
            let _ = write!(out, "\t{m}");
        }
        out.push_str("\tsize_fraction\tremaining_params\tremoval_ratio\tstatus\n");
        for r in &self.rows {
            let _ = write!(out, "{:.2}\t{}", r.theta, r.k);
            match &r.outcome {
                Ok(c) => {
                    for m in Metric::ALL {
                        let _ = write!(out, "\t{:.6}", c.scores.get(m));
                    }
                    let _ = writeln!(
                        out,
                        "\t{:.6}\t{}\t{:.6}\tok",
                        c.size_fraction, c.remaining_params, c.removal_ratio
                    );
                }
                Err(e) => {
                    for _ in Metric::ALL {
                        out.push_str("\tnan");
                    }
                    let _ = writeln!(out, "\tnan\t-\tnan\terror: {}", e.replace(['\t', '\n'], " "));
                }
            }
        }
        match self.selected {
            Some((t, k)) => {
                let _ = writeln!(out, "# selected\t{}\ttheta={t:.2}\tk={k}", self.selection_metric);
            }
            None => {
                let _ = writeln!(out, "# selected\t{}\tnone", self.selection_metric);
            }
        }
        out
    }

    /// One plot-ready series per metric: score against k for each θ, with the
    /// BAPD bound as a constant column.
    pub fn series(&self) -> BTreeMap<Metric, String> {
        self.bapd
            .iter()
            .map(|(&m, b)| {
                let mut out = format!("# {m} vs k; bapd={:.6}\ntheta\tk\tscore\tbapd\n", b.bound);
                for r in &self.rows {
                    if let Ok(c) = &r.outcome {
                        let _ = writeln!(
                            out,
                            "{:.2}\t{}\t{:.6}\t{:.6}",
                            r.theta,
                            r.k,
                            c.scores.get(m),
                            b.bound
                        );
                    }
                }
                (m, out)
            })
            .collect()
    }

    pub fn write_series(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, text) in self.series() {
            let path = dir.join(format!("{m}.tsv"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(theta: f64, k: usize, score: f64, size: f64) -> SweepRow {
        SweepRow {
            theta,
            k,
            outcome: Ok(CellResult {
                scores: Scores([(Metric::SiSdr, score)].into_iter().collect()),
                size_fraction: size,
                remaining_params: 0,
                removal_ratio: 0.0,
            }),
        }
    }

    fn table(rows: Vec<SweepRow>) -> SweepResult {
        SweepResult {
            rows,
            bapd: BTreeMap::new(),
            selection_metric: Metric::SiSdr,
            selected: None,
        }
    }

    fn bound(b: f64) -> BapdBound {
        BapdBound {
            noisy_score: b,
            original_model_score: b,
            bound: b,
            metric: Metric::SiSdr,
        }
    }

    #[test]
    fn bapd_is_the_mean() {
        let b = compute_bapd(1.64, 1.85, Metric::SiSdr).unwrap();
        assert!((b.bound - 1.745).abs() < 1e-12);
        assert_eq!(format!("{:.2}", b.bound), "1.75");
        assert_eq!(compute_bapd(3.0, 3.0, Metric::SegSnr).unwrap().bound, 3.0);
        assert_eq!(compute_bapd(2.0, 10.0, Metric::SiSdr).unwrap().bound, 6.0);
        assert!(compute_bapd(f64::NAN, 1.0, Metric::SiSdr).is_err());
    }

    #[test]
    fn selection_cases() {
        let t = table(vec![row(0.7, 16, 0.5, 0.1), row(0.7, 8, 0.4, 0.08)]);
        assert_eq!(select_operating_point(&t, &bound(0.6)), None);
        assert_eq!(select_operating_point(&t, &bound(0.45)), Some((0.7, 16)));
        let t = table(vec![row(0.70, 16, 0.69, 0.1003), row(0.70, 8, 0.60, 0.08)]);
        assert_eq!(select_operating_point(&t, &bound(0.675)), Some((0.70, 16)));
    }

    #[test]
    fn selection_ties_prefer_gentler_compression() {
        let t = table(vec![
            row(0.65, 8, 1.0, 0.1),
            row(0.75, 4, 1.0, 0.1),
            row(0.75, 8, 1.0, 0.1),
            row(0.70, 2, 1.0, 0.2),
        ]);
        assert_eq!(select_operating_point(&t, &bound(0.0)), Some((0.75, 8)));
    }

    #[test]
    fn failed_cells_are_skipped_and_reported() {
        let mut t = table(vec![row(0.7, 4, 1.0, 0.1)]);
        t.rows.push(SweepRow {
            theta: 0.6,
            k: 2,
            outcome: Err("boom\tbad".into()),
        });
        assert_eq!(select_operating_point(&t, &bound(0.0)), Some((0.7, 4)));
        let tsv = t.to_tsv();
        assert!(tsv.contains("0.60\t2\tnan\tnan\tnan\t-\tnan\terror: boom bad\n"));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.corpus, CorpusSpec::default());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n").is_err());
    }
}
