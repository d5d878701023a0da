//! `fcnz`: train, prune, quantize and sweep FCN waveform denoisers from the shell.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fcn_compress::eval::{model_score, noisy_score, Metric};
use fcn_compress::model_io::{self, StoredModel};
use fcn_compress::pipeline::{run_pp_pq, sweep, ExperimentConfig, PipelineConfig};
use fcn_compress::pruning::{format_key_values, format_table, prune_retrain};
use fcn_compress::quantization::{quantize_model_with, QuantScope};
use fcn_compress::{synth_corpus, train, Corpus, FcnModel};

#[derive(Parser)]
#[command(name = "fcnz", version, about = "Channel pruning and k-means quantization for FCN denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [corpus], [model], [train], [prune] and [quant] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the synthetic corpus seed.
    #[arg(long)]
    corpus_seed: Option<u64>,
    /// Worker threads; results do not depend on this. Defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model on the synthetic corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Weight-initialisation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Prune a trained model down to a sparsity threshold.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        schedule_step: Option<f64>,
        #[arg(long)]
        retrain_epochs: Option<usize>,
        #[arg(long)]
        settle: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Quantize a (possibly pruned) model with k-means codebooks.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        scope: Option<QuantScope>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Prune to `theta`, then quantize with `k`.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate every (theta, k) cell and pick the operating point.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        thetas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        /// Metric used for the BAPD selection.
        #[arg(long, default_value = "sisdr")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
        /// Directory for one plot-ready series file per metric.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Score a model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sisdr,segsnr")]
        metric: Vec<Metric>,
    },
}

impl Common {
    fn setup(&self) -> Result<ExperimentConfig> {
        if let Some(n) = self.threads {
            if n == 0 {
                bail!("--threads must be positive");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring thread pool")?;
        }
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.corpus_seed {
            cfg.corpus.seed = seed;
        }
        Ok(cfg)
    }
}

fn corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    synth_corpus(&cfg.corpus).context("building corpus")
}

fn load_model(path: &Path) -> Result<FcnModel> {
    Ok(model_io::load(path)?.to_model()?)
}

fn write_report(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out, seed } => {
            let mut cfg = common.setup()?;
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            let data = corpus(&cfg)?;
            let model = FcnModel::new(cfg.model.clone())?;
            let (model, losses) = train(&model, &data.train, &cfg.train)?;
            for (epoch, loss) in losses.iter().enumerate() {
                println!("epoch={epoch}\tloss={loss:.6e}");
            }
            model_io::save(&StoredModel::Raw(model), &out)?;
        }
        Command::Prune {
            common,
            model,
            theta,
            schedule_step,
            retrain_epochs,
            settle,
            out,
            report,
        } => {
            let mut cfg = common.setup()?;
            if let Some(s) = schedule_step {
                cfg.prune.schedule_step = s;
            }
            if let Some(e) = retrain_epochs {
                cfg.prune.retrain_epochs = e;
            }
            if let Some(s) = settle {
                cfg.prune.settle_iterations = s;
            }
            let data = corpus(&cfg)?;
            let model = load_model(&model)?;
            let prune_cfg = cfg.prune.to_config(theta, Metric::SiSdr);
            let (pruned, outcomes) = prune_retrain(&model, &data, &prune_cfg, &cfg.train)?;
            model_io::save(&StoredModel::Raw(pruned), &out)?;
            write_report(report.as_deref(), &format_table(&outcomes))?;
            print!("{}", format_key_values(&outcomes));
        }
        Command::Quantize {
            common,
            model,
            k,
            scope,
            seed,
            out,
            report,
        } => {
            let cfg = common.setup()?;
            let model = load_model(&model)?;
            let scope = scope.unwrap_or(cfg.quant.scope);
            let seed = seed.unwrap_or(cfg.quant.seed);
            let q = quantize_model_with(&model, k, scope, seed, cfg.quant.restarts)?;
            let compression = q.compression_report(model.count_weights(true) as u64);
            model_io::save(&StoredModel::Quantized(q), &out)?;
            write_report(report.as_deref(), &compression.to_key_values())?;
        }
        Command::Pipeline {
            common,
            model,
            theta,
            k,
            out,
            report,
        } => {
            let cfg = common.setup()?;
            let data = corpus(&cfg)?;
            let model = load_model(&model)?;
            let (q, rep) = run_pp_pq(&model, &data, theta, k, &PipelineConfig::from(&cfg))?;
            model_io::save(&StoredModel::Quantized(q), &out)?;
            let text = format!("{}{}", format_table(&rep.prune_steps), rep.to_key_values());
            write_report(report.as_deref(), &text)?;
        }
        Command::Sweep {
            common,
            model,
            thetas,
            ks,
            metric,
            out,
            series,
        } => {
            let cfg = common.setup()?;
            let data = corpus(&cfg)?;
            let model = load_model(&model)?;
            let pcfg = PipelineConfig {
                metric,
                ..PipelineConfig::from(&cfg)
            };
            let result = sweep(&model, &data, &thetas, &ks, &pcfg)?;
            write_report(Some(&out), &result.to_tsv())?;
            if let Some(dir) = series {
                result.write_series(&dir)?;
            }
            match result.selected {
                Some((t, k)) => println!("selected theta={t:.2} k={k}"),
                None => println!("no cell clears the bound"),
            }
        }
        Command::Eval {
            common,
            model,
            metric,
        } => {
            let cfg = common.setup()?;
            let data = corpus(&cfg)?;
            let model = load_model(&model)?;
            println!("params={}", model.count_params(true));
            for m in metric {
                let noisy = noisy_score(&data.test, m)?;
                let enhanced = model_score(&model, &data.test, m)?;
                println!("{m}.noisy={noisy:.6}\n{m}.model={enhanced:.6}");
            }
        }
    }
    Ok(())
}
