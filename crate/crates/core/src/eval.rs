//! Scoring a model (or the unprocessed input) on a set of examples.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{fcn_forward, FcnModel};
use crate::signal::{seg_snr, si_sdr, PairedExample, Waveform};

/// Frame length used for segmental SNR.
pub const SEG_FRAME_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[serde(rename = "sisdr")]
    SiSdr,
    #[serde(rename = "segsnr")]
    SegSnr,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::SiSdr, Metric::SegSnr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::SiSdr => "sisdr",
            Metric::SegSnr => "segsnr",
        }
    }

    pub fn score(self, estimate: &Waveform, reference: &Waveform) -> Result<f64> {
        match self {
            Metric::SiSdr => si_sdr(estimate, reference),
            Metric::SegSnr => {
                seg_snr(estimate, reference, SEG_FRAME_LEN.min(reference.len()))
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sisdr" | "si-sdr" => Ok(Metric::SiSdr),
            "segsnr" | "seg-snr" => Ok(Metric::SegSnr),
            other => Err(Error::Parameter(format!("unknown metric `{other}`"))),
        }
    }
}

fn mean_in_order(scores: Vec<f64>) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Mean metric of the model's output against the clean references.
pub fn model_score(model: &FcnModel, examples: &[PairedExample], metric: Metric) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("no examples to score".into()));
    }
    let scores = examples
        .par_iter()
        .map(|ex| metric.score(&fcn_forward(model, &ex.noisy)?, &ex.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_in_order(scores))
}

/// Mean metric of the noisy inputs themselves.
pub fn noisy_score(examples: &[PairedExample], metric: Metric) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("no examples to score".into()));
    }
    let scores = examples
        .par_iter()
        .map(|ex| metric.score(&ex.noisy, &ex.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_in_order(scores))
}
