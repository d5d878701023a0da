//! Synthetic clean/noise signals, SNR-controlled mixing and proxy quality metrics.
//!
//! Clean signals are band-limited below a quarter of Nyquist so that a small
//! convolutional model can learn to separate them from broadband noise. Every
//! example draws from its own ChaCha stream keyed by `(seed, split, index)`, so
//! corpora do not depend on generation order or on the number of worker threads.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SI-SDR ceiling reported when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 100.0;
/// SI-SDR floor reported when the estimate has no component along the reference.
pub const SI_SDR_FLOOR_DB: f64 = -100.0;
/// Per-frame clamp applied by [`seg_snr`].
pub const SEG_SNR_RANGE_DB: (f64, f64) = (-10.0, 35.0);

/// A sampled mono signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude over the whole signal.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Clean-signal generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CleanKind {
    MultiSine,
    FilteredNoiseBand,
}

/// Noise generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    LowPassRumble,
    AmplitudeModulated,
}

impl fmt::Display for CleanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CleanKind::MultiSine => "multi-sine",
            CleanKind::FilteredNoiseBand => "filtered-noise-band",
        })
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::LowPassRumble => "low-pass-rumble",
            NoiseKind::AmplitudeModulated => "amplitude-modulated",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "low-pass-rumble" => Ok(NoiseKind::LowPassRumble),
            "amplitude-modulated" => Ok(NoiseKind::AmplitudeModulated),
            other => Err(Error::Parameter(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Recipe for a synthetic paired corpus.
///
/// Training and test splits use different noise generators and different SNR
/// grids, so evaluation always happens under mismatched conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub example_len: usize,
    pub sample_rate: u32,
    pub clean_generator: CleanKind,
    pub noise_generator: NoiseKind,
    pub test_noise_generator: NoiseKind,
    pub train_snrs_db: Vec<f64>,
    pub test_snrs_db: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 96,
            n_test: 32,
            example_len: 1024,
            sample_rate: 16_000,
            clean_generator: CleanKind::MultiSine,
            noise_generator: NoiseKind::White,
            test_noise_generator: NoiseKind::AmplitudeModulated,
            train_snrs_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            test_snrs_db: vec![-12.0, -6.0, 0.0, 6.0],
            seed: 2019,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.example_len == 0 {
            return Err(Error::Parameter(
                "corpus sizes and example length must be positive".into(),
            ));
        }
        if self.sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if self.train_snrs_db.is_empty() || self.test_snrs_db.is_empty() {
            return Err(Error::Parameter("SNR lists must be non-empty".into()));
        }
        if let Some(s) = self
            .train_snrs_db
            .iter()
            .chain(&self.test_snrs_db)
            .find(|s| !s.is_finite())
        {
            return Err(Error::Parameter(format!("non-finite SNR {s}")));
        }
        Ok(())
    }

    /// Whether training and test noise come from different generators.
    pub fn is_mismatched(&self) -> bool {
        self.noise_generator != self.test_noise_generator
    }
}

/// A clean reference and its noisy mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

impl PairedExample {
    /// SNR recomputed from the stored pair.
    pub fn achieved_snr_db(&self) -> f64 {
        let residual: Vec<f64> = self
            .noisy
            .samples()
            .iter()
            .zip(self.clean.samples())
            .map(|(n, c)| n - c)
            .collect();
        10.0 * (self.clean.power() / power(&residual)).log10()
    }
}

/// Train and test splits of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<PairedExample>,
    pub test: Vec<PairedExample>,
}

/// Returns `clean + g·noise` with `g` chosen so the mixture has exactly `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let gain = snr_gain(clean, noise, snr_db)?;
    let mixed = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| c + gain * n)
        .collect();
    Waveform::new(mixed, clean.sample_rate())
}

/// Noise gain that [`mix_at_snr`] applies.
pub fn snr_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "clean has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("non-finite SNR {snr_db}")));
    }
    let pc = clean.power();
    let pn = noise.power();
    if pc == 0.0 {
        return Err(Error::DegenerateInput("clean signal has zero power".into()));
    }
    if pn == 0.0 {
        return Err(Error::DegenerateInput("noise signal has zero power".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Scale-invariant signal-to-distortion ratio in dB.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    let r = reference.samples();
    let e = estimate.samples();
    let rr = dot(r, r);
    if rr == 0.0 {
        return Err(Error::DegenerateInput("reference is all zeros".into()));
    }
    let alpha = dot(e, r) / rr;
    let mut target_energy = 0.0;
    let mut residual_energy = 0.0;
    for (&ei, &ri) in e.iter().zip(r) {
        let t = alpha * ri;
        target_energy += t * t;
        residual_energy += (ei - t) * (ei - t);
    }
    if target_energy == 0.0 {
        return Ok(SI_SDR_FLOOR_DB);
    }
    if residual_energy < 1e-20 * target_energy {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / residual_energy).log10()).clamp(SI_SDR_FLOOR_DB, SI_SDR_CAP_DB))
}

/// Segmental SNR: mean of per-frame SNRs over non-overlapping frames, each
/// clamped to [`SEG_SNR_RANGE_DB`]. A trailing partial frame is ignored.
pub fn seg_snr(estimate: &Waveform, reference: &Waveform, frame_len: usize) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    if frame_len == 0 {
        return Err(Error::Parameter("frame length must be positive".into()));
    }
    if frame_len > reference.len() {
        return Err(Error::Shape(format!(
            "frame length {frame_len} exceeds signal length {}",
            reference.len()
        )));
    }
    if reference.samples().iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateInput("reference is all zeros".into()));
    }
    let (lo, hi) = SEG_SNR_RANGE_DB;
    let frames: Vec<f64> = reference
        .samples()
        .chunks_exact(frame_len)
        .zip(estimate.samples().chunks_exact(frame_len))
        .map(|(r, e)| {
            let signal = dot(r, r);
            let noise: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if noise == 0.0 {
                hi
            } else if signal == 0.0 {
                lo
            } else {
                (10.0 * (signal / noise).log10()).clamp(lo, hi)
            }
        })
        .collect();
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1 << 40;

fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Peak-normalises to 0.5 so clean levels are comparable across generators.
fn normalise(mut x: Vec<f64>) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    x
}

/// Highest normalised frequency (cycles/sample) a clean signal may contain:
/// a quarter of Nyquist.
pub const CLEAN_BAND_EDGE: f64 = 0.125;
const CLEAN_BAND_LOW: f64 = 0.01;

fn synth_clean(kind: CleanKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        CleanKind::MultiSine => {
            let tones = rng.random_range(3..=8);
            let mut x = vec![0.0; n];
            for _ in 0..tones {
                let freq = rng.random_range(CLEAN_BAND_LOW..CLEAN_BAND_EDGE * 0.95);
                let amp = rng.random_range(0.2..1.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                for (t, v) in x.iter_mut().enumerate() {
                    *v += amp * (2.0 * PI * freq * t as f64 + phase).sin();
                }
            }
            normalise(x)
        }
        CleanKind::FilteredNoiseBand => {
            // RBJ band-pass biquad (constant 0 dB peak gain).
            let centre = rng.random_range(0.03..0.09);
            let q = rng.random_range(2.0..4.0);
            let w0 = 2.0 * PI * centre;
            let alpha = w0.sin() / (2.0 * q);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
            let warmup = 256;
            let white = gaussian(rng, n + warmup);
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            let mut out = Vec::with_capacity(n + warmup);
            for &x0 in &white {
                let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                out.push(y0);
            }
            normalise(out.split_off(warmup))
        }
    }
}

fn synth_noise(kind: NoiseKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match kind {
        NoiseKind::White => gaussian(rng, n),
        NoiseKind::LowPassRumble => {
            // One-pole low-pass, cutoff around 0.01 cycles/sample.
            let a = (-2.0 * PI * 0.01).exp();
            let mut state = 0.0;
            gaussian(rng, n)
                .into_iter()
                .map(|w| {
                    state = a * state + (1.0 - a) * w;
                    state
                })
                .collect()
        }
        NoiseKind::AmplitudeModulated => {
            let rate = rng.random_range(0.0005..0.003);
            let depth = rng.random_range(0.5..0.9);
            let phase = rng.random_range(0.0..2.0 * PI);
            gaussian(rng, n)
                .into_iter()
                .enumerate()
                .map(|(t, w)| w * (1.0 + depth * (2.0 * PI * rate * t as f64 + phase).sin()))
                .collect()
        }
    }
}

fn synth_example(
    spec: &CorpusSpec,
    stream: u64,
    noise: NoiseKind,
    snr_db: f64,
) -> Result<PairedExample> {
    let mut rng = example_rng(spec.seed, stream);
    let n = spec.example_len;
    let clean = Waveform::new(synth_clean(spec.clean_generator, n, &mut rng), spec.sample_rate)?;
    let noise = Waveform::new(synth_noise(noise, n, &mut rng), spec.sample_rate)?;
    let noisy = mix_at_snr(&clean, &noise, snr_db)?;
    Ok(PairedExample {
        clean,
        noisy,
        snr_db,
    })
}

/// Builds the train and test splits described by `spec`.
///
/// Example `i` of a split uses the `i mod len`-th SNR of that split's grid.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let build = |count: usize, base: u64, noise: NoiseKind, snrs: &[f64]| {
        (0..count)
            .into_par_iter()
            .map(|i| synth_example(spec, base + i as u64, noise, snrs[i % snrs.len()]))
            .collect::<Result<Vec<_>>>()
    };
    let train = build(
        spec.n_train,
        TRAIN_STREAM,
        spec.noise_generator,
        &spec.train_snrs_db,
    )?;
    let test = build(
        spec.n_test,
        TEST_STREAM,
        spec.test_noise_generator,
        &spec.test_snrs_db,
    )?;
    Ok(Corpus {
        spec: spec.clone(),
        train,
        test,
    })
}

fn write_f32_le(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the corpus as raw little-endian `f32` files plus a `manifest.txt`
/// of `key=value` lines.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = &corpus.spec;
    let join = |v: &[f64]| {
        v.iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut manifest = format!(
        "seed={}\nn_train={}\nn_test={}\nexample_len={}\nsample_rate={}\n\
         clean_generator={}\nnoise_generator={}\ntest_noise_generator={}\n\
         train_snrs_db={}\ntest_snrs_db={}\n",
        spec.seed,
        spec.n_train,
        spec.n_test,
        spec.example_len,
        spec.sample_rate,
        spec.clean_generator,
        spec.noise_generator,
        spec.test_noise_generator,
        join(&spec.train_snrs_db),
        join(&spec.test_snrs_db),
    );
    for (split, examples) in [("train", &corpus.train), ("test", &corpus.test)] {
        for (i, ex) in examples.iter().enumerate() {
            let clean = format!("{split}_{i:05}_clean.f32");
            let noisy = format!("{split}_{i:05}_noisy.f32");
            write_f32_le(&dir.join(&clean), ex.clean.samples())?;
            write_f32_le(&dir.join(&noisy), ex.noisy.samples())?;
            manifest.push_str(&format!(
                "{split}.{i}={clean},{noisy},snr_db={}\n",
                ex.snr_db
            ));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}
