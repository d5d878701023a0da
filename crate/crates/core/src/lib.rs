//! Train a small 1-D fully convolutional waveform denoiser, then shrink it with
//! sparsity-driven channel pruning and k-means weight quantization.
//!
//! The modules follow the data flow:
//!
//! - [`signal`]: synthetic clean/noise corpora, SNR mixing, SI-SDR and segmental SNR.
//! - [`fcn`]: the convolutional model, its forward pass and backpropagation training.
//! - [`pruning`]: channel sparsity, masking, mask/retrain/remove and removal reports.
//! - [`kmeans`] and [`quantization`]: codebooks, index encoding and size accounting.
//! - [`pipeline`]: prune-then-quantize, θ × k sweeps and the BAPD selection rule.
//! - [`model_io`]: the versioned `FCNZ` binary model format.

pub mod error;
pub mod eval;
pub mod fcn;
pub mod kmeans;
pub mod model_io;
pub mod pipeline;
pub mod pruning;
pub mod quantization;
pub mod signal;

pub use error::{Error, Result};
pub use eval::Metric;
pub use fcn::{fcn_forward, train, Activation, FcnConfig, FcnModel, LayerSpec, TrainConfig};
pub use pipeline::{compute_bapd, run_pp_pq, sweep, BapdBound, ExperimentConfig, SweepResult};
pub use pruning::{compact_model, mask_step, prune_retrain, removal_report, PruneConfig, PruneOutcome};
pub use quantization::{compression_rate, dequantize, quantize_model, size_report, QuantScope, QuantizedModel};
pub use signal::{mix_at_snr, seg_snr, si_sdr, synth_corpus, Corpus, CorpusSpec, PairedExample, Waveform};
