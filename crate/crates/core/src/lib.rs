//! Dynamic SAE guardrails.
//!
//! The engine learns which sparse-autoencoder features carry forget-set
//! knowledge, calibrates a sequence-level classifier on a retain corpus and
//! clamps those features only inside sequences the classifier flags.
//!
//! Module map:
//! - [`sae`]: encoder/decoder forward passes, reconstruction error,
//!   decoder-row gradients and a small trainer.
//! - [`corpus_io`]: the DSGA activation corpus format, DSGW weights, DSGS
//!   stats files and the JSON guardrail config.
//! - [`feature_stats`]: mergeable squared-activation accumulators,
//!   importance ratios, percentile selection and sequential strategies.
//! - [`dynamic_guard`]: the ρ statistic, τ calibration, conditional and
//!   static clamping.
//! - [`synth`]: seeded planted-dictionary corpora.
//! - [`oracle`]: brute-force checks of the guarantees the method relies on.
//! - [`eval`]: sweeps, histograms, TVD with bootstrap CIs and latency.

pub mod corpus_io;
pub mod dynamic_guard;
pub mod error;
pub mod eval;
pub mod feature_stats;
pub mod matrix;
pub mod oracle;
pub mod pipeline;
pub mod sae;
pub mod synth;

pub use corpus_io::{ActivationCorpus, GuardrailConfig, SequenceSpan};
pub use dynamic_guard::{Guard, GuardMode, GuardOptions, GuardVerdict, RhoValue};
pub use error::{DsgError, FormatError, Result};
pub use feature_stats::{FeatureStats, ImportanceReport, SelectedFeatures};
pub use matrix::Matrix;
pub use sae::{FeatureBlock, HiddenBlock, SaeParams};
