//! Zero-shot out-of-distribution detection from image-text similarities.
//!
//! The main score is the energy change when the top-matching classes of an
//! image are re-aligned (their similarity reset to zero). Alongside it live
//! the usual post-hoc baselines, AUROC/FPR95, an energy-regularized prompt
//! fine-tuning loop over a small frozen text encoder, a synthetic benchmark
//! generator, numerical checks of the score's analytic properties, and the
//! binary embedding / manifest formats.

pub mod embedding;
pub mod error;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod scores;
pub mod synth;
pub mod training;
pub mod verify;

pub use embedding::{cosine_similarities, log_sum_exp, normalize_rows, FeatureMatrix, SimilarityRow};
pub use error::{Error, Result};
pub use io::{EmbeddingFile, LoadedManifest, Manifest};
pub use metrics::{auroc, fpr_at_tpr, MetricResult};
pub use prompt::{PromptDims, PromptParams};
pub use rng::{derive_seed, Xorshift64Star};
pub use scores::{delta_energy, mcm_score, score_all, ScoreBreakdown, ScoreConfig, ScoreMethod};
pub use synth::{SynthConfig, SynthDataset};
pub use training::{train, EbmConfig, TrainReport};
pub use verify::TheoremReport;
