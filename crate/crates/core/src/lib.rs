//! Outlier exposure for out-of-distribution detection on frozen embeddings.
//!
//! The pipeline: load ID and candidate embeddings ([`embedstore`]), fit
//! class statistics ([`gaussian_stats`]), filter or synthesize outliers
//! ([`outlier_pipeline`]), train a linear head with the outlier-exposure
//! loss ([`trainer`]), and score/evaluate with the energy function
//! ([`scoring_eval`]).

pub mod embedstore;
pub mod error;
pub mod fixture;
pub mod gaussian_stats;
pub mod numerics;
pub mod outlier_pipeline;
pub mod par;
pub mod rng;
pub mod scoring_eval;
pub mod trainer;

pub use embedstore::{EmbeddingSet, LabelSpace, RowMeta};
pub use error::{Error, Result};
pub use gaussian_stats::ClassStats;
pub use outlier_pipeline::{Direction, FilterConfig, OutlierSet, Provenance, TrailStep};
pub use scoring_eval::{DetectionReport, ScoreKind, ScoreSeries};
pub use trainer::{LinearHead, TrainConfig, TrainRecord};
