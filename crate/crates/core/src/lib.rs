//! Cross-lingual argument label matching and affine head regularization for
//! polyglot semantic role tagging.
//!
//! * [`label_space`]: CoNLL ingestion, label statistics, weight-matrix files
//! * [`matcher`]: exact cardinality-constrained label pairing
//! * [`regularizer`]: affine alignment penalty and its gradients
//! * [`tagger`]: desk-scale polyglot window tagger and training schedule
//! * [`synth`]: synthetic bilingual tasks with known correspondences
//! * [`analysis`]: projection and distance-structure diagnostics

pub mod analysis;
pub mod config;
pub mod error;
pub mod label_space;
pub mod linalg;
pub mod matcher;
pub mod regularizer;
pub mod synth;
pub mod tagger;

pub use error::{ClarError, ErrorCategory, Result};
pub use label_space::{Corpus, FrequencyTable, LabelId, LabeledMatrix, Sentence};
pub use linalg::Matrix;
pub use matcher::{MatchConfig, Pairing};
pub use regularizer::AffineTransform;
pub use tagger::{TaggerModel, TrainConfig};
