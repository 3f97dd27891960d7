//! Open-world semi-supervised learning with an uncertainty-adaptive margin.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, stable softmax, normalization, seeded RNG.
//! - [`datasets`]: synthetic mixtures, the seen/novel + labeled/unlabeled split,
//!   class imbalance, CSV ingestion and the binary dataset container.
//! - [`model`]: MLP backbone with a cosine (double-normalized) classifier head.
//! - [`objective`]: supervised margin cross-entropy, pairwise pseudo-label loss,
//!   prior regularizer and their logit-space gradients.
//! - [`trainer`]: optimizers and the epoch loop.
//! - [`eval`]: Hungarian matching, accuracy, NMI, head usage and a K-means baseline.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use datasets::{OpenWorldDataset, SplitConfig};
pub use error::{Error, Result};
pub use eval::{Assignment, EvalReport};
pub use model::{ForwardMode, ForwardTrace, Model, ModelConfig};
pub use numerics::{Matrix, Rng};
pub use objective::{LossConfig, MarginMode, PairBatch, Prior, UncertaintyEstimate};
pub use trainer::{EpochLog, OptimizerConfig, TrainConfig};
