//! Pairwise ranking objectives for mean-opinion-score (MOS) prediction.
//!
//! The crate provides:
//!
//! * [`loss`]: the fixed-margin ranking loss, the quality-aware adaptive-margin
//!   ranking loss (QAMRO), the Huber loss and their combination, each returning
//!   the loss value together with its exact (sub)gradient.
//! * [`pairing`]: construction of the ordered-pair set of a mini-batch.
//! * [`metrics`]: system-level MSE / LCC / SRCC / KTAU.
//! * [`regressor`]: a multi-head three-layer MLP trained with SGD and early stopping.
//! * [`data`]: JSONL datasets, splitting, and a synthetic MOS dataset generator.
//! * [`gradcheck`] and [`experiment`]: the verification and ablation harness used
//!   by the `qamro` command-line tool.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod pairing;
pub mod regressor;

pub use error::{Error, Result};
pub use loss::{LossConfig, LossOutput, RankingTerm};
pub use pairing::{Pair, PairSet};
