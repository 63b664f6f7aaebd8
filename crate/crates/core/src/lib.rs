//! Multi-loss-aware channel pruning for small feedforward CNNs.
//!
//! The crate bundles everything needed to train a baseline, prune it layer by
//! layer under a joint reconstruction / Gram-correlation / classification
//! objective, fine-tune the result and account for the compression:
//!
//! - [`tensor`], [`tape`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`network`], [`format`]: layer chains, channel masks, materialization
//!   and the `.prnk` model file.
//! - [`losses`]: the three supervision signals and their weighted sum.
//! - [`pruner`]: channel sensitivity, top-K selection, per-layer refit and
//!   the full pruning pipeline.
//! - [`metrics`]: parameter / FLOPs counts and classification error.
//! - [`data`], [`config`], [`experiment`]: datasets, run configuration and
//!   seed-suite experiments (loss ablation, pruning-rate sweep).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod format;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pruner;
pub mod table;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossSet, LossWeights};
pub use network::{ChannelMask, LayerSpec, Network};
pub use pruner::{prune_model, PruneConfig, PruneReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
