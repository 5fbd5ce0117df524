//! Self-supervised group contrastive pre-training for stimulus-aligned
//! multichannel time series.
//!
//! The pipeline samples groups of windows recorded under the same stimulus,
//! augments each group into two homologous groups with Meiosis crossover,
//! encodes every window with a 1D-kernel residual encoder, pools each group
//! into one representation with a permutation-invariant projector, and
//! trains with a group-level NT-Xent loss. The encoder is then fine-tuned
//! with a classifier on labelled windows.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod grouping;
pub mod network;
pub mod numerics;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
