//! One-layer chain-of-thought transformer for the k-parity problem.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only the numerical
//! core: the hierarchical task decomposition, the masked positional attention
//! layer with its fixed link function, exact reverse-mode gradients for the
//! teacher-forced and end-to-end objectives, the adversarial gradient oracle
//! used for the hardness construction, and the training regimes together with
//! checkers for the one-step and staged learning dynamics.
//!
//! File formats, the command line and plotting live in the `cotlab` crate.
//!
//! Node indices follow the usual labeling of the decomposition tree and are
//! **1-based**: inputs are `1..=d`, generated nodes are `d+1..=d+k-1`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod grad;
pub mod hardness;
pub mod link;
pub mod model;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use grad::GradMatrix;
pub use link::LinkFunction;
pub use model::{AttentionWeights, FilterConfig, FilterMode, Layout, Mask, MaskKind};
pub use task::{AugmentedTokens, DecompositionTree, ParityInstance, TargetSource, TokenMatrix};
pub use train::{Regime, Trace, TrainConfig};
