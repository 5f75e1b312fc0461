//! Hierarchical self-attention (HSA) over signal hierarchies.
//!
//! A signal hierarchy is a tree whose leaves carry feature vectors and whose
//! internal nodes group children that share a position-embedding domain.
//! Attention between leaves is derived as the gradient of a recursive
//! log-sum-exp energy; the resulting attention matrix is tied on sibling
//! blocks and is computed here by a two-pass tree dynamic program in
//! `O(M·b²)` for `M` families of branching at most `b`.
//!
//! Module map:
//! - [`hierarchy`]: tree types, builders, JSON, flattening and batching.
//! - [`energy`]: LayerNorm, centroids, interaction and node energies.
//! - [`dp`]: the bottom-up/top-down dynamic program.
//! - [`oracle`]: slow reference computations used to certify [`dp`].
//! - [`hte`]: the hierarchical transformer encoder layer.
//! - [`causal`]: causal masking and the right-skewed decoding cache.
//! - [`cost`]: FLOPs model and scaling benchmarks.

pub mod causal;
pub mod cost;
pub mod dp;
pub mod energy;
mod error;
pub mod fixtures;
pub mod hierarchy;
pub mod hte;
pub mod numeric;
pub mod oracle;

pub use causal::{CausalConfig, GrowthPolicy, RightSkewedCache};
pub use cost::{CostReport, FlopsMode};
pub use dp::{hsa_forward, AttentionOutput, DpOptions, PayloadMode, SiblingMask, SuffStats};
pub use energy::LeafStates;
pub use error::{HsaError, Result};
pub use hierarchy::{DomainKind, HierarchyStats, NodeSpec, PosMode, SignalHierarchy};
pub use oracle::DenseBlockMatrix;
