//! Tree-structured discrete diffusion over a vocabulary hierarchy.
//!
//! Tokens are leaves of a uniform-depth K-ary tree. The forward process moves
//! each position from its node at height `h` to the parent at height `h+1`
//! during the time interval `[t_h, t_{h+1}]`, so by `t = 1` everything sits at
//! the root. A denoiser only has to predict which of at most K children a
//! parent resolves to.

pub mod build;
pub mod embed;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod oracle;
pub mod predictor;
pub mod sampler;
pub mod schedule;
pub mod tree;

pub use build::{build_tree, BuildConfig};
pub use embed::{ppmi_embeddings, TokenEmbeddings};
pub use error::{Error, Result};
pub use schedule::{height_weights, LevelWeightConfig, LevelWeightKind, NoiseSchedule};
pub use tree::{LevelMap, NodeId, RawNode, RawTree, TokenId, TokenTree, Violation};
