//! Command implementations behind the `tdlm` binary.

pub mod ablate;
pub mod build_tree;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod sample;
pub mod tokenizer;
pub mod train;
