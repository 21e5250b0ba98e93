//! Desk-scale child-prediction denoiser: a small bidirectional transformer
//! with exact hand-written gradients, AdamW, and a checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod real;

pub use config::DenoiserConfig;
pub use denoiser::{Denoiser, Output, StepLoss};
pub use error::{ModelError, Result};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{Layout, TensorInfo};
pub use real::Real;

/// Sizes the global worker pool from `TDLM_THREADS` when set. Returns the
/// number of workers in use.
pub fn init_threads() -> usize {
    if let Some(n) = std::env::var("TDLM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // a pool may already exist (tests, repeated calls); keep it
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    rayon::current_num_threads()
}
