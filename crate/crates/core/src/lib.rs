//! Invertible-flow compressive memory: a coupling-flow encoder whose latent
//! splits into a stored prefix and a predictor-reconstructed suffix, plus the
//! training loop, slot-based memory bank, PCA baseline, metrics, and data
//! ingestion that make the codec usable end to end.

pub mod diffcore;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod idrp;
pub mod membank;
pub mod metrics;
pub mod pca;
pub mod predictor;

pub use diffcore::tensor::Tensor;
pub use error::CoreError;
