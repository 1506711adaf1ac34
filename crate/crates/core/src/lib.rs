//! Multimodal skeleton action representation learning.
//!
//! Joint, bone and motion streams of a skeleton clip are embedded per
//! modality, fused in embedding space and passed through shared spatial and
//! temporal transformer encoders. Pretraining aligns the fused representation
//! with each unimodal representation (decomposition) and with a late-fused
//! composition of the unimodal representations (composition), while
//! variance/covariance regularization keeps every projected feature matrix
//! from collapsing.
//!
//! Crate layout:
//!
//! - [`data`]: skeleton sequences, modality derivation, views, augmentation,
//!   positive pair sampling, the synthetic generator and the SKD1 / NTU formats.
//! - [`nn`]: flat parameter storage and hand-differentiated layers.
//! - [`model`]: embeddings, fusion, the two-stream encoder and projector heads.
//! - [`losses`]: decomposition, composition and VC regularization objectives
//!   with analytic gradients.
//! - [`train`]: Adam, the learning-rate schedule, the pretraining loop and
//!   DCC1 checkpoints.
//! - [`eval`]: feature banks, linear probe, KNN retrieval, fine-tuning.
//! - [`exec`]: sequential / rayon execution switch.

pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
