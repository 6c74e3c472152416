//! Multi-condition Gaussian-process factor analysis for spike-count tensors.
//!
//! Spike counts recorded under several experimental conditions are modeled with
//! a shared pool of latent Gaussian-process time courses; per-condition loading
//! weights are themselves smooth GP functions over the condition space, so
//! conditions inform each other and responses can be interpolated to condition
//! values that were never recorded. Counts follow a negative-binomial (or
//! binomial) likelihood whose logistic terms are handled by Pólya-Gamma style
//! data augmentation, giving closed-form coordinate updates for every factor of
//! the variational posterior. Automatic relevance determination prunes unused
//! latent dimensions.
//!
//! The crate ships a library (data model, kernels, augmentation moments,
//! variational engine, prediction, metrics) and a `mcgpfa` CLI wiring synthetic
//! generation, fitting, prediction at new conditions, and evaluation.

pub mod augment;
pub mod data;
pub mod error;
pub mod infer;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod predict;
pub mod special;
pub mod state;

pub use error::{Error, Result};
