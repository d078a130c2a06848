//! Interactive masked autoencoders (i-MAE) at desk scale.
//!
//! Masked-autoencoder pre-training on linearly mixed image pairs, with a pair of
//! per-token linear disentanglement heads, a shared decoder that reconstructs the
//! subordinate (and optionally the dominant) image, patch-wise distillation from a
//! frozen vanilla MAE teacher, and semantics-enhanced same-class pairing.
//!
//! Evaluation covers linear separability of the disentangled features (lasso
//! regression onto teacher features, NRMSE / R² / cosine before and after the fit)
//! and the semantics measurement through finetuning and linear probing.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evalsep;
pub mod imae;
pub mod mixer;
pub mod optim;
pub mod params;
pub mod trainer;

pub use backbone::{BackboneConfig, FeatureSet, MaskSpec, Profile};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::{Dataset, ImageBatch, PatchTargets};
pub use error::{ErrorKind, ImaeError, Result};
pub use evalsep::{LinearMap, SeparabilityReport};
pub use imae::{LossConfig, LossReport};
pub use mixer::{MixConfig, MixSpec};
pub use params::ParamStore;
pub use trainer::{Phase, TrainConfig};

/// Dense row-major matrix used throughout the crate.
pub type Mat = ndarray::Array2<f64>;
