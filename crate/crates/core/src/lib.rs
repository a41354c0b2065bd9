//! Dual-fusion multimodal abnormality detection on paired image + clinical
//! records, built on a small reverse-mode autodiff core.
//!
//! Pipeline: clinical record → latent vector → spatialised pseudo-image →
//! CNN features, fused with image CNN features (3-D fusion) before a region
//! proposal network; the latent vector is concatenated again with pooled RoI
//! features at the classifier (1-D fusion).

pub mod checkpoint;
pub mod cli;
pub mod detection;
pub mod clinical;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
