//! Text-conditioned 3D tumor synthesis in CT.
//!
//! The crate bundles the full desk-scale pipeline: volumes and procedural
//! phantoms, the report text pipeline, a vector-quantized 3D autoencoder,
//! the mask-inpainting latent diffusion model with its contrastive
//! objective, failure-driven augmentation, radiomics diversity analysis and
//! the backend of a blinded real-vs-synthetic reading study.

pub mod autoencoder;
pub mod contrastive;
pub mod dataset;
pub mod diffusion;
pub mod digest;
pub mod error;
pub mod nn;
pub mod organ;
pub mod radiomics;
pub mod targeted_aug;
pub mod text;
pub mod training;
pub mod turing;
pub mod volume;

pub use error::{Error, Result};
pub use organ::Organ;
