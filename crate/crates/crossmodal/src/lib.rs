//! Multi-modal novel view synthesis with a unified intermediate representation.
//!
//! The pipeline turns posed source images from heterogeneous sensors (EO,
//! perspective LiDAR, range-angle LiDAR, SAR) into novel views of the same
//! scene in any requested modality:
//!
//! 1. a per-modality encoder lifts each source image into a feature volume
//!    anchored in its camera frustum ([`volume::FeatureVolume`]),
//! 2. a single shared point decoder plus volume rendering collapses the
//!    overlapped volumes into a feature image at the target pose
//!    ([`render`]), in perspective or range-angle geometry,
//! 3. a per-modality diffusion denoiser, conditioned on that feature image,
//!    synthesizes the output image ([`diffusion`]).
//!
//! Joint training with randomized source/target modalities drives all
//! encoders toward one geometry-consistent latent space ([`training`]).
//!
//! Everything runs on a small reverse-mode tape over `f64` buffers
//! ([`nn::Tape`]); no GPU or external ML runtime is involved. Procedural
//! voxel scenes ([`scenes`]) stand in for a real multi-sensor capture rig so
//! the whole system trains and evaluates on a desktop CPU.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod rng;
pub mod scenes;
pub mod training;
pub mod viz;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use nn::{Modality, ModuleRegistry, Tensor};
