//! Synthesis pipeline for manipulable lung nodules in chest CT volumes.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine over dense tensors.
//!   Backward passes construct graph nodes, so gradients are themselves
//!   differentiable (needed for the WGAN-GP gradient penalty).
//! * [`nn`]: layers and parameter stores built on the tensor graph.
//! * [`volume`]: CT volume container, `.svox` serialization, HU
//!   normalization, patch extraction/stitching, object placement, and a
//!   procedural thorax phantom generator used for end-to-end validation.
//! * [`mesh`]: template sphere, marching cubes, non-rigid coherent point
//!   drift registration, rescaling, and voxelization.
//! * [`vae`]: conditional shape VAE over registered template vertices.
//! * [`codec`]: the stage-1 decomposition codec (mask + residual code) and
//!   mask-conditioned reconstruction/refinement/segmentation networks.
//! * [`adversarial`]: stage-2 WGAN-GP in-painting with local and context
//!   critics, plus patch synthesis.
//! * [`detect`]: nodule classifier, FROC/CPM evaluation with bootstrap
//!   bands, hard-case selection, and sampling-policy comparison.

pub mod adversarial;
pub mod codec;
pub mod detect;
pub mod error;
pub mod mesh;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
