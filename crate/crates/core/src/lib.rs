//! Topology-agnostic human motion autoencoder.
//!
//! Motion over arbitrary skeletons is encoded into a skeleton-free latent
//! space and decoded under another skeleton template, which gives
//! retargeting, denoising and joint upsampling from one model.

pub mod mocap;
pub mod skeleton;
#[cfg(feature = "model")]
pub mod model;
#[cfg(feature = "model")]
pub mod training;
#[cfg(feature = "model")]
pub mod tasks;
