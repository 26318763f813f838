//! Locally differentially private image release through a normalizing flow.
//!
//! Images are mapped to a flow latent, clipped per element to a box learned
//! from training latents, perturbed with Laplace noise calibrated to the box
//! width, clipped again and mapped back to image space. The crate also holds
//! the flow trainer, a pixel-domain Laplace baseline, an empirical privacy
//! auditor, a two-model likelihood-ratio anomaly scorer and a synthetic
//! dataset generator.

pub mod data;
pub mod detect;
pub mod dp;
pub mod flow;
pub mod rng;
pub mod tensor;
pub mod train;

pub use flow::{FlowConfig, FlowError, FlowModel};
pub use tensor::{ImageTensor, LatentVector, Shape};
