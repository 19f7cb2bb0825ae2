//! Generation and evaluation of appearance attacks on traffic-sign
//! detectors.
//!
//! The library optimizes the initial latent and null-text embedding of a
//! deterministic denoising chain so the decoded image, pasted into street
//! scenes under random scale and rotation, is detected as an attacker
//! chosen sign class. It ships a differentiable template detector and a
//! toy denoising backend for self-contained experiments, plus a
//! subprocess adapter for external detectors, a randomized digital
//! evaluation protocol, input-transform defenses, and ablation hooks.

pub mod cli;
pub mod config;
pub mod defenses;
pub mod detection;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod optimizer;
pub mod prompts;
pub mod simulate;

pub use error::{Error, Result};
pub use image::ImageTensor;
