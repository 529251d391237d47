//! Zero-shot, training-free character animation from a single image and a
//! target pose sequence, built on a pluggable latent-diffusion denoiser.
//!
//! The crate covers pose alignment and transition interpolation ([`pose`]),
//! DDIM sampling and inversion ([`diffusion`]), the denoiser contract with a
//! deterministic toy implementation ([`backend`]), per-timestep embedding
//! optimization ([`optimize`]), cross-frame consistency attention with
//! mask-guided character/background decoupling ([`attention`]), and the
//! end-to-end pipeline with its configuration and file formats
//! ([`pipeline`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backend;
pub mod diffusion;
pub mod error;
pub mod optimize;
pub mod pipeline;
pub mod pose;

pub use error::{Error, Result};
