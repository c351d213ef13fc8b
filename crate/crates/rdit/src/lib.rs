//! rdit: a desk-scale pixel-space diffusion-transformer laboratory.
//!
//! The crate implements a pixel-space DiT with auxiliary (register or
//! in-context) tokens, compact dual-stream blocks that give register tokens
//! their own normalization/MLP/modulation parameters, a flow-matching
//! trainer with an Euler sampler, and an analysis suite (token norms, total
//! variation, linear probing, attention maps, PCA, correlation decay) for
//! inspecting what the auxiliary tokens learn.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datakit;
pub mod dualstream;
pub mod error;
pub mod flow;
pub mod numerics;
pub mod ppm;
pub mod trainer;

pub use error::{RditError, Result};
