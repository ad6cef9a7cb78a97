//! Compression codec and reference renderer for optimized 3D Gaussian-splat
//! scenes.
//!
//! The pipeline computes per-parameter sensitivities with a differentiable
//! CPU renderer, clusters SH colors and normalized covariances into
//! sensitivity-weighted codebooks, fine-tunes the result with simulated 8-bit
//! quantization, and writes a Morton-ordered, DEFLATE-compressed `.c3gs`
//! container.

pub mod cluster;
pub mod codec;
pub mod finetune;
pub mod pipeline;
pub mod quant;
pub mod render;
pub mod scene;
pub mod sensitivity;
