//! Zero-shot text-to-shape generation.
//!
//! Adapts a pretrained flow+decoder voxel generator to arbitrary text
//! prompts using only frozen vision-language-encoder supervision. The
//! pipeline per training step: sample latent codes conditioned on prompt
//! embeddings, decode an occupancy grid, soft-binarize it, render it from
//! random viewpoints, embed the renders, and minimize a similarity loss
//! plus a contrastive regularizer that counteracts mode collapse.
//!
//! Everything runs at f64 on a small tape autodiff ([`graph`]), so every
//! gradient in the chain is checkable against finite differences.

pub mod archive;
pub mod binarization;
pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod voxfile;

#[doc(hidden)]
pub mod bench_support;

pub use error::{Result, ZfError};
