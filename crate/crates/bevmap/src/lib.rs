//! Online vectorized map construction on synthetic bird's-eye-view scenes.
//!
//! The crate builds a set-prediction transformer that decodes typed polylines
//! (lane dividers, pedestrian crossings, road boundaries) from rasterized BEV
//! observations. Predictions from the previous frame can be fed back as extra
//! decoder queries, which lets the model carry map elements through occluded
//! regions. Everything runs on the CPU in f64 with a small tape-based autodiff
//! so gradients can be checked against finite differences.
//!
//! Module map:
//! - [`geometry`]: poses, polylines, ego-frame transforms, Chamfer distance
//! - [`scene`]: seeded synthetic road scenes, rasterization, occlusion
//! - [`dataset`]: JSON-lines sequence format and raster blobs
//! - [`nn`]: tensors and reverse-mode autodiff
//! - [`querygen`]: hierarchical content/position queries, dual-mode selection
//! - [`decoder`]: raster encoder and the dynamic-position-query decoder
//! - [`matching`]: Hungarian assignment and training losses
//! - [`runtime`]: prediction memory and streaming inference
//! - [`evalmetrics`]: Chamfer-distance average precision
//! - [`train`]: experiment config, AdamW, training loop, checkpoints
//! - [`ablate`]: ablation grids over mode, probability, and query count
//! - [`render`]: qualitative panel rendering

pub mod ablate;
pub mod dataset;
pub mod decoder;
pub mod evalmetrics;
pub mod geometry;
pub mod matching;
pub mod nn;
pub mod querygen;
pub mod render;
pub mod runtime;
pub mod scene;
pub mod train;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Library version string.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
