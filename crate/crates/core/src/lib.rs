//! Desk-scale laboratory for multimodal image–text transformers.
//!
//! The crate covers the full pipeline: a small reverse-mode tensor engine,
//! synthetic paired data with controllable caption noise, five cross-modal
//! attention wirings, masked-modeling and image–text matching losses, a LAMB
//! trainer, and Recall@K / dataset-quality evaluation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
