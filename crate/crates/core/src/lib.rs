//! Disagreement-based LoRA rank prediction.
//!
//! The crate scores how strongly each adaptable weight tensor of a transformer
//! moves the model output under Gaussian perturbation, converts those scores
//! into per-module LoRA ranks under an average-rank budget, and provides the
//! finetuning harness used to compare such plans against uniform ranks.

pub mod allocation;
pub mod data;
pub mod error;
pub mod fileio;
pub mod harness;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod scoring;

pub use error::{Error, Result};

/// Version string embedded in every JSON artifact.
pub const TOOL_VERSION: &str = concat!("adarank ", env!("CARGO_PKG_VERSION"));
