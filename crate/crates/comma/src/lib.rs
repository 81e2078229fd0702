//! Desk-scale workbench for multi-modal prompt learning on a miniature
//! dual-encoder vision-language model.
//!
//! The crate is organized around six layers:
//!
//! - [`numerics`]: dense f64 tensors, reverse-mode differentiation, and a
//!   central finite-difference oracle for verifying every gradient.
//! - [`encoders`]: miniature vision/text transformers with CLIP-style
//!   projection into a shared space and deep prompt insertion.
//! - [`prompting`]: prompt parameters and the coupling strategies, including
//!   correlated cross-branch prompt generation.
//! - [`objectives`]: zero-shot scoring, generic-knowledge distillation, total
//!   loss assembly, and the frozen-mask SGD step.
//! - [`harness`]: synthetic data, benchmark protocols (base-to-novel,
//!   cross-dataset, domain shift), the training loop, and run records.
//! - [`workbench`]: the CLI front end, ablation sweeps, and the prompt
//!   drift / accuracy-degradation analysis.
//!
//! The `examples/` directory holds one runnable program per capability; the
//! `comma` binary is a thin wrapper over [`workbench::cli_dispatch`].

pub mod error;
pub mod encoders;
pub mod numerics;

pub use error::{Error, Result};
