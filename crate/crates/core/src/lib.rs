// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level circuit discovery for small transformers.
//!
//! The crate scores every edge of a transformer's computational graph with
//! one of three gradient attribution methods, extracts a circuit from the
//! top-scoring edges, and measures how faithfully that circuit reproduces
//! the model's behaviour when every other edge is patched with activations
//! from a corrupted prompt.
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`model`]: a tiny pre-norm decoder-only transformer with cached,
//!   patched, and per-channel gradient forward passes.
//! - [`graph`]: edge enumeration, circuit extraction, pruning, and
//!   precision/recall.
//! - [`attribution`]: EAP, EAP-IG, EAP-GP scores, integration paths and
//!   saturation profiles.
//! - [`evaluation`]: task metrics, normalized faithfulness, sparsity sweeps.
//! - [`tasks`]: synthetic clean/corrupted task generators and JSONL import.
//! - [`cli`]: the `eapgp` command line.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
mod seed;
pub mod tasks;

pub use error::{Error, Result};
pub use seed::split_seed;
