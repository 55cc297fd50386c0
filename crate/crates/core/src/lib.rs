//! Spectral-invariant ownership watermarks for graph neural networks.
//!
//! The owner generates private *carrier* graphs, trains a scalar perception
//! head to regress each carrier's normalized algebraic connectivity, and later
//! proves ownership by querying a suspect model on the carriers and counting
//! how many decoded bits match the key induced by the carriers themselves.
//!
//! Modules:
//! - [`graph`]: graphs, Laplacian spectra, WL hashing, structural statistics
//! - [`carrier`]: carrier generation, KS gates, key induction, mixing estimate
//! - [`nn`]: reverse-mode tape, GCN/GIN layers, heads, Adam, checkpoints
//! - [`watermark`]: dual-objective embedding, decoding, verification
//! - [`calibration`]: thresholds, Monte Carlo null, uniqueness, imperceptibility
//! - [`attacks`]: pruning, fine-tuning, quantization, distillation, budgets
//! - [`hardness`]: the watermark-removal decision problem and its reduction
//! - [`io`]: text formats, TU datasets, synthetic tasks, canonical JSON
//! - [`pipeline`]: end-to-end orchestration used by the CLI

pub mod attacks;
pub mod calibration;
pub mod carrier;
pub mod graph;
pub mod hardness;
pub mod io;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod watermark;

pub use graph::Graph;
pub use par::Exec;
