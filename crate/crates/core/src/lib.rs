//! ctxprobe — a desk-scale laboratory for measuring, layer by layer and
//! token by token, how much context knowledge a small transformer language
//! model encodes.
//!
//! The pipeline: build class-labeled evidence corpora ([`corpus`]), train a
//! small decoder-only LM on prompts whose answers are only recoverable from
//! the evidence ([`lm`]), extract per-layer representations at question
//! tokens ([`extract`]), train linear probes and score them with V-usable
//! information ([`probe`]), and aggregate the results into heatmaps, curves,
//! and tables ([`analysis`]). [`pipeline`] orchestrates everything from one
//! config file.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the aliases below fix
//! the two supported precisions. `f32` is the pipeline default (it matches
//! the representation-cache payload), `f64` backs gradient checks and metric
//! oracles.

pub mod analysis;
pub mod corpus;
pub mod extract;
pub mod lm;
pub mod pipeline;
pub mod probe;
pub mod scalar;
pub mod seed;

pub use scalar::Scalar;

/// Default-precision model, as used by the pipeline.
pub type Model32 = lm::Model<f32>;
/// Double-precision model, used by gradient checks.
pub type Model64 = lm::Model<f64>;
/// Default-precision linear probe.
pub type LinearProbe32 = probe::LinearProbe<f32>;
/// Double-precision linear probe.
pub type LinearProbe64 = probe::LinearProbe<f64>;
