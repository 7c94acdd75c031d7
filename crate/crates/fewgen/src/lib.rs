//! Few-shot generation of text from attribute-value tables.
//!
//! The pipeline: ingest table/text pairs ([`data`]), learn a subword
//! vocabulary ([`bpe`]), align targets to table values for copy supervision
//! ([`align`]), train a small transformer with a copy switch ([`model`],
//! [`trainer`]), decode ([`decode`]), score ([`metrics`]), and run the whole
//! ablation grid in one call ([`harness`]).
//!
//! Everything is deterministic under explicit seeds: equal seeds reproduce
//! checkpoints and report files byte for byte.

pub mod align;
pub mod bpe;
pub mod data;
pub mod decode;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod template;
pub mod trainer;
