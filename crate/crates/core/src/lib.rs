//! Multi-level hierarchical label prediction as conditional label-sequence
//! generation.
//!
//! The crate bundles everything needed to train and evaluate the model on a
//! desk-scale corpus with no external ML runtime:
//!
//! * [`tensor`] / [`tape`] / [`optim`] / [`gradcheck`] — dense f64 tensors, a
//!   recorded-graph reverse-mode differentiation engine, Adam, and a central
//!   finite-difference verification oracle.
//! * [`hierarchy`] — the multi-level label taxonomy and its graph adjacency.
//! * [`corpus`] — instance schema, JSONL ingestion, vocabulary, synthetic
//!   corpus generation, deterministic batching.
//! * [`encoder`] / [`decoder`] — label-attentive encoder (self-attention stack,
//!   label-graph GCN, level-specific label attention) and GRU label-sequence
//!   decoders running top-down and bottom-up, plus baseline heads.
//! * [`training`] — joint losses, the two-step partitioned update loop,
//!   checkpointing.
//! * [`metrics`] — accuracy, macro-F1, path-consistency metrics, label-wise F1,
//!   report emission.
//! * [`config`] / [`harness`] — the run configuration document and the
//!   command-level orchestration used by the CLI.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
