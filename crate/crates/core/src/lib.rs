//! Desk-scale zero-shot object detection with a background-learnable
//! cascade: multi-stage semantic heads aligning pooled visual features with
//! class word vectors, inter-stage semantic information flow, a learnable
//! background word vector trained by a foreground-background RPN phase,
//! seen/unseen/generalized inference, and the matching evaluation suite.
//!
//! The detector is exercised on a synthetic attribute-shapes dataset (and on
//! ingested annotation subsets), with a small fixed backbone or dataset
//! supplied oracle features standing in for a full-scale network.

pub mod data;
pub mod detector;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod provenance;
pub mod semantic_flow;
pub mod semantic_head;
pub mod training;
pub mod util;

pub use error::{BlcError, Result};
