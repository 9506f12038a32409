//! Knowledge-graph-grounded review generation with explicit text plans.
//!
//! A heterogeneous knowledge graph (item KG plus user-item and entity-keyword
//! links) is encoded with a relation-aware graph transformer. A planner
//! predicts a sequence of subgraphs, one per sentence, and a copy-augmented
//! transformer decoder verbalizes each subgraph.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod hkg;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod realizer;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
