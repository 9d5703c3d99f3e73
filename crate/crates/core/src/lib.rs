//! Knowledge-aware relation extraction between cannabis and depression
//! mentions in tweets.
//!
//! The pipeline: a term lexicon locates and masks entity mentions, each
//! token is embedded together with its distances to both entities, a
//! multi-window convolutional encoder plus entity position-aware attention
//! produces one representation, a pluggable contextual encoder produces
//! another, and a learned sigmoid gate fuses the two before a four-way
//! softmax classifier. Training, evaluation, ablation and
//! annotation-agreement tooling are included, all behind the `kare` CLI.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod context;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
