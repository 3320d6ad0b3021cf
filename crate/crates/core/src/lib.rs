//! Retrieval-augmented assertion generation: corpora, tokenizer, a small
//! encoder-decoder transformer, a dense retriever trained jointly with the
//! generator, beam-search inference and evaluation metrics.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod retriever;
pub mod synthbench;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
