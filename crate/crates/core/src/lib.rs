//! Typo-robust dense retrieval: typo generation, tokenization, a small
//! bi-encoder with lookup or character-CNN embeddings, BM25, exact dense
//! search and paired evaluation.

pub mod config;
pub mod encoder;
pub mod experiment;
pub mod rng;
pub mod tokenizer;
pub mod training;
pub mod typo_gen;
pub mod data;
pub mod dense_index;
pub mod eval;
pub mod sparse;
pub mod toy;

mod binio;
