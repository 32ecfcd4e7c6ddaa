//! Retrieval-augmented generation of vulnerable C functions for
//! vulnerability-detection training sets.
//!
//! The pipeline: ingest a labeled corpus ([`corpus`]), embed and cluster the
//! vulnerable samples ([`embedding`], [`clustering`]), retrieve diverse
//! clean/vulnerable pairs with BM25 ([`retrieval`]), render prompts
//! ([`formulator`]), query an LLM ([`generator`]), filter the output with a
//! lenient C checker ([`verifier`]) and measure the result ([`metrics`]).

pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod formulator;
pub mod generator;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod verifier;
