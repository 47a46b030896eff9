//! Core algorithms for building language-prior-balanced VQA datasets.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It covers:
//!
//! - the record types and an in-memory [`DataStore`](data::DataStore),
//! - exact ℓ2 nearest-neighbor retrieval ([`knn`]),
//! - the two-round complementary-image collection protocol ([`pipeline`]),
//! - the answer/explanation models with analytic gradients ([`model`]),
//! - optimizers and the training loop ([`train`]),
//! - accuracy, pair-consistency and Recall@5 metrics ([`metrics`]),
//! - a synthetic world with tunable answer priors and simulated annotators ([`synth`]).
//!
//! Persistence, the annotation HTTP service and the command line live in the
//! `vqa-balance` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod answer;
pub mod data;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
