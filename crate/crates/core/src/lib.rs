//! Private federated training of large-vocabulary feedforward language models.
//!
//! The crate is organised around the pieces of one training round:
//!
//! - [`model`]: FOFE feedforward LM, NCE loss with exact gradients, low-rank
//!   adapters and softmax perplexity.
//! - [`payload`]: partial embedding updates (sampled embedding rows with
//!   importance weights), wire format and payload-size accounting.
//! - [`privacy`]: clipping, the Gaussian mechanism and an RDP accountant for
//!   the subsampled Gaussian.
//! - [`federation`]: cohort sampling, local SGD, aggregation, the server
//!   optimizer, EMA of the server model and the experiment loop.
//! - [`data`]: vocabulary, corpora, non-IID partitioning and a synthetic
//!   federated corpus.
//! - [`config`]: the flat `key=value` experiment configuration.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod payload;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
