//! Partial embedding updates: per-round word sampling, sparse client
//! payloads with importance weights, server-side expansion, and payload
//! size accounting.

mod sampler;
mod size;
mod sparse;
pub mod wire;

pub use sampler::{Weighting, WordSampler};
pub use size::{payload_size_bytes, PayloadSize};
pub use sparse::{build_client_payload, expand_payload, SparsePayload};
