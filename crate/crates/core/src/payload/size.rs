use serde::Serialize;

use super::wire::HEADER_BYTES;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Byte breakdown of one serialized client payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PayloadSize {
    pub header: u64,
    /// 4 bytes per transmitted word id.
    pub indices: u64,
    /// 4 bytes per transmitted trainable scalar.
    pub scalars: u64,
    pub scalar_count: u64,
}

impl PayloadSize {
    pub fn total(&self) -> u64 {
        self.header + self.indices + self.scalars
    }
}

/// Serialized size of a client payload for `config` with optional partial
/// embedding updates over `peu_m` words and optional rank-`lora_rank`
/// adapters. Without partial updates every row (and its id) is sent.
pub fn payload_size_bytes(
    config: &ModelConfig,
    peu_m: Option<usize>,
    lora_rank: Option<usize>,
) -> Result<PayloadSize> {
    let mut cfg = config.clone();
    cfg.lora_rank = lora_rank;
    cfg.validate()?;
    let m = peu_m.unwrap_or(cfg.vocab_size);
    if m > cfg.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "cannot send {m} rows of a {}-word vocabulary",
            cfg.vocab_size
        )));
    }
    let scalar_count = (m * cfg.trainable_row_width() + cfg.trainable_dense_len()) as u64;
    Ok(PayloadSize {
        header: HEADER_BYTES as u64,
        indices: 4 * m as u64,
        scalars: 4 * scalar_count,
        scalar_count,
    })
}
