//! Little-endian wire format: a 16-byte header (version, m, row width, dense
//! length as `u32`), the sorted `u32` indices, the `f32` rows, then the `f32`
//! dense section.

use ndarray::Array2;

use super::sparse::{check_indices, SparsePayload};
use crate::error::{Error, Result};

pub const WIRE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::format("payload", format!("{what} {x} exceeds u32")))
}

pub fn encode(payload: &SparsePayload) -> Result<Vec<u8>> {
    let m = payload.indices.len();
    let width = payload.row_width();
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * (m + payload.len()));
    for v in [
        WIRE_VERSION,
        to_u32(m, "index count")?,
        to_u32(width, "row width")?,
        to_u32(payload.dense.len(), "dense length")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &i in &payload.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    for &x in payload.iter() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], vocab: usize) -> Result<SparsePayload> {
    let word = |k: usize| -> Result<[u8; 4]> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::format("payload", format!("truncated at word {k}")))
    };
    let header: Vec<usize> = (0..4)
        .map(|k| word(k).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<_>>()?;
    if header[0] != WIRE_VERSION as usize {
        return Err(Error::format("payload", format!("unsupported version {}", header[0])));
    }
    let (m, width, dense_len) = (header[1], header[2], header[3]);
    let expected = HEADER_BYTES + 4 * (m + m * width + dense_len);
    if bytes.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let indices: Vec<u32> = (0..m).map(|k| word(4 + k).map(u32::from_le_bytes)).collect::<Result<_>>()?;
    check_indices(&indices, vocab)?;
    let float = |k: usize| word(k).map(|b| f32::from_le_bytes(b) as f64);
    let base = 4 + m;
    let rows: Vec<f64> = (0..m * width).map(|k| float(base + k)).collect::<Result<_>>()?;
    let dense: Vec<f64> = (0..dense_len)
        .map(|k| float(base + m * width + k))
        .collect::<Result<_>>()?;
    Ok(SparsePayload {
        indices,
        rows: Array2::from_shape_vec((m, width), rows).expect("sized above"),
        dense,
    })
}
