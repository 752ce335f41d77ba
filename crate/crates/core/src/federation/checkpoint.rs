//! Checkpoints: a text manifest (format version, round, model shape, config
//! echo, tensor table with byte offsets) next to a raw little-endian `f32` blob.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `<stem>.manifest` and `<stem>.bin`; returns the manifest path.
pub fn write_checkpoint(stem: &Path, params: &ModelParams, round: usize, config_echo: &str) -> Result<PathBuf> {
    let manifest_path = stem.with_extension("manifest");
    let blob_path = stem.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad checkpoint stem {}", stem.display())))?
        .to_string();
    let mut manifest = format!(
        "pflm-checkpoint {CHECKPOINT_VERSION}\nround {round}\nblob {blob_name}\nmodel {}\n",
        serde_json::to_string(&params.config)?
    );
    let mut blob = std::io::BufWriter::new(std::fs::File::create(&blob_path)?);
    let mut offset = 0usize;
    for (name, shape, values) in params.tensors() {
        let dims = shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        manifest.push_str(&format!("tensor {name} {dims} {offset} {}\n", values.len()));
        for v in values {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += 4 * values.len();
    }
    blob.flush()?;
    for line in config_echo.lines() {
        manifest.push_str(&format!("config {line}\n"));
    }
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Load a checkpoint written by [`write_checkpoint`]; returns the model and its round.
pub fn read_checkpoint(manifest_path: &Path) -> Result<(ModelParams, usize)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    let bad = |m: String| Error::format("checkpoint", m);
    match lines.next() {
        Some(h) if h == format!("pflm-checkpoint {CHECKPOINT_VERSION}") => {}
        other => return Err(bad(format!("unexpected header {other:?}"))),
    }
    let (mut round, mut blob, mut config) = (None, None, None);
    let mut table = Vec::new();
    for line in lines {
        let (tag, rest) = line.split_once(' ').unwrap_or((line, ""));
        match tag {
            "round" => round = Some(rest.parse().map_err(|_| bad(format!("bad round {rest:?}")))?),
            "blob" => blob = Some(rest.to_string()),
            "model" => config = Some(serde_json::from_str::<ModelConfig>(rest)?),
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(bad(format!("bad tensor line {line:?}")));
                }
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
                table.push((f[0].to_string(), num(f[2])?, num(f[3])?));
            }
            "config" => {}
            _ => return Err(bad(format!("unknown line {line:?}"))),
        }
    }
    let (round, blob, config) = match (round, blob, config) {
        (Some(r), Some(b), Some(c)) => (r, b, c),
        _ => return Err(bad("missing round, blob or model line".into())),
    };
    let bytes = std::fs::read(manifest_path.with_file_name(blob))?;
    let mut tensors = BTreeMap::new();
    for (name, offset, len) in table {
        let slice = bytes
            .get(offset..offset + 4 * len)
            .ok_or_else(|| bad(format!("tensor {name} runs past the blob")))?;
        let values = slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, values);
    }
    let mut params = ModelParams::zeros(&config)?;
    params.load_tensors(&tensors)?;
    Ok((params, round))
}
