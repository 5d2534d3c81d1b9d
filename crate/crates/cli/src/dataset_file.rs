//! `GMDD` dataset container.
//!
//! Layout: magic `GMDD`, `u32` version, `u64` header length, a JSON header
//! holding the generator spec and sequence count, then per sequence a `u32`
//! label id followed by the raw `[channels, frames]` matrix as little-endian
//! `f32`, row-major.

use std::path::Path;

use gmd_core::data::{Dataset, DatasetSpec, LabeledSeq, MotionLabel};
use gmd_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, write_bytes, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"GMDD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: DatasetSpec,
    count: usize,
}

pub fn to_bytes(ds: &Dataset) -> CliResult<Vec<u8>> {
    let header = Header { spec: ds.spec.clone(), count: ds.sequences.len() };
    let json = serde_json::to_vec(&header).map_err(|e| CliError::usage(format!("dataset header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &ds.sequences {
        out.extend_from_slice(&(s.label.id() as u32).to_le_bytes());
        for &v in s.data.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> CliResult<Dataset> {
    let bad = |m: String| CliError::usage(format!("not a valid dataset: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing GMDD magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CliError::usage(format!("unsupported dataset version {version} (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
    let (rows, cols) = (header.spec.channels, header.spec.frames);
    let record = 4 + 4 * rows * cols;
    let data = &body[hlen..];
    if data.len() != record * header.count {
        return Err(bad(format!("expected {} sequence bytes, found {}", record * header.count, data.len())));
    }
    let mut sequences = Vec::with_capacity(header.count);
    for chunk in data.chunks_exact(record) {
        let id = u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")) as usize;
        let label = MotionLabel::from_id(id)?;
        let values = chunk[4..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        sequences.push(LabeledSeq { label, data: Tensor::new(vec![rows, cols], values)? });
    }
    Ok(Dataset { spec: header.spec, sequences })
}

pub fn save(ds: &Dataset, path: &Path) -> CliResult<()> {
    write_bytes(path, to_bytes(ds)?)
}

pub fn load(path: &Path) -> CliResult<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    from_bytes(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}
