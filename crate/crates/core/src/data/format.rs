//! Dataset file: one JSON header line `{"version":1,"dim":d,"count":n}`
//! followed by `n` rows of `d + 2` little-endian `f32` values
//! (features, semi-label, true class).
//!
//! Sample ids are positional: the i-th row gets id `i` on load, and writers
//! emit samples in id order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, SemiLabel};
use crate::error::{ElsaError, Result};

const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dim: usize,
    count: usize,
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let header = Header {
        version: DATASET_VERSION,
        dim: ds.dim(),
        count: ds.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.samples()[i].id);
    for i in order {
        let s = &ds.samples()[i];
        for &f in &s.features {
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
        out.extend_from_slice(&(s.semi.wire() as f32).to_le_bytes());
        out.extend_from_slice(&(ds.ground_truth().classes()[i] as f32).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(ElsaError::Malformed {
        context: "dataset header",
        offset: 0,
        reason: "missing newline after header".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| ElsaError::Malformed {
        context: "dataset header",
        offset: 0,
        reason: e.to_string(),
    })?;
    if header.version != DATASET_VERSION {
        return Err(ElsaError::VersionMismatch {
            what: "dataset",
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let body = &bytes[nl + 1..];
    let row_bytes = (header.dim + 2) * 4;
    let expected = row_bytes * header.count;
    if body.len() < expected {
        let offset = (nl + 1 + (body.len() / row_bytes) * row_bytes) as u64;
        return Err(ElsaError::Truncated {
            context: "dataset",
            offset,
        });
    }
    if body.len() > expected {
        return Err(ElsaError::Malformed {
            context: "dataset",
            offset: (nl + 1 + expected) as u64,
            reason: "trailing bytes after last row".into(),
        });
    }
    let mut samples = Vec::with_capacity(header.count);
    let mut classes = Vec::with_capacity(header.count);
    for (i, row) in body.chunks_exact(row_bytes).enumerate() {
        let mut vals = row
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let features: Vec<f64> = vals.by_ref().take(header.dim).collect();
        let semi_raw = vals.next().unwrap();
        let class_raw = vals.next().unwrap();
        let offset = (nl + 1 + i * row_bytes) as u64;
        if semi_raw.fract() != 0.0 {
            return Err(ElsaError::Malformed {
                context: "dataset row",
                offset,
                reason: format!("semi-label {semi_raw} is not integral"),
            });
        }
        let semi = SemiLabel::from_wire(semi_raw as i8).map_err(|e| ElsaError::Malformed {
            context: "dataset row",
            offset,
            reason: e.to_string(),
        })?;
        if class_raw < 0.0 || class_raw.fract() != 0.0 {
            return Err(ElsaError::Malformed {
                context: "dataset row",
                offset,
                reason: format!("class {class_raw} is not a nonnegative integer"),
            });
        }
        samples.push(Sample {
            id: i as u64,
            features,
            semi,
        });
        classes.push(class_raw as u32);
    }
    Dataset::new(header.dim, samples, classes)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| ElsaError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| ElsaError::io(path, e))?;
    decode_dataset(&bytes)
}
