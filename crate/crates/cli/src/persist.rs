//! On-disk artifacts: checkpoints and metrics streams.
//!
//! A checkpoint is one JSON manifest line followed by a little-endian `f32`
//! blob. The manifest lists the blob's sections in order with their lengths
//! (in values), so a reader can validate the file before touching weights.
//! Values are narrowed to 32 bits on save and widened on load; a loaded
//! checkpoint therefore re-saves to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use elsa_core::config::RunConfig;
use elsa_core::encoder::{EncoderDims, EncoderParams};
use elsa_core::mathcore::Tensor2;
use elsa_core::prototypes::PrototypeSet;
use elsa_core::{ElsaError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Where the stage's generator stood when the checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    #[serde(with = "hex_u64")]
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub epoch: usize,
    /// Feature scale the augmentations were calibrated against.
    pub feature_std: f64,
    pub rng: RngState,
    pub encoder: EncoderParams,
    pub prototypes: Option<PrototypeSet>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeMeta {
    k: usize,
    dim: usize,
    last_refresh_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    stage: Stage,
    epoch: usize,
    config: RunConfig,
    feature_std: f64,
    rng: RngState,
    encoder: EncoderDims,
    prototypes: Option<PrototypeMeta>,
    sections: Vec<Section>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn push_f32(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut sections = vec![Section {
        name: "encoder".into(),
        len: ck.encoder.num_params(),
    }];
    let prototypes = ck.prototypes.as_ref().map(|p| {
        sections.push(Section {
            name: "prototypes".into(),
            len: p.vectors().data().len(),
        });
        PrototypeMeta {
            k: p.k(),
            dim: p.vectors().cols(),
            last_refresh_epoch: p.last_refresh_epoch,
        }
    });
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        stage: ck.stage,
        epoch: ck.epoch,
        config: ck.config.clone(),
        feature_std: ck.feature_std,
        rng: ck.rng,
        encoder: ck.encoder.dims(),
        prototypes,
        sections,
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    push_f32(&mut out, ck.encoder.as_slice());
    if let Some(p) = &ck.prototypes {
        push_f32(&mut out, p.vectors().data());
    }
    out
}

fn malformed(offset: usize, reason: impl Into<String>) -> ElsaError {
    ElsaError::Malformed {
        context: "checkpoint",
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed(0, "missing newline after manifest"))?;
    let head = &bytes[..nl];
    // Check the version before the full schema so old files get a clear error.
    let probe: VersionProbe = serde_json::from_slice(head).map_err(|e| malformed(0, e.to_string()))?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(ElsaError::VersionMismatch {
            what: "checkpoint",
            found: probe.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_slice(head).map_err(|e| malformed(0, e.to_string()))?;

    let mut expected = vec![("encoder", m.encoder.num_params())];
    if let Some(p) = &m.prototypes {
        if p.dim != m.encoder.embed {
            return Err(malformed(
                0,
                format!("prototype dim {} != embedding dim {}", p.dim, m.encoder.embed),
            ));
        }
        expected.push(("prototypes", p.k * p.dim));
    }
    if m.sections.len() != expected.len()
        || m.sections
            .iter()
            .zip(&expected)
            .any(|(s, (n, l))| s.name != *n || s.len != *l)
    {
        return Err(malformed(0, "section table does not match the manifest"));
    }

    let body = &bytes[nl + 1..];
    let total: usize = expected.iter().map(|(_, l)| l).sum();
    if body.len() < total * 4 {
        return Err(ElsaError::Truncated {
            context: "checkpoint",
            offset: (nl + 1 + body.len() / 4 * 4) as u64,
        });
    }
    if body.len() > total * 4 {
        return Err(malformed(nl + 1 + total * 4, "trailing bytes after last section"));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let weights: Vec<f64> = values.by_ref().take(expected[0].1).collect();
    let encoder = EncoderParams::from_flat(m.encoder, weights)?;
    let prototypes = match &m.prototypes {
        Some(p) => {
            let data: Vec<f64> = values.by_ref().take(p.k * p.dim).collect();
            Some(PrototypeSet::from_vectors(
                Tensor2::new(p.k, p.dim, data)?,
                p.last_refresh_epoch,
            )?)
        }
        None => None,
    };
    Ok(Checkpoint {
        config: m.config,
        stage: m.stage,
        epoch: m.epoch,
        feature_std: m.feature_std,
        rng: m.rng,
        encoder,
        prototypes,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| ElsaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ElsaError::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// One metrics line: `{"schema":1,"kind":...,<record fields>}`. The record
/// must serialize to a JSON object.
pub fn metrics_line<T: Serialize>(kind: &str, record: &T) -> String {
    let body = serde_json::to_string(record).expect("record serializes");
    let kind = serde_json::to_string(kind).expect("kind serializes");
    let rest = body.strip_prefix('{').expect("metrics records are JSON objects");
    if rest == "}" {
        format!("{{\"schema\":{METRICS_SCHEMA},\"kind\":{kind}}}")
    } else {
        format!("{{\"schema\":{METRICS_SCHEMA},\"kind\":{kind},{rest}")
    }
}

pub fn metrics_jsonl<T: Serialize>(kind: &str, records: &[T]) -> String {
    records.iter().map(|r| metrics_line(kind, r) + "\n").collect()
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}
