//! Reader for the CIFAR-10 binary distribution: 3073-byte records, one label
//! byte followed by 3072 pixel bytes in channel-major (CHW, 3×32×32) order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassSamples, Pool};
use crate::error::{ElsaError, Result};

pub const CIFAR_RECORD_LEN: usize = 3073;
const SIDE: usize = 32;
const CHANNELS: usize = 3;

/// Average-pooling window applied to each 32×32 channel. The feature
/// dimension is `3 · (32 / pool)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarFeatures {
    pub pool: usize,
}

impl Default for CifarFeatures {
    fn default() -> Self {
        Self { pool: 8 }
    }
}

impl CifarFeatures {
    pub fn dim(&self) -> usize {
        let s = SIDE / self.pool;
        CHANNELS * s * s
    }
}

pub fn read_cifar10_binary(path: &Path, features: CifarFeatures) -> Result<Pool> {
    let bytes = fs::read(path).map_err(|e| ElsaError::io(path, e))?;
    parse_cifar10_binary(&bytes, features)
}

pub fn parse_cifar10_binary(bytes: &[u8], features: CifarFeatures) -> Result<Pool> {
    if features.pool == 0 || !SIDE.is_multiple_of(features.pool) {
        return Err(ElsaError::invalid(format!(
            "pool size {} must divide {SIDE}",
            features.pool
        )));
    }
    let complete = bytes.len() / CIFAR_RECORD_LEN;
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(ElsaError::Truncated {
            context: "cifar-10 binary",
            offset: (complete * CIFAR_RECORD_LEN) as u64,
        });
    }
    let mut classes: Vec<ClassSamples> = Vec::new();
    let p = features.pool;
    let out_side = SIDE / p;
    let scale = 1.0 / (255.0 * (p * p) as f64);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(ElsaError::Malformed {
                context: "cifar-10 binary",
                offset: (r * CIFAR_RECORD_LEN) as u64,
                reason: format!("label byte {label} > 9"),
            });
        }
        let pixels = &rec[1..];
        let mut feat = Vec::with_capacity(features.dim());
        for c in 0..CHANNELS {
            let plane = &pixels[c * SIDE * SIDE..(c + 1) * SIDE * SIDE];
            for by in 0..out_side {
                for bx in 0..out_side {
                    let mut acc = 0u32;
                    for y in by * p..(by + 1) * p {
                        for x in bx * p..(bx + 1) * p {
                            acc += plane[y * SIDE + x] as u32;
                        }
                    }
                    feat.push(acc as f64 * scale);
                }
            }
        }
        match classes.iter_mut().find(|c| c.class == label as u32) {
            Some(c) => c.samples.push(feat),
            None => classes.push(ClassSamples {
                class: label as u32,
                samples: vec![feat],
            }),
        }
    }
    classes.sort_by_key(|c| c.class);
    Ok(Pool {
        dim: features.dim(),
        classes,
    })
}
