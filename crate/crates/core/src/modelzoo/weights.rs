//! Weight container: `MIMICWT1` magic, u64 little-endian header length, a JSON
//! header (architecture, seed, hashes, parameter table), then raw little-endian
//! f32 parameter blocks in declaration order.

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_oracle_vlm_with, ModelSuite, ParamKind, Params, SuiteArch, ToySuiteParts};
use crate::error::{Error, Result};
use crate::ops::{device, flat};

const MAGIC: &[u8; 8] = b"MIMICWT1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: SuiteArch,
    arch_hash: String,
    seed: u64,
    content_hash: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_weights(suite: &ModelSuite, path: impl AsRef<Path>) -> Result<()> {
    let mut params = Vec::new();
    let mut data = Vec::new();
    let mut err = None;
    suite.visit(&mut |name, _, t| {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.dims().to_vec(),
        });
        match flat(t) {
            Ok(values) => data.extend(values.into_iter().flat_map(|v| (v as f32).to_le_bytes())),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let header = Header {
        arch: suite.arch().clone(),
        arch_hash: suite.arch().hash(),
        seed: suite.seed(),
        content_hash: hex::encode(Sha256::digest(&data)),
        params,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    fs::write(path, out)?;
    Ok(())
}

/// Loads a suite, optionally insisting on a specific architecture.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&SuiteArch>) -> Result<ModelSuite> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::WeightFile("missing magic bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::WeightFile("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::WeightFile(format!("malformed header: {e}")))?;
    let actual_hash = header.arch.hash();
    if actual_hash != header.arch_hash {
        return Err(Error::WeightFile(
            "architecture descriptor does not match its hash".into(),
        ));
    }
    if let Some(expected) = expected {
        if expected.hash() != header.arch_hash {
            return Err(Error::ArchitectureMismatch {
                expected: expected.hash(),
                found: header.arch_hash,
            });
        }
    }
    let data = &bytes[header_end..];
    let needed: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 4)
        .sum();
    if data.len() != needed {
        return Err(Error::WeightFile(format!(
            "expected {needed} bytes of parameters, found {}",
            data.len()
        )));
    }
    if hex::encode(Sha256::digest(data)) != header.content_hash {
        return Err(Error::WeightFile("content hash mismatch".into()));
    }

    match &header.arch {
        SuiteArch::Oracle(cfg) => {
            if !header.params.is_empty() {
                return Err(Error::WeightFile(
                    "oracle suite carries no parameters".into(),
                ));
            }
            build_oracle_vlm_with(cfg)
        }
        SuiteArch::Toy(cfg) => {
            let mut parts = ToySuiteParts::new(cfg, header.seed)?;
            let mut offset = 0usize;
            let mut index = 0usize;
            let mut err: Option<Error> = None;
            parts.visit_mut("", &mut |name, _: ParamKind, t| {
                if err.is_some() {
                    return;
                }
                let Some(entry) = header.params.get(index) else {
                    err = Some(Error::WeightFile(
                        "fewer parameters than the architecture".into(),
                    ));
                    return;
                };
                index += 1;
                if entry.name != name || entry.shape != t.dims() {
                    err = Some(Error::WeightFile(format!(
                        "parameter {} {:?} does not match {} {:?}",
                        entry.name,
                        entry.shape,
                        name,
                        t.dims()
                    )));
                    return;
                }
                let n: usize = entry.shape.iter().product();
                let values: Vec<f64> = data[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect();
                offset += 4 * n;
                match Tensor::from_vec(values, entry.shape.as_slice(), &device()) {
                    Ok(v) => *t = v,
                    Err(e) => err = Some(e.into()),
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            if index != header.params.len() {
                return Err(Error::WeightFile(
                    "more parameters than the architecture".into(),
                ));
            }
            Ok(parts.into_suite())
        }
    }
}
