//! `SRLC1` checkpoints.
//!
//! ```text
//! "SRLC1"
//! u64 header length, JSON header (UTF-8)
//! raw little-endian f64 values; manifest offsets are relative to this point
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::Nets;
use crate::autodiff::ParamSet;
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SRLC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// Owning network: `value`, `target` or `policy`.
    pub net: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the value section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_digest: String,
    pub step: u64,
    pub encoder: EncoderKind,
    pub dim: usize,
    pub item_count: u32,
    pub tensors: Vec<TensorEntry>,
}

fn sets(nets: &Nets) -> [(&'static str, &ParamSet); 3] {
    [
        ("value", &nets.value.params),
        ("target", &nets.target.params),
        ("policy", &nets.policy.params),
    ]
}

pub fn checkpoint_bytes(nets: &Nets, digest: &str, step: u64) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut values = Vec::new();
    for (net, set) in sets(nets) {
        for p in set.iter() {
            tensors.push(TensorEntry {
                net: net.to_string(),
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: values.len() as u64,
            });
            for v in p.value.data() {
                values.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let enc = &nets.policy.encoder;
    let header = CheckpointHeader {
        config_digest: digest.to_string(),
        step,
        encoder: enc.kind(),
        dim: enc.dim(),
        item_count: enc.item_count(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + header.len() + values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&values);
    out
}

pub fn write_checkpoint(path: &Path, nets: &Nets, digest: &str, step: u64) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(nets, digest, step)).map_err(|e| Error::io(path, e))
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(format_err("missing SRLC1 magic"));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[13..];
    if rest.len() < len {
        return Err(format_err("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| format_err(format!("bad header: {e}")))?;
    Ok((header, &rest[len..]))
}

/// Rebuilds the networks recorded in a checkpoint.
///
/// `cfg` supplies the architecture; it must agree with the header.
pub fn load_checkpoint(bytes: &[u8], cfg: &TrainConfig) -> Result<(CheckpointHeader, Nets)> {
    let (header, values) = read_header(bytes)?;
    if header.encoder != cfg.encoder || header.dim != cfg.dim {
        return Err(format_err(format!(
            "checkpoint holds a {} encoder of width {}, config asks for {} of width {}",
            header.encoder, header.dim, cfg.encoder, cfg.dim
        )));
    }
    let mut nets = Nets::init(cfg, header.item_count)?;
    let mut entries = header.tensors.iter();
    let mut expected_len = 0usize;
    for (net, set) in [
        ("value", &mut nets.value.params),
        ("target", &mut nets.target.params),
        ("policy", &mut nets.policy.params),
    ] {
        for p in set.iter_mut() {
            let e = entries
                .next()
                .ok_or_else(|| format_err(format!("manifest lacks {net}/{}", p.name)))?;
            if e.net != net || e.name != p.name || e.shape != p.value.shape() {
                return Err(format_err(format!(
                    "manifest entry {}/{} {:?} does not match {net}/{} {:?}",
                    e.net,
                    e.name,
                    e.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let start = e.offset as usize;
            let end = start + 8 * p.value.len();
            let chunk = values
                .get(start..end)
                .ok_or_else(|| format_err(format!("values of {} out of range", p.name)))?;
            for (dst, src) in p.value.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
            }
            expected_len = expected_len.max(end);
        }
    }
    if entries.next().is_some() || expected_len != values.len() {
        return Err(format_err("manifest and value section disagree"));
    }
    Ok((header, nets))
}

pub fn read_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<(CheckpointHeader, Nets)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes, cfg)
}
