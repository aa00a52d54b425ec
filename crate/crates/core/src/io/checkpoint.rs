//! Binary tri-plane checkpoints: magic `TPF1`, little-endian `u32` dims
//! `(S, D, hidden, layers)`, every parameter tensor in declaration order as
//! little-endian `f32`, then the bounds as 6 `f64` (min xyz, max xyz).
//!
//! Encoding frequencies are not part of the header; the reader takes them
//! from the run configuration.

use std::path::Path;

use nalgebra::Vector3;

use crate::field::{Bounds, FieldConfig, TriPlaneField};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPF1";

pub fn encode(field: &TriPlaneField) -> Vec<u8> {
    let c = &field.config;
    let mut out = MAGIC.to_vec();
    for v in [c.resolution, c.features, c.hidden, c.layers] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in field.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let (lo, hi) = (field.bounds.min(), field.bounds.max());
    for v in lo.iter().chain(hi.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], pos_freqs: usize, dir_freqs: usize, path: &Path) -> Result<TriPlaneField> {
    let bad = |reason: &str| Error::corrupt(path, reason);
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(bad("missing TPF1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let config = FieldConfig {
        resolution: dim(0),
        features: dim(1),
        hidden: dim(2),
        layers: dim(3),
        pos_freqs,
        dir_freqs,
    };
    if config.validate().is_err() || config.resolution > 4096 || config.features > 65536 || config.hidden > 65536 || config.layers > 1024 {
        return Err(bad("implausible dimensions"));
    }
    let placeholder = Bounds::new(Vector3::zeros(), 1.0)?;
    let mut field = TriPlaneField::zeros(config, placeholder)?;
    let n: usize = field.tensors().iter().map(|t| t.len()).sum();
    if bytes.len() != 20 + 4 * n + 48 {
        return Err(bad(&format!(
            "expected {} bytes for this shape and encoding, found {}",
            20 + 4 * n + 48,
            bytes.len()
        )));
    }
    let mut pos = 20;
    for t in field.tensors_mut() {
        for v in t.iter_mut() {
            *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as f64;
            pos += 4;
            if !v.is_finite() {
                return Err(bad("non-finite parameter"));
            }
        }
    }
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
    }
    field.bounds = Bounds::from_min_max(&Vector3::new(b[0], b[1], b[2]), &Vector3::new(b[3], b[4], b[5]))
        .map_err(|e| bad(&e.to_string()))?;
    Ok(field)
}

pub fn write(path: &Path, field: &TriPlaneField) -> Result<()> {
    super::write_atomic(path, &encode(field))
}

pub fn read(path: &Path, pos_freqs: usize, dir_freqs: usize) -> Result<TriPlaneField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, pos_freqs, dir_freqs, path)
}

/// Rounds every parameter to what a checkpoint round trip would return.
pub fn quantize(field: &mut TriPlaneField) {
    for t in field.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
