//! Single-channel PFM depth maps. Rows are stored bottom to top; a negative
//! scale marks little-endian data. Infinite depths are written as `1e30` and
//! read back as `+∞`.

use std::path::Path;

use crate::dibr::DEPTH_SENTINEL;
use crate::grid::{DepthMap, Grid};
use crate::{Error, Result};

pub fn encode(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.len() * 4);
    for y in (0..depth.height).rev() {
        for x in 0..depth.width {
            let d = *depth.get(x, y);
            let v = if d.is_infinite() && d > 0.0 { DEPTH_SENTINEL } else { d };
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::corrupt(path, "truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    if fields[0] != "Pf" {
        return Err(Error::corrupt(path, format!("expected single-channel PFM, found {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::corrupt(path, format!("bad PFM dimension {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3]
        .parse()
        .map_err(|_| Error::corrupt(path, format!("bad PFM scale {:?}", fields[3])))?;
    let little = scale < 0.0;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(Error::corrupt(path, "truncated PFM data"));
    }
    let mut data = vec![0.0; w * h];
    for (i, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) } as f64;
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = if v >= DEPTH_SENTINEL as f32 as f64 { f64::INFINITY } else { v };
    }
    Grid::from_vec(w, h, data)
}

pub fn write(path: &Path, depth: &DepthMap) -> Result<()> {
    super::write_atomic(path, &encode(depth))
}

pub fn read(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every value to what a PFM round trip would return.
pub fn quantize(depth: &DepthMap) -> DepthMap {
    depth.map(|&d| if d.is_infinite() { d } else { d as f32 as f64 })
}
