//! Trajectory files: one camera-to-world pose per line as 12 numbers, the
//! row-major `[R | t]` matrix. Lines starting with `#` are comments.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::camera::Pose;
use crate::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("trajectory line {}: {e}", n + 1)))?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::Config(format!("trajectory line {}: expected 12 numbers, found {}", n + 1, v.len())))?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("trajectory line {}: non-finite value", n + 1)));
        }
        poses.push(pose_from_row(&arr).map_err(|e| Error::Config(format!("trajectory line {}: {e}", n + 1)))?);
    }
    Ok(poses)
}

/// Accepts rotations that are orthonormal up to text rounding (1e-6) and
/// snaps them back onto SO(3).
fn pose_from_row(v: &[f64; 12]) -> Result<Pose> {
    if let Ok(p) = Pose::from_row_major(v) {
        return Ok(p);
    }
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    if (r.transpose() * r - Matrix3::identity()).amax() < 1e-6 && r.determinant() > 0.0 {
        Pose::orthonormalized(r, t)
    } else {
        Err(Error::domain("rotation is not orthonormal"))
    }
}

pub fn format(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn read(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn write(path: &Path, poses: &[Pose]) -> Result<()> {
    super::write_atomic(path, format(poses).as_bytes())
}
