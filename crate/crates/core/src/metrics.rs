//! Quality and consistency metrics that need no learned models: PSNR,
//! median-scaled depth error, and flow-warping error.

use crate::grid::{sample_color, ColorImage, DepthMap, FlowField, Grid, Mask};
use crate::{Error, Result};

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_mask<T, U>(a: &Grid<T>, mask: Option<&Mask>, other: &Grid<U>) -> Result<()> {
    if !a.same_shape(other) || mask.is_some_and(|m| !m.same_shape(a)) {
        return Err(Error::domain("metric inputs differ in shape"));
    }
    Ok(())
}

/// Mean over masked pixels and channels of the squared difference.
pub fn masked_mse(a: &ColorImage, b: &ColorImage, mask: Option<&Mask>) -> Result<(f64, usize)> {
    check_mask(a, mask, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if mask.map_or(true, |m| m.data[i]) {
            sum += (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::domain("metric mask is empty"));
    }
    Ok((sum / (3 * n) as f64, n))
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: Option<&Mask>) -> Result<f64> {
    let (mse, _) = masked_mse(a, b, mask)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Median; for an even count, the mean of the two middle values.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Both maps divided by their masked median, then the mean of `|p − r| / r`.
/// Pixels where either depth is non-finite or non-positive are skipped.
pub fn depth_error(predicted: &DepthMap, reference: &DepthMap, mask: Option<&Mask>) -> Result<f64> {
    check_mask(predicted, mask, reference)?;
    let pairs: Vec<(f64, f64)> = predicted
        .data
        .iter()
        .zip(&reference.data)
        .enumerate()
        .filter(|(i, (p, r))| mask.map_or(true, |m| m.data[*i]) && p.is_finite() && r.is_finite() && **p > 0.0 && **r > 0.0)
        .map(|(_, (&p, &r))| (p, r))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::domain("depth error needs at least two masked pixels"));
    }
    let mp = median(&mut pairs.iter().map(|p| p.0).collect::<Vec<_>>()).unwrap();
    let mr = median(&mut pairs.iter().map(|p| p.1).collect::<Vec<_>>()).unwrap();
    if mp <= 0.0 || mr <= 0.0 {
        return Err(Error::domain("depth map has zero median"));
    }
    let total: f64 = pairs
        .iter()
        .map(|&(p, r)| {
            let (p, r) = (p / mp, r / mr);
            (p - r).abs() / r
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Frame `t+1` resampled at `p + flow(p)` for every pixel `p` of frame `t`.
pub fn warp_by_flow(next: &ColorImage, flow: &FlowField) -> ColorImage {
    let mut out = Grid::filled(flow.width, flow.height, [0.0; 3]);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let f = flow.get(x, y);
            *out.get_mut(x, y) = sample_color(next, x as f64 + f[0], y as f64 + f[1]);
        }
    }
    out
}

/// Mean over consecutive pairs of the masked MSE between frame `t` and frame
/// `t+1` pulled back through the forward flow `t → t+1`. `masks[t]` selects
/// pixels of frame `t`; pairs with an empty mask are skipped.
pub fn flow_warp_error(frames: &[ColorImage], flows: &[FlowField], masks: &[Mask]) -> Result<f64> {
    if frames.len() < 2 || flows.len() != frames.len() - 1 || masks.len() != flows.len() {
        return Err(Error::domain("flow warping error needs one flow and mask per consecutive frame pair"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for t in 0..flows.len() {
        if !frames[t].same_shape(&frames[t + 1]) || !frames[t].same_shape(&flows[t]) {
            return Err(Error::domain("frames and flows differ in resolution"));
        }
        if masks[t].count() == 0 {
            continue;
        }
        let pulled = warp_by_flow(&frames[t + 1], &flows[t]);
        total += masked_mse(&frames[t], &pulled, Some(&masks[t]))?.0;
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::domain("no frame pair has a usable mask"));
    }
    Ok(total / pairs as f64)
}

/// Pixels of view `a` whose forward flow, followed by the backward flow
/// sampled at the landing point, returns within `threshold` pixels.
pub fn round_trip_mask(forward: &FlowField, backward: &FlowField, threshold: f64) -> Mask {
    let (w, h) = (forward.width, forward.height);
    let mut mask = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let f = forward.get(x, y);
            let (u, v) = (x as f64 + f[0], y as f64 + f[1]);
            if !(u.is_finite() && v.is_finite()) || u < -0.5 || v < -0.5 || u > w as f64 - 0.5 || v > h as f64 - 0.5 {
                continue;
            }
            let b = sample_flow(backward, u, v);
            let err = ((u + b[0] - x as f64).powi(2) + (v + b[1] - y as f64).powi(2)).sqrt();
            *mask.get_mut(x, y) = err <= threshold;
        }
    }
    mask
}

fn sample_flow(flow: &FlowField, u: f64, v: f64) -> [f64; 2] {
    let as_color = flow.map(|f| [f[0], f[1], 0.0]);
    let c = sample_color(&as_color, u, v);
    [c[0], c[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub name: String,
    pub psnr: Option<f64>,
    pub depth_error: Option<f64>,
    pub pixels: usize,
}

/// Aggregates plus per-frame rows. `None` marks a metric that could not be
/// computed for the run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: Option<f64>,
    pub min_psnr: Option<f64>,
    pub depth_error: Option<f64>,
    pub flow_warp_error: Option<f64>,
    pub flow_warp_floor: Option<f64>,
    pub initial_view_psnr: Option<f64>,
    pub extra: Vec<(String, String)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "unavailable".into(),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Fills the PSNR and depth aggregates from the per-frame rows.
    pub fn summarize(&mut self) {
        self.psnr = mean(self.frames.iter().filter_map(|f| f.psnr));
        self.min_psnr = self.frames.iter().filter_map(|f| f.psnr).reduce(f64::min);
        self.depth_error = mean(self.frames.iter().filter_map(|f| f.depth_error));
    }

    /// Flat `key = value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("psnr", fmt_opt(self.psnr));
        kv("min_psnr", fmt_opt(self.min_psnr));
        kv("depth_error", fmt_opt(self.depth_error));
        kv("flow_warp_error", fmt_opt(self.flow_warp_error));
        kv("flow_warp_floor", fmt_opt(self.flow_warp_floor));
        kv("initial_view_psnr", fmt_opt(self.initial_view_psnr));
        for (k, v) in &self.extra {
            kv(k, v.clone());
        }
        kv("frames", self.frames.len().to_string());
        for f in &self.frames {
            kv(&format!("frame.{}.psnr", f.name), fmt_opt(f.psnr));
            kv(&format!("frame.{}.depth_error", f.name), fmt_opt(f.depth_error));
            kv(&format!("frame.{}.pixels", f.name), f.pixels.to_string());
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:>12} {:>8}\n", "frame", "psnr", "depth_err", "pixels");
        for f in &self.frames {
            out.push_str(&format!(
                "{:<16} {:>10} {:>12} {:>8}\n",
                f.name,
                f.psnr.map_or("-".into(), |v| format!("{v:.2}")),
                f.depth_error.map_or("-".into(), |v| format!("{v:.4}")),
                f.pixels
            ));
        }
        out.push_str(&format!(
            "mean psnr {}  min psnr {}  depth error {}  FE {} (floor {})\n",
            fmt_opt(self.psnr),
            fmt_opt(self.min_psnr),
            fmt_opt(self.depth_error),
            fmt_opt(self.flow_warp_error),
            fmt_opt(self.flow_warp_floor)
        ));
        out
    }
}
