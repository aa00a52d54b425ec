//! Dense row-major 2D grids used for images, depth maps, masks and flow.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type ColorImage = Grid<[f64; 3]>;
pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;
pub type FlowField = Grid<[f64; 2]>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::domain(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let w = self.width;
        &mut self.data[y * w + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel feature vectors, `channels` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Bilinear lookup at continuous pixel-center coordinates, clamped to the
    /// border. Writes `channels` values into `out`.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) {
        let (x0, x1, fx) = bilinear_axis(u, self.width);
        let (y0, y1, fy) = bilinear_axis(v, self.height);
        let weights = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (x, y, w) in weights {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.pixel(x, y)) {
                *o += w * p;
            }
        }
    }
}

/// Clamped bilinear stencil along one axis: `(lo, hi, frac)`.
#[inline]
pub(crate) fn bilinear_axis(coord: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let c = coord.clamp(0.0, max);
    let lo = c.floor();
    let lo_i = lo as usize;
    let hi_i = (lo_i + 1).min(n - 1);
    (lo_i, hi_i, c - lo)
}

/// Bilinear color lookup at continuous pixel-center coordinates, clamped to
/// the border.
pub fn sample_color(image: &ColorImage, u: f64, v: f64) -> [f64; 3] {
    let (x0, x1, fx) = bilinear_axis(u, image.width);
    let (y0, y1, fy) = bilinear_axis(v, image.height);
    let mut out = [0.0; 3];
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    for (x, y, w) in taps {
        let c = image.get(x, y);
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_is_mean() {
        let img = Grid::from_vec(
            2,
            2,
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let c = sample_color(&img, 0.5, 0.5);
        for k in 0..3 {
            assert!((c[k] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
