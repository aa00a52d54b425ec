//! 8-bit PNG images: RGB colors and grayscale masks or alpha maps.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::grid::{ColorImage, Grid, Mask};
use crate::{Error, Result};

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save<P: image::Pixel<Subpixel = u8> + image::PixelWithColorType>(
    path: &Path,
    img: &ImageBuffer<P, Vec<u8>>,
) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
    super::write_atomic(path, &bytes)
}

pub fn write_color(path: &Path, img: &ColorImage) -> Result<()> {
    let buf = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        Rgb(img.get(x as usize, y as usize).map(to_u8))
    });
    save(path, &buf)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::corrupt(path, other.to_string()),
    })
}

pub fn read_color(path: &Path) -> Result<ColorImage> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Grid::from_vec(w, h, data)
}

/// Grayscale values in `[0, 1]`, e.g. an alpha map.
pub fn write_gray(path: &Path, img: &Grid<f64>) -> Result<()> {
    let buf = GrayImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([to_u8(*img.get(x as usize, y as usize))])
    });
    save(path, &buf)
}

/// 255 marks a valid pixel.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_gray(path, &mask.map(|&m| if m { 1.0 } else { 0.0 }))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(w, h, img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Rounds colors to what a PNG round trip would return.
pub fn quantize(img: &ColorImage) -> ColorImage {
    img.map(|c| c.map(|v| to_u8(v) as f64 / 255.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_round_trip_matches_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = Grid::from_vec(2, 2, vec![[0.0, 0.5, 1.0], [0.25, 0.3, 0.9], [1.2, -0.1, 0.7], [0.01, 0.99, 0.5]]).unwrap();
        write_color(&path, &img).unwrap();
        assert_eq!(read_color(&path).unwrap(), quantize(&img));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Grid::from_vec(3, 1, vec![true, false, true]).unwrap();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(read_color(&path), Err(Error::Corrupt { .. })));
    }
}
