//! View refinement boundary. A refiner receives the coarse render of a new
//! view (image, geometric feature map, depth, alpha) and returns the image
//! that enters the keyframe database, optionally with depth.

use crate::camera::{Intrinsics, Pose};
use crate::dibr::nearest_seed;
use crate::grid::{ColorImage, DepthMap, FeatureMap, Grid, Mask};
use crate::synth::{render_oracle, OracleScene};
use crate::{Error, Result};

pub struct RefineInput<'a> {
    pub image: &'a ColorImage,
    pub features: &'a FeatureMap,
    pub depth: &'a DepthMap,
    pub alpha: &'a Grid<f64>,
    pub pose: Pose,
    pub camera: Intrinsics,
    /// Conditioning text; ignored by the built-in refiners.
    pub prompt: &'a str,
}

impl RefineInput<'_> {
    fn check(&self) -> Result<()> {
        let w = self.image.width;
        let h = self.image.height;
        if self.depth.width != w
            || self.depth.height != h
            || self.alpha.width != w
            || self.alpha.height != h
            || self.features.width != w
            || self.features.height != h
        {
            return Err(Error::Refiner("render planes differ in resolution".into()));
        }
        if self.alpha.data.iter().any(|a| !(0.0..=1.0 + 1e-9).contains(a)) {
            return Err(Error::Refiner("alpha outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub image: ColorImage,
    pub depth: Option<DepthMap>,
    /// Pixels the refiner vouches for; the rest are not used for training.
    pub confidence: Mask,
}

pub trait Refiner: Send + Sync {
    fn name(&self) -> &str;
    fn refine(&self, input: &RefineInput) -> Result<RefineOutput>;
}

/// Returns the render unchanged.
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, input: &RefineInput) -> Result<RefineOutput> {
        input.check()?;
        Ok(RefineOutput {
            image: input.image.clone(),
            depth: None,
            confidence: Grid::filled(input.image.width, input.image.height, true),
        })
    }
}

/// Replaces the render with the exact oracle view and depth.
pub struct OracleRefiner {
    pub scene: OracleScene,
}

impl Refiner for OracleRefiner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn refine(&self, input: &RefineInput) -> Result<RefineOutput> {
        input.check()?;
        let kf = render_oracle(&self.scene, &input.pose, &input.camera);
        Ok(RefineOutput {
            image: kf.image,
            depth: Some(kf.depth),
            confidence: Grid::filled(input.camera.width, input.camera.height, true),
        })
    }
}

/// Pixels with alpha below `threshold` take the color of the nearest pixel
/// at or above it; everything else passes through.
pub struct LowAlphaFillRefiner {
    pub threshold: f64,
}

impl Default for LowAlphaFillRefiner {
    fn default() -> Self {
        LowAlphaFillRefiner { threshold: 0.5 }
    }
}

impl Refiner for LowAlphaFillRefiner {
    fn name(&self) -> &str {
        "lowalpha"
    }

    fn refine(&self, input: &RefineInput) -> Result<RefineOutput> {
        input.check()?;
        let solid = input.alpha.map(|&a| a >= self.threshold);
        let Some(nearest) = nearest_seed(&solid) else {
            // nothing to copy from: keep the render, trust only nothing
            return Ok(RefineOutput {
                image: input.image.clone(),
                depth: None,
                confidence: Grid::filled(input.image.width, input.image.height, false),
            });
        };
        let data = nearest.iter().map(|&i| input.image.data[i]).collect();
        Ok(RefineOutput {
            image: Grid::from_vec(input.image.width, input.image.height, data)?,
            depth: None,
            confidence: Grid::filled(input.image.width, input.image.height, true),
        })
    }
}

/// Builds a refiner from its configuration name.
pub fn refiner_by_name(name: &str, scene: Option<&OracleScene>, threshold: f64) -> Result<Box<dyn Refiner>> {
    match name {
        "identity" => Ok(Box::new(IdentityRefiner)),
        "lowalpha" => Ok(Box::new(LowAlphaFillRefiner { threshold })),
        "oracle" => {
            let scene = scene.ok_or_else(|| Error::Config("the oracle refiner needs an oracle scene".into()))?;
            Ok(Box::new(OracleRefiner { scene: scene.clone() }))
        }
        other => Err(Error::Config(format!("unknown refiner {other:?} (expected identity, oracle or lowalpha)"))),
    }
}

pub const UNSHUFFLE_FACTOR: usize = 8;

/// Space-to-depth: output channel `c·f² + dy·f + dx` holds input channel `c`
/// at offset `(dx, dy)` inside each `f × f` block.
pub fn pixel_unshuffle(x: &FeatureMap, f: usize) -> Result<FeatureMap> {
    if f == 0 || x.width % f != 0 || x.height % f != 0 {
        return Err(Error::domain(format!("{}x{} is not divisible by {f}", x.width, x.height)));
    }
    let (w, h, c) = (x.width / f, x.height / f, x.channels * f * f);
    let mut out = FeatureMap::zeros(w, h, c);
    for y in 0..x.height {
        for xx in 0..x.width {
            let (by, dy, bx, dx) = (y / f, y % f, xx / f, xx % f);
            let src = x.pixel(xx, y);
            let dst = out.pixel_mut(bx, by);
            for (ch, &v) in src.iter().enumerate() {
                dst[ch * f * f + dy * f + dx] = v;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &FeatureMap, f: usize) -> Result<FeatureMap> {
    if f == 0 || x.channels % (f * f) != 0 {
        return Err(Error::domain(format!("{} channels are not divisible by {}", x.channels, f * f)));
    }
    let c = x.channels / (f * f);
    let mut out = FeatureMap::zeros(x.width * f, x.height * f, c);
    for by in 0..x.height {
        for bx in 0..x.width {
            let src = x.pixel(bx, by).to_vec();
            for dy in 0..f {
                for dx in 0..f {
                    let dst = out.pixel_mut(bx * f + dx, by * f + dy);
                    for (ch, d) in dst.iter_mut().enumerate() {
                        *d = src[ch * f * f + dy * f + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2× average pooling; an odd trailing row or column is averaged alone.
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (w, h) = (x.width.div_ceil(2).max(1), x.height.div_ceil(2).max(1));
    let mut out = FeatureMap::zeros(w, h, x.channels);
    for y in 0..h {
        for xx in 0..w {
            let mut n = 0.0;
            let mut acc = vec![0.0; x.channels];
            for sy in 2 * y..(2 * y + 2).min(x.height) {
                for sx in 2 * xx..(2 * xx + 2).min(x.width) {
                    for (a, v) in acc.iter_mut().zip(x.pixel(sx, sy)) {
                        *a += v;
                    }
                    n += 1.0;
                }
            }
            for (d, a) in out.pixel_mut(xx, y).iter_mut().zip(acc) {
                *d = a / n;
            }
        }
    }
    out
}

/// Four-scale adapter pyramid: 8× pixel-unshuffle, then three 2× average
/// pools.
pub fn adapter_downscale(x: &FeatureMap) -> Result<Vec<FeatureMap>> {
    let first = pixel_unshuffle(x, UNSHUFFLE_FACTOR)?;
    let mut out = vec![first];
    for _ in 0..3 {
        let next = avg_pool2(out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}
