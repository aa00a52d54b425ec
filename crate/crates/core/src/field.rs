//! Tri-plane radiance field: scene contraction, bilinear tri-plane lookup,
//! positional encoding, and the implicit decoder with its reverse-mode
//! derivatives. Also the feature-volume path that can initialize the planes
//! from posed images.
//!
//! A world point is mapped into the block's cube (`[-1, 1]³` on the block
//! bounds), contracted into `[-2, 2]³`, and looked up on three `S × S`
//! planes whose nodes sit at cell centers of that cube. The decoder input is
//! `γ(x) ‖ M_p` where `x` is the contracted point.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{project_point, Intrinsics};
use crate::dibr::Keyframe;
use crate::grid::{bilinear_axis, FeatureMap};
use crate::{Error, Result};

/// Maps `x` into the `[-2, 2]` cube using the L∞ norm.
#[inline]
pub fn contract(x: &Vector3<f64>) -> Vector3<f64> {
    let n = x.amax();
    if n <= 1.0 {
        *x
    } else {
        x * ((2.0 - 1.0 / n) / n)
    }
}

/// Inverse of [`contract`] on the open cube `‖c‖∞ < 2`.
pub fn uncontract(c: &Vector3<f64>) -> Vector3<f64> {
    let n = c.amax();
    if n <= 1.0 {
        *c
    } else {
        let r = 1.0 / (2.0 - n);
        c * (r / n)
    }
}

/// `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L−1}πv), cos(2^{L−1}πv)]`, where each
/// sin/cos block covers all components of `v`.
pub fn positional_encoding(v: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len() * (2 * num_freqs + 1)];
    encode_into(v, num_freqs, &mut out);
    out
}

#[inline]
fn encode_into(v: &[f64], num_freqs: usize, out: &mut [f64]) {
    let n = v.len();
    out[..n].copy_from_slice(v);
    let mut freq = std::f64::consts::PI;
    for l in 0..num_freqs {
        let base = n + 2 * n * l;
        for (k, &x) in v.iter().enumerate() {
            let (s, c) = (freq * x).sin_cos();
            out[base + k] = s;
            out[base + n + k] = c;
        }
        freq *= 2.0;
    }
}

pub fn encoded_len(n: usize, num_freqs: usize) -> usize {
    n * (2 * num_freqs + 1)
}

/// Axis-aligned cube in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub center: Vector3<f64>,
    pub half_extent: f64,
}

impl Bounds {
    pub fn new(center: Vector3<f64>, half_extent: f64) -> Result<Self> {
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(Error::domain(format!("half extent must be positive, got {half_extent}")));
        }
        Ok(Bounds { center, half_extent })
    }

    #[inline]
    pub fn normalize(&self, world: &Vector3<f64>) -> Vector3<f64> {
        (world - self.center) / self.half_extent
    }

    pub fn denormalize(&self, unit: &Vector3<f64>) -> Vector3<f64> {
        self.center + unit * self.half_extent
    }

    pub fn contains(&self, world: &Vector3<f64>) -> bool {
        self.normalize(world).amax() <= 1.0
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center.add_scalar(-self.half_extent)
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center.add_scalar(self.half_extent)
    }

    pub fn from_min_max(min: &Vector3<f64>, max: &Vector3<f64>) -> Result<Self> {
        let ext = (max - min) / 2.0;
        if (ext.x - ext.y).abs() > 1e-9 * ext.x.abs().max(1.0) || (ext.x - ext.z).abs() > 1e-9 * ext.x.abs().max(1.0) {
            return Err(Error::domain("bounds are not a cube"));
        }
        Bounds::new((min + max) / 2.0, ext.x)
    }
}

/// Contracted coordinate in `[-2, 2]` → continuous cell-centered grid index.
#[inline]
pub fn grid_coord(c: f64, s: usize) -> f64 {
    (c + 2.0) / 4.0 * s as f64 - 0.5
}

/// Contracted coordinate of grid node `k`.
#[inline]
pub fn node_coord(k: usize, s: usize) -> f64 {
    -2.0 + (k as f64 + 0.5) * 4.0 / s as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    /// Plane resolution S.
    pub resolution: usize,
    /// Feature channels D per plane.
    pub features: usize,
    pub hidden: usize,
    /// Trunk depth, counting the first layer.
    pub layers: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
}

impl FieldConfig {
    /// Full-scale architecture: 64² planes with 256 channels, an 8-layer
    /// width-128 trunk.
    pub fn full_scale() -> Self {
        FieldConfig {
            resolution: 64,
            features: 256,
            hidden: 128,
            layers: 8,
            pos_freqs: 10,
            dir_freqs: 4,
        }
    }

    pub fn desk_scale() -> Self {
        FieldConfig {
            resolution: 32,
            features: 32,
            hidden: 128,
            layers: 8,
            pos_freqs: 10,
            dir_freqs: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.features == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!("degenerate field configuration {self:?}")));
        }
        Ok(())
    }

    pub fn pos_dims(&self) -> usize {
        encoded_len(3, self.pos_freqs)
    }

    pub fn dir_dims(&self) -> usize {
        encoded_len(3, self.dir_freqs)
    }

    /// Length of the sampled tri-plane feature.
    pub fn feature_dims(&self) -> usize {
        3 * self.features
    }

    /// Trunk layer that receives the tri-plane feature again as a skip input
    /// (1-based), if the trunk is deep enough.
    pub fn skip_layer(&self) -> Option<usize> {
        (self.layers >= 3).then_some(3)
    }

    /// Trunk layer whose output feeds the color head (1-based).
    pub fn color_tap(&self) -> usize {
        self.layers.min(4)
    }

    pub fn plane_len(&self) -> usize {
        self.resolution * self.resolution * self.features
    }
}

/// Dense layer, `weight` row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn kaiming(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Linear {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn forward(&self, segments: &[&[f64]], out: &mut [f64]) {
        debug_assert_eq!(segments.iter().map(|s| s.len()).sum::<usize>(), self.inputs);
        let n = self.inputs;
        let mut o = 0;
        // four rows at a time share each input load
        while o + 4 <= self.outputs {
            let mut acc = [self.bias[o], self.bias[o + 1], self.bias[o + 2], self.bias[o + 3]];
            let rows = [
                &self.weight[o * n..(o + 1) * n],
                &self.weight[(o + 1) * n..(o + 2) * n],
                &self.weight[(o + 2) * n..(o + 3) * n],
                &self.weight[(o + 3) * n..(o + 4) * n],
            ];
            let mut off = 0;
            for seg in segments {
                let r = [
                    &rows[0][off..off + seg.len()],
                    &rows[1][off..off + seg.len()],
                    &rows[2][off..off + seg.len()],
                    &rows[3][off..off + seg.len()],
                ];
                for ((((&x, &a), &b), &c), &d) in seg.iter().zip(r[0]).zip(r[1]).zip(r[2]).zip(r[3]) {
                    acc[0] += a * x;
                    acc[1] += b * x;
                    acc[2] += c * x;
                    acc[3] += d * x;
                }
                off += seg.len();
            }
            out[o..o + 4].copy_from_slice(&acc);
            o += 4;
        }
        for (o, y) in out.iter_mut().enumerate().take(self.outputs).skip(o) {
            let row = &self.weight[o * n..(o + 1) * n];
            let mut acc = self.bias[o];
            let mut off = 0;
            for seg in segments {
                acc += dot(&row[off..off + seg.len()], seg);
                off += seg.len();
            }
            *y = acc;
        }
    }

    /// Accumulates parameter gradients into `grad` and input gradients into
    /// `dinputs` (segments given as `None` are skipped).
    #[inline]
    fn backward(&self, grad: &mut Linear, segments: &[&[f64]], dout: &[f64], dinputs: &mut [Option<&mut [f64]>]) {
        for (o, &g) in dout.iter().enumerate().take(self.outputs) {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let base = o * self.inputs;
            let mut off = 0;
            for (seg, dseg) in segments.iter().zip(dinputs.iter_mut()) {
                let n = seg.len();
                let gw = &mut grad.weight[base + off..base + off + n];
                if let Some(d) = dseg {
                    let w = &self.weight[base + off..base + off + n];
                    for ((gw, &x), (d, &w)) in gw.iter_mut().zip(seg.iter()).zip(d.iter_mut().zip(w)) {
                        *gw += g * x;
                        *d += g * w;
                    }
                } else {
                    for (gw, &x) in gw.iter_mut().zip(seg.iter()) {
                        *gw += g * x;
                    }
                }
                off += n;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decoder weights. Trunk layer 1 reads `γ(x) ‖ M_p`; the skip layer reads
/// `h ‖ M_p`; density and the geometric feature come off the last trunk
/// layer; the color head reads `γ(d) ‖ h_tap`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub trunk: Vec<Linear>,
    pub density: Linear,
    pub geometry: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
}

impl DecoderParams {
    fn shapes(cfg: &FieldConfig) -> Vec<(usize, usize)> {
        let h = cfg.hidden;
        let mut v = Vec::new();
        for l in 1..=cfg.layers {
            let inputs = if l == 1 {
                cfg.pos_dims() + cfg.feature_dims()
            } else if Some(l) == cfg.skip_layer() {
                h + cfg.feature_dims()
            } else {
                h
            };
            v.push((inputs, h));
        }
        v.push((h, 1));
        v.push((h, h));
        v.push((cfg.dir_dims() + h, h));
        v.push((h, 3));
        v
    }

    fn from_layers(mut layers: Vec<Linear>) -> Self {
        let color_out = layers.pop().unwrap();
        let color_hidden = layers.pop().unwrap();
        let geometry = layers.pop().unwrap();
        let density = layers.pop().unwrap();
        DecoderParams {
            trunk: layers,
            density,
            geometry,
            color_hidden,
            color_out,
        }
    }

    pub fn zeros(cfg: &FieldConfig) -> Self {
        Self::from_layers(Self::shapes(cfg).into_iter().map(|(i, o)| Linear::zeros(i, o)).collect())
    }

    pub fn random(cfg: &FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        Self::from_layers(
            Self::shapes(cfg)
                .into_iter()
                .map(|(i, o)| Linear::kaiming(i, o, rng))
                .collect(),
        )
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.trunk
            .iter()
            .chain([&self.density, &self.geometry, &self.color_hidden, &self.color_out])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk.iter_mut().chain([
            &mut self.density,
            &mut self.geometry,
            &mut self.color_hidden,
            &mut self.color_out,
        ])
    }
}

/// Bilinear taps of one point on the three planes: offsets of the 4 corner
/// feature vectors per plane, and their weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stencil {
    pub offsets: [[usize; 4]; 3],
    pub weights: [[f64; 4]; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeature {
    /// `[M_xy(i,j), M_yz(j,k), M_xz(i,k)]`, length `3D`.
    pub m_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriPlaneField {
    pub config: FieldConfig,
    /// `M_xy`, `M_yz`, `M_xz`, each `S × S × D` row-major.
    pub planes: [Vec<f64>; 3],
    pub decoder: DecoderParams,
    pub bounds: Bounds,
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeLayout {
    pub pos: usize,
    pub feat: usize,
    pub hidden: usize,
    pub color_hidden: usize,
    pub color: usize,
    pub density_pre: usize,
    pub geometry: usize,
    pub len: usize,
    width: usize,
}

impl TapeLayout {
    fn new(cfg: &FieldConfig) -> Self {
        let pos = 0;
        let feat = pos + cfg.pos_dims();
        let hidden = feat + cfg.feature_dims();
        let color_hidden = hidden + cfg.layers * cfg.hidden;
        let color = color_hidden + cfg.hidden;
        let density_pre = color + 3;
        let geometry = density_pre + 1;
        let len = geometry + cfg.hidden;
        TapeLayout {
            pos,
            feat,
            hidden,
            color_hidden,
            color,
            density_pre,
            geometry,
            len,
            width: cfg.hidden,
        }
    }

    /// Output of trunk layer `l` (1-based).
    #[inline]
    fn h(&self, l: usize) -> std::ops::Range<usize> {
        let s = self.hidden + (l - 1) * self.width;
        s..s + self.width
    }
}

/// Per-ray direction-dependent terms shared by every sample on the ray.
#[derive(Debug, Clone)]
pub struct DirectionTerms {
    pub encoded: Vec<f64>,
    /// `W_dir · γ(d) + b` of the color hidden layer.
    pub color_bias: Vec<f64>,
}

/// Scratch buffers reused across decoder backward calls.
#[derive(Debug, Clone, Default)]
pub struct BackwardScratch {
    dh: Vec<f64>,
    dprev: Vec<f64>,
    dfeat: Vec<f64>,
    dtap: Vec<f64>,
    dch: Vec<f64>,
}

impl TriPlaneField {
    /// Planes uniform in ±1e-2, Kaiming-uniform decoder weights, zero biases.
    pub fn new_random(config: FieldConfig, bounds: Bounds, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.plane_len();
        let planes = [0, 1, 2].map(|_| (0..n).map(|_| rng.gen_range(-1e-2..1e-2)).collect());
        let decoder = DecoderParams::random(&config, &mut rng);
        Ok(TriPlaneField {
            config,
            planes,
            decoder,
            bounds,
        })
    }

    pub fn zeros(config: FieldConfig, bounds: Bounds) -> Result<Self> {
        config.validate()?;
        let n = config.plane_len();
        Ok(TriPlaneField {
            config,
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            decoder: DecoderParams::zeros(&config),
            bounds,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    /// Parameter tensors in declaration order: the three planes, then each
    /// decoder layer's weight and bias (trunk, density, geometry, color
    /// hidden, color out).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.planes.iter().map(|p| p.as_slice()).collect();
        for l in self.decoder.layers() {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.planes.iter_mut().map(|p| p.as_mut_slice()).collect();
        for l in self.decoder.layers_mut() {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["plane_xy", "plane_yz", "plane_xz"].iter().map(|s| s.to_string()).collect();
        for i in 0..self.decoder.trunk.len() {
            v.push(format!("trunk{}.weight", i + 1));
            v.push(format!("trunk{}.bias", i + 1));
        }
        for name in ["density", "geometry", "color_hidden", "color_out"] {
            v.push(format!("{name}.weight"));
            v.push(format!("{name}.bias"));
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tape_layout(&self) -> TapeLayout {
        TapeLayout::new(&self.config)
    }

    /// World point → contracted `[-2, 2]³` coordinates.
    #[inline]
    pub fn contracted(&self, world: &Vector3<f64>) -> Vector3<f64> {
        contract(&self.bounds.normalize(world))
    }

    /// Bilinear taps on the three planes for a contracted point.
    #[inline]
    pub fn stencil(&self, c: &Vector3<f64>) -> Stencil {
        let s = self.config.resolution;
        let d = self.config.features;
        let ax = |v: f64| bilinear_axis(grid_coord(v, s), s);
        let (x0, x1, fx) = ax(c.x);
        let (y0, y1, fy) = ax(c.y);
        let (z0, z1, fz) = ax(c.z);
        let taps = |a0: usize, a1: usize, fa: f64, b0: usize, b1: usize, fb: f64| {
            (
                [(a0 * s + b0) * d, (a1 * s + b0) * d, (a0 * s + b1) * d, (a1 * s + b1) * d],
                [(1.0 - fa) * (1.0 - fb), fa * (1.0 - fb), (1.0 - fa) * fb, fa * fb],
            )
        };
        let (o0, w0) = taps(x0, x1, fx, y0, y1, fy);
        let (o1, w1) = taps(y0, y1, fy, z0, z1, fz);
        let (o2, w2) = taps(x0, x1, fx, z0, z1, fz);
        Stencil {
            offsets: [o0, o1, o2],
            weights: [w0, w1, w2],
        }
    }

    #[inline]
    fn gather(&self, st: &Stencil, out: &mut [f64]) {
        let d = self.config.features;
        for p in 0..3 {
            let dst = &mut out[p * d..(p + 1) * d];
            dst.iter_mut().for_each(|x| *x = 0.0);
            for k in 0..4 {
                let w = st.weights[p][k];
                if w == 0.0 {
                    continue;
                }
                let src = &self.planes[p][st.offsets[p][k]..st.offsets[p][k] + d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    /// Tri-plane feature at a world point.
    pub fn sample_triplane(&self, world: &Vector3<f64>) -> SampledFeature {
        let c = self.contracted(world);
        let st = self.stencil(&c);
        let mut m_p = vec![0.0; self.config.feature_dims()];
        self.gather(&st, &mut m_p);
        SampledFeature { m_p }
    }

    pub fn direction_terms(&self, dir: &Vector3<f64>) -> DirectionTerms {
        let encoded = positional_encoding(dir.as_slice(), self.config.dir_freqs);
        let ch = &self.decoder.color_hidden;
        let q = encoded.len();
        let color_bias = (0..ch.outputs)
            .map(|o| ch.bias[o] + dot(&ch.weight[o * ch.inputs..o * ch.inputs + q], &encoded))
            .collect();
        DirectionTerms { encoded, color_bias }
    }

    /// Decoder forward from an already filled tape prefix (`γ(x)` and `M_p`).
    /// Returns `(σ, color)`; fills hidden activations, and the geometric
    /// feature when `with_geometry`.
    #[inline]
    fn decode_tape(&self, dir: &DirectionTerms, tape: &mut [f64], with_geometry: bool) -> (f64, [f64; 3]) {
        let lay = TapeLayout::new(&self.config);
        let dec = &self.decoder;
        let skip = self.config.skip_layer();
        for l in 1..=self.config.layers {
            let (head, rest) = tape.split_at_mut(lay.h(l).start);
            let out = &mut rest[..lay.width];
            let layer = &dec.trunk[l - 1];
            if l == 1 {
                layer.forward(&[&head[lay.pos..lay.hidden]], out);
            } else {
                let prev = &head[lay.h(l - 1)];
                if Some(l) == skip {
                    layer.forward(&[prev, &head[lay.feat..lay.hidden]], out);
                } else {
                    layer.forward(&[prev], out);
                }
            }
            out.iter_mut().for_each(|x| *x = leaky(*x));
        }
        let last = lay.h(self.config.layers);
        let mut z = [0.0];
        dec.density.forward(&[&tape[last.clone()]], &mut z);
        tape[lay.density_pre] = z[0];
        let sigma = softplus(z[0]);
        if with_geometry {
            let (head, rest) = tape.split_at_mut(lay.geometry);
            dec.geometry.forward(&[&head[last]], &mut rest[..lay.width]);
        }
        // color hidden: direction part precomputed in `dir.color_bias`
        let tap = lay.h(self.config.color_tap());
        let ch = &dec.color_hidden;
        let q = dir.encoded.len();
        {
            let (head, rest) = tape.split_at_mut(lay.color_hidden);
            let htap = &head[tap];
            for o in 0..ch.outputs {
                let row = &ch.weight[o * ch.inputs + q..(o + 1) * ch.inputs];
                rest[o] = leaky(dir.color_bias[o] + dot(row, htap));
            }
        }
        let mut zc = [0.0; 3];
        dec.color_out.forward(&[&tape[lay.color_hidden..lay.color_hidden + lay.width]], &mut zc);
        let color = zc.map(sigmoid);
        tape[lay.color..lay.color + 3].copy_from_slice(&color);
        (sigma, color)
    }

    /// Full per-sample forward at a world point. `tape` must hold
    /// `tape_layout().len` values.
    #[inline]
    pub fn forward_sample(
        &self,
        world: &Vector3<f64>,
        dir: &DirectionTerms,
        tape: &mut [f64],
        with_geometry: bool,
    ) -> (f64, [f64; 3], Stencil) {
        let lay = TapeLayout::new(&self.config);
        let c = self.contracted(world);
        let st = self.stencil(&c);
        encode_into(c.as_slice(), self.config.pos_freqs, &mut tape[lay.pos..lay.feat]);
        self.gather(&st, &mut tape[lay.feat..lay.hidden]);
        let (sigma, color) = self.decode_tape(dir, tape, with_geometry);
        (sigma, color, st)
    }

    /// Geometric feature written by the last `forward_sample` with geometry.
    #[inline]
    pub fn tape_geometry<'a>(&self, tape: &'a [f64]) -> &'a [f64] {
        let lay = TapeLayout::new(&self.config);
        &tape[lay.geometry..lay.geometry + lay.width]
    }

    /// Reverse pass of one sample. Accumulates into `grads` (same shape as
    /// `self`). `dgeometry` may be empty when the geometric feature does not
    /// reach the loss.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_sample(
        &self,
        tape: &[f64],
        stencil: &Stencil,
        dir: &DirectionTerms,
        dsigma: f64,
        dcolor: [f64; 3],
        dgeometry: &[f64],
        grads: &mut TriPlaneField,
        scratch: &mut BackwardScratch,
    ) {
        let cfg = &self.config;
        let lay = TapeLayout::new(cfg);
        let dec = &self.decoder;
        let gdec = &mut grads.decoder;
        let w = lay.width;
        let fd = cfg.feature_dims();
        scratch.dh.clear();
        scratch.dh.resize(w, 0.0);
        scratch.dfeat.clear();
        scratch.dfeat.resize(fd, 0.0);
        scratch.dtap.clear();
        scratch.dtap.resize(w, 0.0);
        scratch.dch.clear();
        scratch.dch.resize(w, 0.0);

        // color head
        let color = &tape[lay.color..lay.color + 3];
        let dzc: [f64; 3] = [0, 1, 2].map(|k| dcolor[k] * color[k] * (1.0 - color[k]));
        let chid = &tape[lay.color_hidden..lay.color_hidden + w];
        if dzc.iter().any(|&g| g != 0.0) {
            dec.color_out
                .backward(&mut gdec.color_out, &[chid], &dzc, &mut [Some(&mut scratch.dch[..])]);
            for (d, &h) in scratch.dch.iter_mut().zip(chid) {
                if h <= 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
            let tap = lay.h(cfg.color_tap());
            dec.color_hidden.backward(
                &mut gdec.color_hidden,
                &[&dir.encoded, &tape[tap]],
                &scratch.dch,
                &mut [None, Some(&mut scratch.dtap[..])],
            );
        }

        // heads on the last trunk layer
        let last = cfg.layers;
        let hl = &tape[lay.h(last)];
        let dz = dsigma * sigmoid(tape[lay.density_pre]);
        if dz != 0.0 {
            dec.density
                .backward(&mut gdec.density, &[hl], &[dz], &mut [Some(&mut scratch.dh[..])]);
        }
        if !dgeometry.is_empty() {
            dec.geometry
                .backward(&mut gdec.geometry, &[hl], dgeometry, &mut [Some(&mut scratch.dh[..])]);
        }

        // trunk, top down
        let skip = cfg.skip_layer();
        let tap = cfg.color_tap();
        for l in (1..=last).rev() {
            if l == tap {
                for (d, t) in scratch.dh.iter_mut().zip(&scratch.dtap) {
                    *d += t;
                }
            }
            let h = &tape[lay.h(l)];
            for (d, &x) in scratch.dh.iter_mut().zip(h) {
                if x <= 0.0 {
                    *d *= LEAKY_SLOPE;
                }
            }
            let layer = &dec.trunk[l - 1];
            let glayer = &mut gdec.trunk[l - 1];
            scratch.dprev.clear();
            scratch.dprev.resize(w, 0.0);
            if l == 1 {
                layer.backward(
                    glayer,
                    &[&tape[lay.pos..lay.feat], &tape[lay.feat..lay.hidden]],
                    &scratch.dh,
                    &mut [None, Some(&mut scratch.dfeat[..])],
                );
            } else if Some(l) == skip {
                layer.backward(
                    glayer,
                    &[&tape[lay.h(l - 1)], &tape[lay.feat..lay.hidden]],
                    &scratch.dh,
                    &mut [Some(&mut scratch.dprev[..]), Some(&mut scratch.dfeat[..])],
                );
            } else {
                layer.backward(glayer, &[&tape[lay.h(l - 1)]], &scratch.dh, &mut [Some(&mut scratch.dprev[..])]);
            }
            std::mem::swap(&mut scratch.dh, &mut scratch.dprev);
        }

        // scatter into the planes
        let d = cfg.features;
        for p in 0..3 {
            let g = &scratch.dfeat[p * d..(p + 1) * d];
            for k in 0..4 {
                let wgt = stencil.weights[p][k];
                if wgt == 0.0 {
                    continue;
                }
                let o = stencil.offsets[p][k];
                for (dst, &gv) in grads.planes[p][o..o + d].iter_mut().zip(g) {
                    *dst += wgt * gv;
                }
            }
        }
    }
}

/// Decoder outputs at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub sigma: f64,
    pub geometry: Vec<f64>,
    pub color: [f64; 3],
}

/// Standalone decoder evaluation: `(σ, g) = f_g(γ(x), M_p)`,
/// `c = f_c(γ(d), h_tap)`.
pub fn decode(field: &TriPlaneField, m_p: &SampledFeature, x: &Vector3<f64>, d: &Vector3<f64>) -> Result<Decoded> {
    let cfg = &field.config;
    if m_p.m_p.len() != cfg.feature_dims() {
        return Err(Error::Config(format!(
            "sampled feature has length {}, decoder expects {}",
            m_p.m_p.len(),
            cfg.feature_dims()
        )));
    }
    let lay = field.tape_layout();
    let mut tape = vec![0.0; lay.len];
    encode_into(x.as_slice(), cfg.pos_freqs, &mut tape[lay.pos..lay.feat]);
    tape[lay.feat..lay.hidden].copy_from_slice(&m_p.m_p);
    let dir = field.direction_terms(d);
    let (sigma, color) = field.decode_tape(&dir, &mut tape, true);
    Ok(Decoded {
        sigma,
        geometry: field.tape_geometry(&tape).to_vec(),
        color,
    })
}

/// `S × S × S × D` features over the contracted cube, cell-centered, index
/// `((i·S + j)·S + k)·D` for `(x, y, z) = (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub resolution: usize,
    pub features: usize,
    pub bounds: Bounds,
    pub grid: Vec<f64>,
}

impl FeatureVolume {
    #[inline]
    pub fn voxel(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let s = self.resolution;
        let o = ((i * s + j) * s + k) * self.features;
        &self.grid[o..o + self.features]
    }
}

/// Lifts per-view feature maps into a voxel grid: each voxel center (mapped
/// back to world space through the inverse contraction) takes the mean of
/// the bilinearly sampled features of every view that sees it in front of
/// the camera and inside the image. Unseen voxels stay zero.
pub fn backproject_features(
    keyframes: &[Keyframe],
    feature_maps: &[FeatureMap],
    camera: &Intrinsics,
    resolution: usize,
    bounds: &Bounds,
) -> Result<FeatureVolume> {
    if keyframes.is_empty() {
        return Err(Error::domain("feature back-projection needs at least one keyframe"));
    }
    if keyframes.len() != feature_maps.len() {
        return Err(Error::domain("one feature map per keyframe is required"));
    }
    let d = feature_maps[0].channels;
    let mut scales = Vec::with_capacity(feature_maps.len());
    for fm in feature_maps {
        if fm.channels != d {
            return Err(Error::domain("feature maps disagree on channel count"));
        }
        if fm.width == 0 || camera.width % fm.width != 0 || camera.height % fm.height != 0 || camera.width / fm.width != camera.height / fm.height {
            return Err(Error::domain("feature maps must be a uniform integer downscale of the image"));
        }
        scales.push((camera.width / fm.width) as f64);
    }
    let s = resolution;
    let mut grid = vec![0.0; s * s * s * d];
    let mut tmp = vec![0.0; d];
    for i in 0..s {
        for j in 0..s {
            for k in 0..s {
                let c = Vector3::new(node_coord(i, s), node_coord(j, s), node_coord(k, s));
                let world = bounds.denormalize(&uncontract(&c));
                let o = ((i * s + j) * s + k) * d;
                let mut count = 0usize;
                for ((kf, fm), &f) in keyframes.iter().zip(feature_maps).zip(&scales) {
                    let Ok((px, _)) = project_point(camera, &kf.pose, &world) else {
                        continue;
                    };
                    if px.x < 0.0 || px.y < 0.0 || px.x > (camera.width - 1) as f64 || px.y > (camera.height - 1) as f64 {
                        continue;
                    }
                    let shift = (f - 1.0) / 2.0;
                    fm.sample_bilinear((px.x - shift) / f, (px.y - shift) / f, &mut tmp);
                    for (g, t) in grid[o..o + d].iter_mut().zip(&tmp) {
                        *g += t;
                    }
                    count += 1;
                }
                if count > 1 {
                    let inv = 1.0 / count as f64;
                    grid[o..o + d].iter_mut().for_each(|g| *g *= inv);
                }
            }
        }
    }
    Ok(FeatureVolume {
        resolution: s,
        features: d,
        bounds: *bounds,
        grid,
    })
}

/// Per-slice weight network of one plane: `[V(slice), mean(V)] → hidden →
/// logit`, LeakyReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMlp {
    pub hidden: Linear,
    pub out: Linear,
}

pub const AXIS_MLP_HIDDEN: usize = 32;

impl AxisMlp {
    pub fn random(features: usize, rng: &mut ChaCha8Rng) -> Self {
        AxisMlp {
            hidden: Linear::kaiming(2 * features, AXIS_MLP_HIDDEN, rng),
            out: Linear::kaiming(AXIS_MLP_HIDDEN, 1, rng),
        }
    }

    pub fn zeros(features: usize) -> Self {
        AxisMlp {
            hidden: Linear::zeros(2 * features, AXIS_MLP_HIDDEN),
            out: Linear::zeros(AXIS_MLP_HIDDEN, 1),
        }
    }

    pub fn logit(&self, slice: &[f64], pooled: &[f64]) -> f64 {
        let mut h = vec![0.0; self.hidden.outputs];
        self.hidden.forward(&[slice, pooled], &mut h);
        h.iter_mut().for_each(|x| *x = leaky(*x));
        let mut z = [0.0];
        self.out.forward(&[&h], &mut z);
        z[0]
    }
}

/// Softmax over a slice of logits, numerically stabilized.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Result of collapsing a feature volume onto its three planes, with the
/// softmax weights used at every plane location (`S` weights each).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub planes: [Vec<f64>; 3],
    pub weights: [Vec<f64>; 3],
}

/// Weighted pooling along each axis: xy pools z, yz pools x, xz pools y.
pub fn aggregate_volume(volume: &FeatureVolume, mlps: &[AxisMlp; 3]) -> Aggregated {
    let s = volume.resolution;
    let d = volume.features;
    let mut planes = [vec![0.0; s * s * d], vec![0.0; s * s * d], vec![0.0; s * s * d]];
    let mut weights = [vec![0.0; s * s * s], vec![0.0; s * s * s], vec![0.0; s * s * s]];
    // voxel index for plane p at plane location (a, b), position t along the pooled axis
    let voxel = |p: usize, a: usize, b: usize, t: usize| -> (usize, usize, usize) {
        match p {
            0 => (a, b, t),
            1 => (t, a, b),
            _ => (a, t, b),
        }
    };
    let mut pooled = vec![0.0; d];
    for p in 0..3 {
        for a in 0..s {
            for b in 0..s {
                pooled.iter_mut().for_each(|x| *x = 0.0);
                for t in 0..s {
                    let (i, j, k) = voxel(p, a, b, t);
                    for (acc, v) in pooled.iter_mut().zip(volume.voxel(i, j, k)) {
                        *acc += v / s as f64;
                    }
                }
                let logits: Vec<f64> = (0..s)
                    .map(|t| {
                        let (i, j, k) = voxel(p, a, b, t);
                        mlps[p].logit(volume.voxel(i, j, k), &pooled)
                    })
                    .collect();
                let w = softmax(&logits);
                let o = (a * s + b) * d;
                for (t, &wt) in w.iter().enumerate() {
                    let (i, j, k) = voxel(p, a, b, t);
                    for (dst, v) in planes[p][o..o + d].iter_mut().zip(volume.voxel(i, j, k)) {
                        *dst += wt * v;
                    }
                }
                weights[p][(a * s + b) * s..(a * s + b + 1) * s].copy_from_slice(&w);
            }
        }
    }
    Aggregated { planes, weights }
}

/// Cheap per-pixel image features: RGB followed by sinusoidal encodings of
/// the normalized pixel position, truncated or zero-padded to `channels`.
pub fn handcrafted_features(kf: &Keyframe, channels: usize) -> FeatureMap {
    let (w, h) = (kf.width(), kf.height());
    let mut fm = FeatureMap::zeros(w, h, channels);
    for y in 0..h {
        for x in 0..w {
            let c = kf.image.get(x, y);
            let u = x as f64 / w as f64 * 2.0 - 1.0;
            let v = y as f64 / h as f64 * 2.0 - 1.0;
            let mut vals = vec![c[0], c[1], c[2]];
            let mut freq = std::f64::consts::PI;
            while vals.len() < channels {
                vals.extend_from_slice(&[(freq * u).sin(), (freq * u).cos(), (freq * v).sin(), (freq * v).cos()]);
                freq *= 2.0;
            }
            let px = fm.pixel_mut(x, y);
            px.copy_from_slice(&vals[..channels]);
        }
    }
    fm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use crate::grid::Grid;
    use proptest::{prop_assert, proptest};

    fn small() -> FieldConfig {
        FieldConfig {
            resolution: 4,
            features: 4,
            hidden: 8,
            layers: 8,
            pos_freqs: 3,
            dir_freqs: 2,
        }
    }

    fn unit_bounds() -> Bounds {
        Bounds::new(Vector3::zeros(), 1.0).unwrap()
    }

    #[test]
    fn contract_examples() {
        let p = Vector3::new(0.5, -0.3, 0.9);
        assert_eq!(contract(&p), p);
        assert!((contract(&Vector3::new(4.0, 0.0, 0.0)) - Vector3::new(1.75, 0.0, 0.0)).norm() < 1e-15);
        let c = contract(&Vector3::new(3.0, -3.0, 3.0));
        let e = 5.0 / 3.0;
        assert!((c - Vector3::new(e, -e, e)).amax() < 1e-15);
    }

    #[test]
    fn contract_continuous_at_unit_boundary() {
        for dir in [Vector3::new(1.0, 0.2, -0.5), Vector3::new(-0.3, 1.0, 0.9), Vector3::new(0.1, 0.1, -1.0)] {
            let inside = contract(&(dir * (1.0 - 1e-9)));
            let outside = contract(&(dir * (1.0 + 1e-9)));
            assert!((inside - outside).amax() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn contract_bounded_and_invertible(x in proptest::array::uniform3(-1e6f64..1e6)) {
            let v = Vector3::from(x);
            let c = contract(&v);
            prop_assert!(c.amax() < 2.0);
            let back = uncontract(&c);
            prop_assert!((back - v).amax() <= 1e-6 * v.amax().max(1.0));
        }
    }

    #[test]
    fn encoding_examples() {
        let v = [0.3, -0.7];
        assert_eq!(positional_encoding(&v, 0), v.to_vec());
        let z = positional_encoding(&[0.0, 0.0, 0.0], 3);
        assert_eq!(z.len(), 21);
        for l in 0..3 {
            for k in 0..3 {
                assert_eq!(z[3 + 6 * l + k], 0.0);
                assert_eq!(z[3 + 6 * l + 3 + k], 1.0);
            }
        }
        let e = positional_encoding(&[0.5], 1);
        assert_eq!(e[0], 0.5);
        assert!((e[1] - 1.0).abs() < 1e-15);
        assert!(e[2].abs() < 1e-15);
    }

    #[test]
    fn constant_planes_give_constant_feature() {
        let mut f = TriPlaneField::zeros(small(), unit_bounds()).unwrap();
        for p in 0..3 {
            f.planes[p].iter_mut().enumerate().for_each(|(i, x)| *x = (p * 4 + i % 4) as f64);
        }
        let a = f.sample_triplane(&Vector3::new(0.1, -0.3, 0.7)).m_p;
        let b = f.sample_triplane(&Vector3::new(5.0, 2.0, -9.0)).m_p;
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert!((x - i as f64).abs() < 1e-12 && (y - i as f64).abs() < 1e-12);
        }
    }

    fn random_planes(cfg: FieldConfig, seed: u64) -> TriPlaneField {
        let mut f = TriPlaneField::new_random(cfg, unit_bounds(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for p in 0..3 {
            f.planes[p].iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        f
    }

    #[test]
    fn node_queries_reproduce_stored_values() {
        let cfg = small();
        let f = random_planes(cfg, 3);
        let s = cfg.resolution;
        let d = cfg.features;
        for (i, j, k) in [(0, 0, 0), (1, 2, 3), (3, 3, 1), (2, 0, 2)] {
            // node coordinates lie inside the unit cube only for inner nodes;
            // map through the inverse contraction to stay exact
            let c = Vector3::new(node_coord(i, s), node_coord(j, s), node_coord(k, s));
            let world = uncontract(&c);
            let m = f.sample_triplane(&world).m_p;
            let expect = |p: usize, a: usize, b: usize| f.planes[p][(a * s + b) * d..(a * s + b + 1) * d].to_vec();
            let want = [expect(0, i, j), expect(1, j, k), expect(2, i, k)].concat();
            for (x, y) in m.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_query_is_mean_of_four_nodes() {
        let cfg = small();
        let f = random_planes(cfg, 4);
        let s = cfg.resolution;
        let d = cfg.features;
        // xy-plane midpoint between nodes (1,1),(2,1),(1,2),(2,2); z on node 1
        let mid = (node_coord(1, s) + node_coord(2, s)) / 2.0;
        let c = Vector3::new(mid, mid, node_coord(1, s));
        let m = f.sample_triplane(&uncontract(&c)).m_p;
        let at = |a: usize, b: usize, ch: usize| f.planes[0][(a * s + b) * d + ch];
        for ch in 0..d {
            let want = (at(1, 1, ch) + at(2, 1, ch) + at(1, 2, ch) + at(2, 2, ch)) / 4.0;
            assert!((m[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_linear_along_grid_segment() {
        let cfg = small();
        let f = random_planes(cfg, 5);
        let s = cfg.resolution;
        let (a, b) = (node_coord(1, s), node_coord(2, s));
        let y = node_coord(2, s);
        let z = node_coord(1, s);
        let at = |t: f64| f.sample_triplane(&Vector3::new(a + t * (b - a), y, z)).m_p;
        let (p0, p1, pt) = (at(0.0), at(1.0), at(0.3));
        for i in 0..p0.len() {
            assert!((pt[i] - (0.7 * p0[i] + 0.3 * p1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decoder_outputs() {
        let f = TriPlaneField::zeros(small(), unit_bounds()).unwrap();
        let m = SampledFeature { m_p: vec![0.3; 12] };
        let out = decode(&f, &m, &Vector3::new(0.1, 0.2, 0.3), &Vector3::z()).unwrap();
        assert!((out.sigma - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.color, [0.5; 3]);
    }

    #[test]
    fn decode_rejects_wrong_feature_length() {
        let f = TriPlaneField::zeros(small(), unit_bounds()).unwrap();
        let m = SampledFeature { m_p: vec![0.0; 5] };
        assert!(decode(&f, &m, &Vector3::zeros(), &Vector3::z()).is_err());
    }

    #[test]
    fn direction_ignored_when_direction_weights_zero() {
        let mut f = TriPlaneField::new_random(small(), unit_bounds(), 9).unwrap();
        let q = f.config.dir_dims();
        let ch = &mut f.decoder.color_hidden;
        for o in 0..ch.outputs {
            ch.weight[o * ch.inputs..o * ch.inputs + q].iter_mut().for_each(|w| *w = 0.0);
        }
        let m = f.sample_triplane(&Vector3::new(0.2, 0.1, -0.4));
        let x = Vector3::new(0.2, 0.1, -0.4);
        let a = decode(&f, &m, &x, &Vector3::z()).unwrap();
        let b = decode(&f, &m, &x, &Vector3::new(1.0, 1.0, 0.0).normalize()).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.sigma, b.sigma);
    }

    #[test]
    fn tensors_cover_all_parameters() {
        let f = TriPlaneField::new_random(small(), unit_bounds(), 1).unwrap();
        assert_eq!(f.tensors().len(), f.tensor_names().len());
        assert_eq!(f.tensors().len(), 3 + 2 * (8 + 4));
    }

    /// Gradient of a random linear functional of (σ, g, color) and of the
    /// plane/decoder parameters, checked by central differences.
    #[test]
    fn decoder_gradients_match_finite_differences() {
        let cfg = small();
        let mut f = random_planes(cfg, 11);
        let dir = Vector3::new(0.3, -0.2, 1.0).normalize();
        let points = [Vector3::new(0.3, -0.1, 0.5), Vector3::new(1.7, 0.4, -2.2)];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ws: f64 = rng.gen_range(-1.0..1.0);
        let wc: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let wg: Vec<f64> = (0..cfg.hidden).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lay = f.tape_layout();
        let objective = |f: &TriPlaneField| -> f64 {
            let dt = f.direction_terms(&dir);
            let mut tape = vec![0.0; lay.len];
            let mut total = 0.0;
            for p in &points {
                let (s, c, _) = f.forward_sample(p, &dt, &mut tape, true);
                total += ws * s + (0..3).map(|k| wc[k] * c[k]).sum::<f64>() + dot(&wg, f.tape_geometry(&tape));
            }
            total
        };
        let mut grads = f.zeros_like();
        let dt = f.direction_terms(&dir);
        let mut tape = vec![0.0; lay.len];
        let mut scratch = BackwardScratch::default();
        for p in &points {
            let (_, _, st) = f.forward_sample(p, &dt, &mut tape, true);
            f.backward_sample(&tape, &st, &dt, ws, wc, &wg, &mut grads, &mut scratch);
        }
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-5;
        let mut idx = 0;
        let n_tensors = f.tensors().len();
        for t in 0..n_tensors {
            let len = f.tensors()[t].len();
            for i in 0..len {
                let orig = f.tensors()[t][i];
                f.tensors_mut()[t][i] = orig + h;
                let up = objective(&f);
                f.tensors_mut()[t][i] = orig - h;
                let dn = objective(&f);
                f.tensors_mut()[t][i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = analytic[idx];
                let scale = a.abs().max(fd.abs()).max(1e-5);
                assert!((a - fd).abs() / scale < 1e-4, "tensor {t} index {i}: analytic {a}, fd {fd}");
                idx += 1;
            }
        }
    }

    #[test]
    fn backprojection_single_constant_view() {
        let cam = Intrinsics::centered(20.0, 16, 16).unwrap();
        let pose = Pose::identity();
        let kf = Keyframe::new(
            Grid::filled(16, 16, [0.5; 3]),
            Grid::filled(16, 16, 1.0),
            pose,
            Grid::filled(16, 16, true),
        )
        .unwrap();
        let mut fm = FeatureMap::zeros(8, 8, 3);
        fm.data.iter_mut().for_each(|x| *x = 0.25);
        let bounds = Bounds::new(Vector3::new(0.0, 0.0, 2.0), 2.0).unwrap();
        let vol = backproject_features(&[kf.clone()], &[fm.clone()], &cam, 6, &bounds).unwrap();
        let mut seen = 0;
        let mut unseen = 0;
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    let v = vol.voxel(i, j, k);
                    let c = Vector3::new(node_coord(i, 6), node_coord(j, 6), node_coord(k, 6));
                    let world = bounds.denormalize(&uncontract(&c));
                    let visible = project_point(&cam, &pose, &world)
                        .map(|(p, _)| p.x >= 0.0 && p.y >= 0.0 && p.x <= 15.0 && p.y <= 15.0)
                        .unwrap_or(false);
                    if visible {
                        assert!(v.iter().all(|&x| (x - 0.25).abs() < 1e-15));
                        seen += 1;
                    } else {
                        assert!(v.iter().all(|&x| x == 0.0));
                        unseen += 1;
                    }
                }
            }
        }
        assert!(seen > 0 && unseen > 0);
        let twice = backproject_features(&[kf.clone(), kf], &[fm.clone(), fm], &cam, 6, &bounds).unwrap();
        assert_eq!(twice, vol);
        assert!(backproject_features(&[], &[], &cam, 6, &bounds).is_err());
    }

    fn volume_from(s: usize, d: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> FeatureVolume {
        let mut grid = vec![0.0; s * s * s * d];
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    for c in 0..d {
                        grid[((i * s + j) * s + k) * d + c] = f(i, j, k, c);
                    }
                }
            }
        }
        FeatureVolume {
            resolution: s,
            features: d,
            bounds: unit_bounds(),
            grid,
        }
    }

    #[test]
    fn uniform_logits_reduce_to_average_pooling() {
        let vol = volume_from(3, 2, |i, j, k, c| (i * 7 + j * 3 + k + c) as f64 * 0.1);
        let mlps = [AxisMlp::zeros(2), AxisMlp::zeros(2), AxisMlp::zeros(2)];
        let agg = aggregate_volume(&vol, &mlps);
        for i in 0..3 {
            for j in 0..3 {
                for c in 0..2 {
                    let mean: f64 = (0..3).map(|k| vol.voxel(i, j, k)[c]).sum::<f64>() / 3.0;
                    assert!((agg.planes[0][(i * 3 + j) * 2 + c] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_along_axis_gives_that_slice() {
        let vol = volume_from(3, 2, |i, j, _k, c| (i + 2 * j + c) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlps = [AxisMlp::random(2, &mut rng), AxisMlp::random(2, &mut rng), AxisMlp::random(2, &mut rng)];
        let agg = aggregate_volume(&vol, &mlps);
        for i in 0..3 {
            for j in 0..3 {
                for c in 0..2 {
                    assert!((agg.planes[0][(i * 3 + j) * 2 + c] - vol.voxel(i, j, 0)[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hand_logits_weight_slices() {
        // logit = leaky(V_0): slice 0 carries ln 3 in channel 0, slice 1 carries 0
        let s = 2;
        let vol = volume_from(s, 2, |_, _, k, c| if c == 0 { if k == 0 { 3f64.ln() } else { 0.0 } } else { (k + 1) as f64 });
        let mut mlp = AxisMlp::zeros(2);
        mlp.hidden.weight[0] = 1.0;
        mlp.out.weight[0] = 1.0;
        let mlps = [mlp.clone(), AxisMlp::zeros(2), AxisMlp::zeros(2)];
        let agg = aggregate_volume(&vol, &mlps);
        for a in 0..s {
            for b in 0..s {
                let w = &agg.weights[0][(a * s + b) * s..(a * s + b + 1) * s];
                assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
                let o = (a * s + b) * 2;
                assert!((agg.planes[0][o + 1] - (0.75 * 1.0 + 0.25 * 2.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vol = volume_from(4, 3, |i, j, k, c| ((i * 13 + j * 7 + k * 3 + c) as f64).sin());
        let mlps = [AxisMlp::random(3, &mut rng), AxisMlp::random(3, &mut rng), AxisMlp::random(3, &mut rng)];
        let agg = aggregate_volume(&vol, &mlps);
        for p in 0..3 {
            for loc in agg.weights[p].chunks(4) {
                assert!((loc.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
