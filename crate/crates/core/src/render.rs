//! Stratified ray sampling and the emission-absorption quadrature, with the
//! reverse pass used during training and whole-view rendering over one or
//! more field blocks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{pixel_direction, Intrinsics, Pose, Ray};
use crate::field::{BackwardScratch, DirectionTerms, Stencil, TriPlaneField};
use crate::grid::{ColorImage, DepthMap, FeatureMap, Grid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    /// `t[k+1] − t[k]`; the last spacing runs to `t_far`.
    pub delta: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

/// Fills `t` and `delta` with one sample per equal bin of `[t_near, t_far]`:
/// a uniform draw when `rng` is given, the bin midpoint otherwise.
pub fn fill_stratified(ray: &Ray, n: usize, mut rng: Option<&mut ChaCha8Rng>, t: &mut Vec<f64>, delta: &mut Vec<f64>) {
    t.clear();
    delta.clear();
    let width = (ray.t_far - ray.t_near) / n as f64;
    for i in 0..n {
        let u = match rng.as_deref_mut() {
            Some(r) => r.gen::<f64>(),
            None => 0.5,
        };
        t.push(ray.t_near + (i as f64 + u) * width);
    }
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { ray.t_far };
        delta.push(next - t[i]);
    }
}

pub fn stratified_samples(ray: &Ray, n: usize, seed: Option<u64>) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::domain("at least one sample per ray is required"));
    }
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let (mut t, mut delta) = (Vec::new(), Vec::new());
    fill_stratified(ray, n, rng.as_mut(), &mut t, &mut delta);
    let positions = t.iter().map(|&ti| ray.at(ti)).collect();
    Ok(RaySamples { t, delta, positions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureResult {
    pub color: [f64; 3],
    /// Expected distance along the ray.
    pub depth: f64,
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    pub accumulated_alpha: f64,
}

/// `w_i = T_i (1 − e^{−σ_i δ_i})` with `T_i = e^{−Σ_{j<i} σ_j δ_j}`.
pub fn quadrature_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut tau: f64 = 0.0;
    sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let trans = (-tau).exp();
            tau += s * d;
            trans * -(-s * d).exp_m1()
        })
        .collect()
}

/// Weighted sums of per-sample colors, distances and features.
pub fn composite(sigma: &[f64], delta: &[f64], t: &[f64], colors: &[[f64; 3]], features: &[Vec<f64>]) -> QuadratureResult {
    let weights = quadrature_weights(sigma, delta);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let g = features.first().map_or(0, |f| f.len());
    let mut feature = vec![0.0; g];
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..3 {
            color[k] += w * colors[i][k];
        }
        depth += w * t[i];
        if let Some(f) = features.get(i) {
            for (a, b) in feature.iter_mut().zip(f) {
                *a += w * b;
            }
        }
    }
    let accumulated_alpha = weights.iter().sum();
    QuadratureResult {
        color,
        depth,
        feature,
        weights,
        accumulated_alpha,
    }
}

/// Evaluates the field at every sample and composites; the color excludes
/// any background.
pub fn render_ray(field: &TriPlaneField, ray: &Ray, samples: &RaySamples) -> Result<QuadratureResult> {
    let dir = field.direction_terms(&ray.direction);
    let mut tape = vec![0.0; field.tape_layout().len];
    let n = samples.t.len();
    let mut sigma = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for p in &samples.positions {
        let (s, c, _) = field.forward_sample(p, &dir, &mut tape, true);
        if !s.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite density on ray from {:?} along {:?}",
                ray.origin.as_slice(),
                ray.direction.as_slice()
            )));
        }
        sigma.push(s);
        colors.push(c);
        feats.push(field.tape_geometry(&tape).to_vec());
    }
    Ok(composite(&sigma, &samples.delta, &samples.t, &colors, &feats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Stop marching once transmittance falls below this; 0 disables.
    pub early_stop: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 64,
            near: 0.05,
            far: 20.0,
            background: [0.0; 3],
            early_stop: 0.0,
        }
    }
}

/// One ray's forward state kept for the reverse pass.
#[derive(Debug, Clone, Default)]
pub struct TracedRay {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    stencils: Vec<Stencil>,
    tape: Vec<f64>,
    dir: Option<DirectionTerms>,
    /// Σ w c, without background.
    pub color: [f64; 3],
    /// Σ w t.
    pub depth: f64,
    pub alpha: f64,
}

impl TracedRay {
    /// Samples, evaluates and composites one ray, keeping activations.
    /// Marching stops early once transmittance drops below `early_stop`.
    pub fn forward(
        &mut self,
        field: &TriPlaneField,
        ray: &Ray,
        n: usize,
        rng: Option<&mut ChaCha8Rng>,
        early_stop: f64,
    ) -> Result<()> {
        let mut t_all = std::mem::take(&mut self.t);
        let mut d_all = std::mem::take(&mut self.delta);
        fill_stratified(ray, n, rng, &mut t_all, &mut d_all);
        let tape_len = field.tape_layout().len;
        let dir = field.direction_terms(&ray.direction);
        self.sigma.clear();
        self.colors.clear();
        self.weights.clear();
        self.stencils.clear();
        self.tape.resize(n * tape_len, 0.0);
        self.color = [0.0; 3];
        self.depth = 0.0;
        let mut tau: f64 = 0.0;
        let mut used = 0;
        for i in 0..n {
            let trans = (-tau).exp();
            if trans < early_stop {
                break;
            }
            let p = ray.at(t_all[i]);
            let tape = &mut self.tape[i * tape_len..(i + 1) * tape_len];
            let (s, c, st) = field.forward_sample(&p, &dir, tape, false);
            if !s.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite density on ray from {:?} along {:?}",
                    ray.origin.as_slice(),
                    ray.direction.as_slice()
                )));
            }
            let sd = s * d_all[i];
            let w = trans * -(-sd).exp_m1();
            tau += sd;
            for k in 0..3 {
                self.color[k] += w * c[k];
            }
            self.depth += w * t_all[i];
            self.sigma.push(s);
            self.colors.push(c);
            self.weights.push(w);
            self.stencils.push(st);
            used += 1;
        }
        t_all.truncate(used);
        d_all.truncate(used);
        self.t = t_all;
        self.delta = d_all;
        self.alpha = self.weights.iter().sum();
        self.dir = Some(dir);
        Ok(())
    }

    /// Rendered color composited over `background`.
    pub fn composited(&self, background: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| self.color[k] + (1.0 - self.alpha) * background[k])
    }

    /// Propagates upstream derivatives with respect to the composited color,
    /// the expected distance and the accumulated alpha into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        field: &TriPlaneField,
        background: [f64; 3],
        dcolor: [f64; 3],
        ddepth: f64,
        dalpha: f64,
        grads: &mut TriPlaneField,
        scratch: &mut BackwardScratch,
    ) {
        let n = self.sigma.len();
        if n == 0 {
            return;
        }
        let dir = self.dir.as_ref().expect("backward after forward");
        let tape_len = field.tape_layout().len;
        let e: Vec<f64> = (0..n)
            .map(|i| {
                let c = self.colors[i];
                (0..3).map(|k| dcolor[k] * (c[k] - background[k])).sum::<f64>() + ddepth * self.t[i] + dalpha
            })
            .collect();
        // suffix sums of w_i e_i
        let mut tail = 0.0;
        let mut dsigma = vec![0.0; n];
        let mut tau: f64 = self.sigma.iter().zip(&self.delta).map(|(s, d)| s * d).sum();
        for i in (0..n).rev() {
            let t_next = (-tau).exp();
            tau -= self.sigma[i] * self.delta[i];
            dsigma[i] = self.delta[i] * (t_next * e[i] - tail);
            tail += self.weights[i] * e[i];
        }
        for i in 0..n {
            let w = self.weights[i];
            let dc = dcolor.map(|g| g * w);
            if dsigma[i] == 0.0 && dc.iter().all(|&g| g == 0.0) {
                continue;
            }
            field.backward_sample(
                &self.tape[i * tape_len..(i + 1) * tape_len],
                &self.stencils[i],
                dir,
                dsigma[i],
                dc,
                &[],
                grads,
                scratch,
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// Composited over the configured background.
    pub image: ColorImage,
    /// Expected camera-frame depth `Σ w z` (not normalized by alpha).
    pub depth: DepthMap,
    pub features: FeatureMap,
    pub alpha: Grid<f64>,
}

impl RenderOutput {
    /// Expected depth divided by alpha, `fallback` where nothing was hit.
    pub fn normalized_depth(&self, min_alpha: f64, fallback: f64) -> DepthMap {
        let data = self
            .depth
            .data
            .iter()
            .zip(&self.alpha.data)
            .map(|(&d, &a)| if a > min_alpha { d / a } else { fallback })
            .collect();
        Grid::from_vec(self.depth.width, self.depth.height, data).expect("same shape")
    }
}

/// Blocks that take part in rendering from `center`: those whose bounds
/// contain it, or the nearest one.
pub fn participating_blocks(blocks: &[TriPlaneField], center: &Vector3<f64>) -> Vec<usize> {
    let inside: Vec<usize> = (0..blocks.len()).filter(|&i| blocks[i].bounds.contains(center)).collect();
    if !inside.is_empty() {
        return inside;
    }
    nearest_block(blocks, center).into_iter().collect()
}

pub fn nearest_block(blocks: &[TriPlaneField], center: &Vector3<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in blocks.iter().enumerate() {
        let d = (b.bounds.center - center).norm();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

const BLEND_EPS: f64 = 1e-6;

/// Normalized per-ray blend weights: accumulated alpha times inverse
/// distance from the camera center to each block center; pure inverse
/// distance when every alpha is zero.
pub fn blend_weights(alphas: &[f64], distances: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + BLEND_EPS)).collect();
    let raw: Vec<f64> = alphas.iter().zip(&inv).map(|(a, i)| a * i).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        let s: f64 = inv.iter().sum();
        inv.iter().map(|i| i / s).collect()
    }
}

/// Renders every pixel (jitter off). Multiple participating blocks are
/// blended per pixel with [`blend_weights`].
pub fn render_view(blocks: &[TriPlaneField], pose: &Pose, camera: &Intrinsics, config: &RenderConfig) -> Result<RenderOutput> {
    if blocks.is_empty() {
        return Err(Error::domain("rendering needs at least one field block"));
    }
    let center = pose.center();
    let active = participating_blocks(blocks, &center);
    render_blocks(blocks, &active, pose, camera, config)
}

/// Renders with an explicit set of blocks.
pub fn render_blocks(
    blocks: &[TriPlaneField],
    active: &[usize],
    pose: &Pose,
    camera: &Intrinsics,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    if active.is_empty() {
        return Err(Error::domain("rendering needs at least one field block"));
    }
    let (w, h) = (camera.width, camera.height);
    let g = blocks[active[0]].config.hidden;
    let center = pose.center();
    let distances: Vec<f64> = active.iter().map(|&b| (blocks[b].bounds.center - center).norm()).collect();
    let forward = pose.forward();
    let rows: Vec<Result<Vec<([f64; 3], f64, Vec<f64>, f64)>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let dir = pixel_direction(camera, pose, x as f64, y as f64);
                let ray = Ray::new(center, dir, config.near, config.far)?;
                let samples = stratified_samples(&ray, config.samples, None)?;
                let cos = dir.dot(&forward);
                let results = active
                    .iter()
                    .map(|&b| render_ray(&blocks[b], &ray, &samples))
                    .collect::<Result<Vec<_>>>()?;
                let alphas: Vec<f64> = results.iter().map(|r| r.accumulated_alpha).collect();
                let wts = blend_weights(&alphas, &distances);
                let mut color = [0.0; 3];
                let mut depth = 0.0;
                let mut alpha = 0.0;
                let mut feat = vec![0.0; g];
                for (r, &bw) in results.iter().zip(&wts) {
                    for k in 0..3 {
                        color[k] += bw * (r.color[k] + (1.0 - r.accumulated_alpha) * config.background[k]);
                    }
                    depth += bw * r.depth * cos;
                    alpha += bw * r.accumulated_alpha;
                    for (f, v) in feat.iter_mut().zip(&r.feature) {
                        *f += bw * v;
                    }
                }
                row.push((color, depth, feat, alpha));
            }
            Ok(row)
        })
        .collect();
    let mut image = Grid::filled(w, h, [0.0; 3]);
    let mut depth = Grid::filled(w, h, 0.0);
    let mut alpha = Grid::filled(w, h, 0.0);
    let mut features = FeatureMap::zeros(w, h, g);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d, f, a)) in row?.into_iter().enumerate() {
            *image.get_mut(x, y) = c;
            *depth.get_mut(x, y) = d;
            *alpha.get_mut(x, y) = a;
            features.pixel_mut(x, y).copy_from_slice(&f);
        }
    }
    Ok(RenderOutput {
        image,
        depth,
        features,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Bounds, FieldConfig};

    fn ray01() -> Ray {
        Ray::new(Vector3::zeros(), Vector3::z(), 0.0, 1.0).unwrap()
    }

    #[test]
    fn midpoints_without_jitter() {
        let s = stratified_samples(&ray01(), 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25, 0.25, 0.25, 0.125]);
        assert!(stratified_samples(&ray01(), 0, None).is_err());
    }

    #[test]
    fn jittered_samples_stay_in_bins_and_repeat() {
        for seed in 0..20 {
            let s = stratified_samples(&ray01(), 8, Some(seed)).unwrap();
            for (i, &t) in s.t.iter().enumerate() {
                assert!(t >= i as f64 / 8.0 && t < (i + 1) as f64 / 8.0);
            }
            assert!(s.delta.iter().all(|&d| d > 0.0));
            assert_eq!(s, stratified_samples(&ray01(), 8, Some(seed)).unwrap());
        }
    }

    #[test]
    fn empty_space_renders_nothing() {
        let r = composite(&[0.0; 5], &[0.2; 5], &[0.1, 0.3, 0.5, 0.7, 0.9], &[[1.0; 3]; 5], &[]);
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.accumulated_alpha, 0.0);
    }

    #[test]
    fn half_opaque_single_sample() {
        let r = composite(&[std::f64::consts::LN_2], &[1.0], &[0.7], &[[0.2, 0.4, 0.6]], &[vec![2.0]]);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.color[1] - 0.2).abs() < 1e-15);
        assert!((r.depth - 0.35).abs() < 1e-15);
        assert!((r.feature[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let r = composite(&[40.0, 3.0, 5.0], &[1.0; 3], &[1.0, 2.0, 3.0], &[[0.9, 0.1, 0.3], [0.0; 3], [1.0; 3]], &[]);
        assert!((r.color[0] - 0.9).abs() < 1e-12);
        assert!((r.depth - 1.0).abs() < 1e-12);
        assert!(r.weights[1] < 1e-15 && r.weights[2] < 1e-15);
    }

    #[test]
    fn split_sample_leaves_color_unchanged() {
        let a = composite(&[0.7, 1.3], &[0.4, 0.2], &[0.0, 0.4], &[[0.2, 0.5, 0.9], [0.6, 0.1, 0.3]], &[]);
        let b = composite(&[0.7, 0.7, 1.3], &[0.2, 0.2, 0.2], &[0.0, 0.2, 0.4], &[[0.2, 0.5, 0.9], [0.2, 0.5, 0.9], [0.6, 0.1, 0.3]], &[]);
        for k in 0..3 {
            assert!((a.color[k] - b.color[k]).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn weights_closed_form(sig in proptest::collection::vec(0.0f64..20.0, 1..40), d in 0.001f64..0.5) {
            let delta = vec![d; sig.len()];
            let w = quadrature_weights(&sig, &delta);
            let total: f64 = sig.iter().map(|s| s * d).sum();
            let sum: f64 = w.iter().sum();
            proptest::prop_assert!((sum - (1.0 - (-total).exp())).abs() < 1e-12);
            proptest::prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    fn tiny_field(seed: u64) -> TriPlaneField {
        let cfg = FieldConfig {
            resolution: 4,
            features: 4,
            hidden: 8,
            layers: 4,
            pos_freqs: 2,
            dir_freqs: 1,
        };
        TriPlaneField::new_random(cfg, Bounds::new(Vector3::new(0.0, 0.0, 2.0), 2.0).unwrap(), seed).unwrap()
    }

    #[test]
    fn traced_forward_matches_render_ray() {
        let f = tiny_field(3);
        let ray = Ray::new(Vector3::new(0.1, -0.2, 0.0), Vector3::new(0.1, 0.05, 1.0).normalize(), 0.05, 5.0).unwrap();
        let samples = stratified_samples(&ray, 16, None).unwrap();
        let r = render_ray(&f, &ray, &samples).unwrap();
        let mut tr = TracedRay::default();
        tr.forward(&f, &ray, 16, None, 0.0).unwrap();
        for k in 0..3 {
            assert!((tr.color[k] - r.color[k]).abs() < 1e-14);
        }
        assert!((tr.depth - r.depth).abs() < 1e-13);
        assert!((tr.alpha - r.accumulated_alpha).abs() < 1e-14);
    }

    #[test]
    fn ray_backward_matches_finite_differences() {
        let mut f = tiny_field(8);
        let ray = Ray::new(Vector3::new(0.0, 0.1, 0.0), Vector3::new(-0.1, 0.2, 1.0).normalize(), 0.05, 5.0).unwrap();
        let bg = [0.3, 0.6, 0.9];
        let (wc, wd, wa) = ([0.7, -0.4, 0.2], 0.3, -0.5);
        let objective = |f: &TriPlaneField| {
            let mut tr = TracedRay::default();
            tr.forward(f, &ray, 12, None, 0.0).unwrap();
            let c = tr.composited(bg);
            (0..3).map(|k| wc[k] * c[k]).sum::<f64>() + wd * tr.depth + wa * tr.alpha
        };
        let mut tr = TracedRay::default();
        tr.forward(&f, &ray, 12, None, 0.0).unwrap();
        let mut grads = f.zeros_like();
        tr.backward(&f, bg, wc, wd, wa, &mut grads, &mut BackwardScratch::default());
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let h = 1e-5;
        let mut idx = 0;
        for t in 0..f.tensors().len() {
            for i in 0..f.tensors()[t].len() {
                let orig = f.tensors()[t][i];
                f.tensors_mut()[t][i] = orig + h;
                let up = objective(&f);
                f.tensors_mut()[t][i] = orig - h;
                let dn = objective(&f);
                f.tensors_mut()[t][i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let a = analytic[idx];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4, "tensor {t}[{i}]: {a} vs {fd}");
                idx += 1;
            }
        }
    }

    #[test]
    fn zero_density_view_is_background() {
        let mut f = tiny_field(1);
        f.decoder.density.weight.iter_mut().for_each(|w| *w = 0.0);
        f.decoder.density.bias[0] = -800.0;
        let cam = Intrinsics::centered(8.0, 6, 5).unwrap();
        let cfg = RenderConfig {
            samples: 8,
            far: 4.0,
            background: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let out = render_view(&[f], &Pose::identity(), &cam, &cfg).unwrap();
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(out.image.data.iter().all(|c| *c == [0.2, 0.4, 0.6]));
    }

    #[test]
    fn duplicated_block_renders_identically() {
        let f = tiny_field(2);
        let cam = Intrinsics::centered(8.0, 6, 5).unwrap();
        let cfg = RenderConfig {
            samples: 8,
            far: 4.0,
            ..Default::default()
        };
        let one = render_view(&[f.clone()], &Pose::identity(), &cam, &cfg).unwrap();
        let two = render_view(&[f.clone(), f], &Pose::identity(), &cam, &cfg).unwrap();
        for (a, b) in one.image.data.iter().zip(&two.image.data) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        let again = render_view(&[tiny_field(2)], &Pose::identity(), &cam, &cfg).unwrap();
        assert_eq!(again, one);
    }

    #[test]
    fn blend_weight_rules() {
        let w = blend_weights(&[1.0, 1.0], &[1.0, 3.0]);
        assert!((w[0] - 0.75).abs() < 1e-5);
        let w = blend_weights(&[0.0, 0.5], &[1.0, 3.0]);
        assert_eq!(w, vec![0.0, 1.0]);
        let w = blend_weights(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn sampling_refinement_converges() {
        let f = tiny_field(4);
        let ray = Ray::new(Vector3::zeros(), Vector3::new(0.2, 0.1, 1.0).normalize(), 0.05, 4.0).unwrap();
        let coarse = render_ray(&f, &ray, &stratified_samples(&ray, 64, None).unwrap()).unwrap();
        let fine = render_ray(&f, &ray, &stratified_samples(&ray, 1024, None).unwrap()).unwrap();
        for k in 0..3 {
            assert!((coarse.color[k] - fine.color[k]).abs() <= 1e-2);
        }
    }
}
