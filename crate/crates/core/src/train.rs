//! Losses, the optimizer and its schedule, scene initialization, and the
//! incremental extension loop with loss-guided ray sampling and block
//! chaining.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::{pixel_direction, Intrinsics, Pose, Ray};
use crate::dibr::Keyframe;
use crate::field::{BackwardScratch, Bounds, FieldConfig, TriPlaneField};
use crate::grid::Grid;
use crate::refine::{RefineInput, RefineOutput, Refiner};
use crate::render::{render_view, RenderConfig, RenderOutput, TracedRay};
use crate::{Error, Result};

/// Mean over rays of the squared L2 color residual.
pub fn photometric_loss(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if rendered.is_empty() || rendered.len() != target.len() {
        return Err(Error::domain("photometric loss needs equal, non-empty batches"));
    }
    let total: f64 = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / rendered.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Depth weight at the start of initialization.
    pub lambda_depth: f64,
    /// Depth weight reached at the end of initialization and used while
    /// extending.
    pub lambda_depth_final: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_depth: 0.1,
            lambda_depth_final: 0.01,
        }
    }
}

impl LossConfig {
    /// Linear decay over `total` iterations.
    pub fn lambda_at(&self, iteration: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lambda_depth;
        }
        let f = (iteration as f64 / (total - 1) as f64).min(1.0);
        self.lambda_depth + f * (self.lambda_depth_final - self.lambda_depth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    /// d value / d rendered depth.
    pub grad: Vec<f64>,
    /// The reference had no variance, so the frame contributed nothing.
    pub degenerate_reference: bool,
}

/// Zero mean, unit (population) standard deviation; a constant input maps to
/// all zeros. Returns the standardized values and the standard deviation.
fn standardize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1e-300) || sd == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| (x - mean) / sd).collect(), sd)
    }
}

/// Per-frame scale-and-shift invariant depth loss: both sides standardized,
/// then the mean squared difference. The caller applies λ.
pub fn depth_loss(rendered: &[f64], reference: &[f64]) -> Result<DepthLoss> {
    let n = rendered.len();
    if n < 2 || n != reference.len() {
        return Err(Error::domain("depth loss needs at least two paired pixels"));
    }
    if rendered.iter().chain(reference).any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite depth in depth loss".into()));
    }
    let (r_hat, r_sd) = standardize(reference);
    if r_sd == 0.0 {
        return Ok(DepthLoss {
            value: 0.0,
            grad: vec![0.0; n],
            degenerate_reference: true,
        });
    }
    let (d_hat, d_sd) = standardize(rendered);
    let value = d_hat.iter().zip(&r_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    let grad = if d_sd == 0.0 {
        vec![0.0; n]
    } else {
        let u: Vec<f64> = d_hat.iter().zip(&r_hat).map(|(a, b)| 2.0 * (a - b) / n as f64).collect();
        let mean_u = u.iter().sum::<f64>() / n as f64;
        let mean_ud = u.iter().zip(&d_hat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        u.iter().zip(&d_hat).map(|(&uj, &dj)| (uj - mean_u - dj * mean_ud) / d_sd).collect()
    };
    Ok(DepthLoss {
        value,
        grad,
        degenerate_reference: false,
    })
}

/// Linear warmup to `peak` over `warmup` updates, then cosine decay to
/// `final_lr` at update `total`. Update indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub final_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, final_lr: f64, warmup: usize, total: usize) -> Self {
        Schedule {
            peak,
            final_lr,
            warmup,
            total,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step <= self.warmup {
            return if self.warmup == 0 { self.peak } else { self.peak * step as f64 / self.warmup as f64 };
        }
        if step >= self.total || self.total <= self.warmup {
            return self.final_lr;
        }
        let f = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        self.final_lr + (self.peak - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn with_schedule(schedule: Schedule) -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            weight_decay: 0.0,
            schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
    /// Per-tensor learning-rate multipliers.
    pub lr_scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        OptimizerState {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr_scale: vec![1.0; shapes.len()],
        }
    }

    pub fn for_field(config: OptimizerConfig, field: &TriPlaneField, plane_lr_scale: f64) -> Self {
        let shapes: Vec<usize> = field.tensors().iter().map(|t| t.len()).collect();
        let mut s = Self::new(config, &shapes);
        for k in 0..3 {
            s.lr_scale[k] = plane_lr_scale;
        }
        s
    }
}

/// One clipped Adam update. `names` label tensors in error messages.
pub fn step_optimizer(params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String], opt: &mut OptimizerState) -> Result<StepInfo> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::domain("parameter and gradient tensor counts differ"));
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() || g.len() != opt.m[i].len() {
            return Err(Error::domain(format!("shape mismatch in tensor {}", names.get(i).map_or("?", |s| s.as_str()))));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in tensor {}",
                names.get(i).map_or("?", |s| s.as_str())
            )));
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = if norm > opt.config.clip { opt.config.clip / norm } else { 1.0 };
    opt.step += 1;
    let c = opt.config;
    let lr = c.schedule.rate(opt.step);
    let bc1 = 1.0 - c.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - c.beta2.powi(opt.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let rate = lr * opt.lr_scale[i];
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j] * clip;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            p[j] -= rate * (update + c.weight_decay * p[j]);
        }
    }
    Ok(StepInfo { lr, grad_norm: norm })
}

/// [`step_optimizer`] over every tensor of a field.
pub fn step_field(field: &mut TriPlaneField, grads: &TriPlaneField, opt: &mut OptimizerState) -> Result<StepInfo> {
    let names = field.tensor_names();
    let g = grads.tensors();
    let mut p = field.tensors_mut();
    step_optimizer(&mut p, &g, &names, opt)
}

/// Where a database keyframe came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Initial,
    Neighbor,
    Extension,
}

impl EntryKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryKind::Initial => "initial",
            EntryKind::Neighbor => "neighbor",
            EntryKind::Extension => "extension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "initial" => Some(EntryKind::Initial),
            "neighbor" => Some(EntryKind::Neighbor),
            "extension" => Some(EntryKind::Extension),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseEntry {
    pub keyframe: Keyframe,
    /// Last photometric loss seen at each pixel; NaN where never sampled.
    pub loss_cache: Grid<f64>,
    /// Whether the depth channel may supervise geometry.
    pub depth_supervised: bool,
    pub blocks: Vec<usize>,
    pub kind: EntryKind,
}

impl DatabaseEntry {
    pub fn new(keyframe: Keyframe, depth_supervised: bool, blocks: Vec<usize>, kind: EntryKind) -> Self {
        let loss_cache = Grid::filled(keyframe.width(), keyframe.height(), f64::NAN);
        DatabaseEntry {
            keyframe,
            loss_cache,
            depth_supervised,
            blocks,
            kind,
        }
    }
}

/// Everything the training loops need beyond the field shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub init_iterations: usize,
    pub init_rays: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub lr_warmup: usize,
    pub extend_iterations: usize,
    pub extend_rays: usize,
    pub extend_lr_peak: f64,
    pub extend_warmup: usize,
    /// Extra iterations run right after a block is spawned.
    pub spawn_iterations: usize,
    pub window: usize,
    pub clip: f64,
    pub weight_decay: f64,
    pub plane_lr_scale: f64,
    /// Transmittance below which training rays stop marching.
    pub early_stop: f64,
    /// Rays per gradient partial sum.
    pub chunk: usize,
    pub block_half_extent: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            field: FieldConfig::full_scale(),
            render: RenderConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            init_iterations: 5000,
            init_rays: 1024,
            lr_peak: 5e-4,
            lr_final: 5e-6,
            lr_warmup: 500,
            extend_iterations: 800,
            extend_rays: 1024,
            extend_lr_peak: 5e-4,
            extend_warmup: 50,
            spawn_iterations: 0,
            window: 8,
            clip: 1.0,
            weight_decay: 0.0,
            plane_lr_scale: 1.0,
            early_stop: 1e-4,
            chunk: 64,
            block_half_extent: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub blocks: Vec<TriPlaneField>,
    pub database: Vec<DatabaseEntry>,
    pub active_block: usize,
    pub camera: Intrinsics,
    pub config: TrainConfig,
    /// Camera center of the most recent frame added to the database.
    pub last_center: Vector3<f64>,
    /// Number of frames added by extension so far.
    pub frames_added: usize,
}

impl SceneState {
    pub fn new(block: TriPlaneField, database: Vec<DatabaseEntry>, camera: Intrinsics, config: TrainConfig) -> Result<Self> {
        let first = database
            .first()
            .ok_or_else(|| Error::domain("scene state needs a non-empty database"))?;
        let last_center = first.keyframe.pose.center();
        Ok(SceneState {
            blocks: vec![block],
            database,
            active_block: 0,
            camera,
            config,
            last_center,
            frames_added: 0,
        })
    }

    fn rng(&self, tag: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        // decorrelate successive phases of the same run
        r.set_stream(self.frames_added as u64);
        r
    }
}

/// One supervised ray: keyframe index and pixel index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaySpec {
    pub frame: usize,
    pub pixel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub keyframe: usize,
    /// Relative share of the ray budget.
    pub budget: f64,
    /// Per-pixel categorical weights, summing to 1.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SamplingPlan {
    pub entries: Vec<PlanEntry>,
}

pub const UNIFORM_MASS: f64 = 0.2;

/// Active set: the new keyframes plus the `window` keyframes just before the
/// first of them. Pixel weights mix the cached losses (unknown entries take
/// the mean of the known ones) with 20% uniform mass over valid pixels; a
/// keyframe with no cache at all is sampled uniformly with twice the budget.
pub fn information_gain_plan(database: &[DatabaseEntry], new_keyframes: &[usize], window: usize) -> SamplingPlan {
    let first_new = new_keyframes.iter().copied().min().unwrap_or(database.len());
    let mut active: Vec<usize> = (first_new.saturating_sub(window)..first_new).collect();
    for &k in new_keyframes {
        if !active.contains(&k) {
            active.push(k);
        }
    }
    let entries = active
        .into_iter()
        .filter_map(|k| {
            let e = &database[k];
            let valid = &e.keyframe.valid_mask.data;
            let p = valid.iter().filter(|&&v| v).count();
            if p == 0 {
                return None;
            }
            let known: Vec<f64> = e
                .loss_cache
                .data
                .iter()
                .zip(valid)
                .filter(|(l, &v)| v && l.is_finite())
                .map(|(&l, _)| l)
                .collect();
            let uniform = 1.0 / p as f64;
            if known.is_empty() {
                let weights = valid.iter().map(|&v| if v { uniform } else { 0.0 }).collect();
                return Some(PlanEntry {
                    keyframe: k,
                    budget: 2.0,
                    weights,
                });
            }
            let fill = known.iter().sum::<f64>() / known.len() as f64;
            let losses: Vec<f64> = e
                .loss_cache
                .data
                .iter()
                .zip(valid)
                .map(|(&l, &v)| if !v { 0.0 } else if l.is_finite() { l.max(0.0) } else { fill.max(0.0) })
                .collect();
            let total: f64 = losses.iter().sum();
            let weights = losses
                .iter()
                .zip(valid)
                .map(|(&l, &v)| {
                    if !v {
                        0.0
                    } else if total > 0.0 {
                        (1.0 - UNIFORM_MASS) * l / total + UNIFORM_MASS * uniform
                    } else {
                        uniform
                    }
                })
                .collect();
            Some(PlanEntry {
                keyframe: k,
                budget: 1.0,
                weights,
            })
        })
        .collect();
    SamplingPlan { entries }
}

/// Draws rays: keyframes by budget share (largest remainder), pixels by the
/// per-pixel categorical weights.
pub struct PlanSampler {
    frames: Vec<usize>,
    counts: Vec<usize>,
    cdfs: Vec<Vec<f64>>,
}

impl PlanSampler {
    pub fn new(plan: &SamplingPlan, rays: usize) -> Result<Self> {
        if plan.entries.is_empty() {
            return Err(Error::domain("sampling plan has no keyframes"));
        }
        let total: f64 = plan.entries.iter().map(|e| e.budget).sum();
        let exact: Vec<f64> = plan.entries.iter().map(|e| e.budget / total * rays as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rest: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, x)| (i, x - x.floor())).collect();
        rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let missing = rays - counts.iter().sum::<usize>();
        for (i, _) in rest.into_iter().take(missing) {
            counts[i] += 1;
        }
        let cdfs = plan
            .entries
            .iter()
            .map(|e| {
                let mut acc = 0.0;
                e.weights
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(PlanSampler {
            frames: plan.entries.iter().map(|e| e.keyframe).collect(),
            counts,
            cdfs,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<RaySpec> {
        let mut out = Vec::with_capacity(self.counts.iter().sum());
        for ((&frame, &count), cdf) in self.frames.iter().zip(&self.counts).zip(&self.cdfs) {
            let total = *cdf.last().unwrap();
            for _ in 0..count {
                let u = rng.gen::<f64>() * total;
                let mut pixel = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                // skip zero-weight pixels that share the cumulative value
                while pixel > 0 && cdf[pixel] == cdf[pixel - 1] && cdf[pixel] > u {
                    pixel -= 1;
                }
                out.push(RaySpec { frame, pixel });
            }
        }
        out
    }
}

/// Uniform over valid pixels of the given keyframes.
fn uniform_plan(database: &[DatabaseEntry], frames: &[usize]) -> SamplingPlan {
    SamplingPlan {
        entries: frames
            .iter()
            .filter_map(|&k| {
                let valid = &database[k].keyframe.valid_mask.data;
                let p = valid.iter().filter(|&&v| v).count();
                (p > 0).then(|| PlanEntry {
                    keyframe: k,
                    budget: 1.0,
                    weights: valid.iter().map(|&v| if v { 1.0 / p as f64 } else { 0.0 }).collect(),
                })
            })
            .collect(),
    }
}

/// Per-iteration record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub photometric: f64,
    pub depth: f64,
    pub lr: f64,
}

struct Chunk {
    rays: Vec<TracedRay>,
    grads: TriPlaneField,
    scratch: BackwardScratch,
}

/// Reusable buffers for [`train_iterations`].
pub struct Workspace {
    chunks: Vec<Chunk>,
}

impl Workspace {
    /// Summed gradient of the last [`batch_gradient`] call.
    pub fn gradient(&self) -> &TriPlaneField {
        &self.chunks[0].grads
    }

    pub fn new(field: &TriPlaneField, rays: usize, chunk: usize) -> Self {
        let n = rays.div_ceil(chunk.max(1)).max(1);
        Workspace {
            chunks: (0..n)
                .map(|_| Chunk {
                    rays: Vec::new(),
                    grads: field.zeros_like(),
                    scratch: BackwardScratch::default(),
                })
                .collect(),
        }
    }
}

/// Per-ray loss terms of one batch.
struct BatchLoss {
    photometric: f64,
    depth: f64,
    dcolor: Vec<[f64; 3]>,
    ddepth: Vec<f64>,
    per_ray: Vec<f64>,
}

fn batch_loss(
    specs: &[RaySpec],
    traced: &[&TracedRay],
    cos: &[f64],
    database: &[DatabaseEntry],
    background: [f64; 3],
    lambda: f64,
) -> Result<BatchLoss> {
    let n = specs.len();
    let rendered: Vec<[f64; 3]> = traced.iter().map(|t| t.composited(background)).collect();
    let target: Vec<[f64; 3]> = specs.iter().map(|s| database[s.frame].keyframe.image.data[s.pixel]).collect();
    let photometric = photometric_loss(&rendered, &target)?;
    let per_ray: Vec<f64> = rendered
        .iter()
        .zip(&target)
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum())
        .collect();
    let dcolor: Vec<[f64; 3]> = rendered
        .iter()
        .zip(&target)
        .map(|(a, b)| [0, 1, 2].map(|k| 2.0 * (a[k] - b[k]) / n as f64))
        .collect();
    let mut ddepth = vec![0.0; n];
    let mut depth = 0.0;
    if lambda > 0.0 {
        let mut frames: Vec<usize> = specs.iter().map(|s| s.frame).collect();
        frames.sort_unstable();
        frames.dedup();
        for f in frames {
            let e = &database[f];
            if !e.depth_supervised {
                continue;
            }
            let idx: Vec<usize> = (0..n)
                .filter(|&i| specs[i].frame == f && e.keyframe.depth.data[specs[i].pixel].is_finite())
                .collect();
            if idx.len() < 2 {
                continue;
            }
            let r: Vec<f64> = idx.iter().map(|&i| traced[i].depth * cos[i]).collect();
            let refd: Vec<f64> = idx.iter().map(|&i| e.keyframe.depth.data[specs[i].pixel]).collect();
            let dl = depth_loss(&r, &refd)?;
            let share = idx.len() as f64 / n as f64;
            depth += share * dl.value;
            for (j, &i) in idx.iter().enumerate() {
                ddepth[i] = lambda * share * dl.grad[j] * cos[i];
            }
        }
    }
    Ok(BatchLoss {
        photometric,
        depth,
        dcolor,
        ddepth,
        per_ray,
    })
}

/// Loss terms of one batch; the gradient sits in the workspace.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub photometric: f64,
    pub depth: f64,
    /// `photometric + λ·depth`.
    pub total: f64,
    /// Squared color residual per ray.
    pub per_ray: Vec<f64>,
}

/// Forward, loss and reverse pass over one ray batch. `seeds` holds one
/// jitter seed per chunk of `config.chunk` rays. Chunk gradients are summed
/// in chunk order into the first chunk's buffer, see [`Workspace::gradient`].
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    field: &TriPlaneField,
    database: &[DatabaseEntry],
    camera: &Intrinsics,
    config: &TrainConfig,
    specs: &[RaySpec],
    seeds: &[u64],
    lambda: f64,
    ws: &mut Workspace,
) -> Result<BatchResult> {
    let chunk = config.chunk.max(1);
    let nchunks = specs.len().div_ceil(chunk).max(1);
    if seeds.len() < nchunks {
        return Err(Error::domain("one jitter seed per chunk is required"));
    }
    while ws.chunks.len() < nchunks {
        ws.chunks.push(Chunk {
            rays: Vec::new(),
            grads: field.zeros_like(),
            scratch: BackwardScratch::default(),
        });
    }
    ws.chunks.truncate(nchunks);
    let render = &config.render;
    let rays: Vec<(Ray, f64)> = specs
        .iter()
        .map(|s| {
            let kf = &database[s.frame].keyframe;
            let (x, y) = (s.pixel % kf.width(), s.pixel / kf.width());
            let dir = pixel_direction(camera, &kf.pose, x as f64, y as f64);
            let cos = dir.dot(&kf.pose.forward());
            (
                Ray {
                    origin: kf.pose.center(),
                    direction: dir,
                    t_near: render.near,
                    t_far: render.far,
                },
                cos,
            )
        })
        .collect();
    ws.chunks
        .par_iter_mut()
        .zip(seeds.par_iter())
        .enumerate()
        .try_for_each(|(c, (ch, &seed))| -> Result<()> {
            let lo = (c * chunk).min(rays.len());
            let hi = ((c + 1) * chunk).min(rays.len());
            ch.rays.resize_with(hi - lo, TracedRay::default);
            let mut crng = ChaCha8Rng::seed_from_u64(seed);
            for (tr, (ray, _)) in ch.rays.iter_mut().zip(&rays[lo..hi]) {
                tr.forward(field, ray, render.samples, Some(&mut crng), config.early_stop)?;
            }
            Ok(())
        })?;
    let traced: Vec<&TracedRay> = ws.chunks.iter().flat_map(|c| c.rays.iter()).collect();
    let cos: Vec<f64> = rays.iter().map(|r| r.1).collect();
    let loss = batch_loss(specs, &traced, &cos, database, render.background, lambda)?;
    let total = loss.photometric + lambda * loss.depth;
    if !total.is_finite() {
        return Err(Error::Numerical("loss became non-finite".into()));
    }
    let bg = render.background;
    ws.chunks.par_iter_mut().enumerate().for_each(|(c, ch)| {
        ch.grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        let lo = c * chunk;
        for (j, tr) in ch.rays.iter().enumerate() {
            let i = lo + j;
            tr.backward(field, bg, loss.dcolor[i], loss.ddepth[i], 0.0, &mut ch.grads, &mut ch.scratch);
        }
    });
    let (first, rest) = ws.chunks.split_first_mut().expect("at least one chunk");
    for ch in rest.iter() {
        for (a, b) in first.grads.tensors_mut().into_iter().zip(ch.grads.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    Ok(BatchResult {
        photometric: loss.photometric,
        depth: loss.depth,
        total,
        per_ray: loss.per_ray,
    })
}

/// Runs `iterations` updates of `field`, drawing rays from `sampler`.
/// `lambda(i)` gives the depth weight of iteration `i`. A non-finite loss
/// aborts before the update, leaving the last finite parameters in place.
#[allow(clippy::too_many_arguments)]
pub fn train_iterations(
    field: &mut TriPlaneField,
    opt: &mut OptimizerState,
    database: &mut [DatabaseEntry],
    camera: &Intrinsics,
    config: &TrainConfig,
    sampler: &PlanSampler,
    iterations: usize,
    lambda: &dyn Fn(usize) -> f64,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<IterationLog>,
) -> Result<()> {
    let rays_per_iter: usize = sampler.counts.iter().sum();
    let mut ws = Workspace::new(field, rays_per_iter, config.chunk);
    for it in 0..iterations {
        let specs = sampler.draw(rng);
        let seeds: Vec<u64> = (0..ws.chunks.len()).map(|_| rng.gen()).collect();
        let lam = lambda(it);
        let batch = batch_gradient(field, database, camera, config, &specs, &seeds, lam, &mut ws)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("{m} at iteration {it}")),
                other => other,
            })?;
        for (s, &l) in specs.iter().zip(&batch.per_ray) {
            database[s.frame].loss_cache.data[s.pixel] = l;
        }
        let info = step_field(field, ws.gradient(), opt)?;
        log.push(IterationLog {
            photometric: batch.photometric,
            depth: batch.depth,
            lr: info.lr,
        });
    }
    Ok(())
}

/// Fits the active block to every keyframe assigned to it, rays drawn
/// uniformly, with the depth weight decaying linearly over the run.
pub fn train_initial(state: &mut SceneState, iterations: usize) -> Result<Vec<IterationLog>> {
    let mut log = Vec::new();
    if iterations == 0 {
        return Ok(log);
    }
    let cfg = state.config.clone();
    let b = state.active_block;
    let frames: Vec<usize> = (0..state.database.len()).filter(|&k| state.database[k].blocks.contains(&b)).collect();
    let sampler = PlanSampler::new(&uniform_plan(&state.database, &frames), cfg.init_rays)?;
    let mut opt_cfg = OptimizerConfig::with_schedule(Schedule::new(cfg.lr_peak, cfg.lr_final, cfg.lr_warmup, iterations));
    opt_cfg.clip = cfg.clip;
    opt_cfg.weight_decay = cfg.weight_decay;
    let mut opt = OptimizerState::for_field(opt_cfg, &state.blocks[b], cfg.plane_lr_scale);
    let mut rng = state.rng(1);
    let loss = cfg.loss;
    let lambda = move |i: usize| loss.lambda_at(i, iterations);
    let camera = state.camera;
    let mut field = state.blocks[b].clone();
    let result = train_iterations(
        &mut field,
        &mut opt,
        &mut state.database,
        &camera,
        &cfg,
        &sampler,
        iterations,
        &lambda,
        &mut rng,
        &mut log,
    );
    state.blocks[b] = field;
    result.map(|_| log)
}

/// What one extension step produced.
#[derive(Debug, Clone)]
pub struct ExtendOutcome {
    pub render: RenderOutput,
    pub refined: RefineOutput,
    pub spawned_block: Option<usize>,
    pub log: Vec<IterationLog>,
}

/// Renders the next view, refines it, appends it to the database (spawning a
/// block centered at the previous camera when the pose leaves the active
/// block) and trains the active block with loss-guided sampling. A refiner
/// failure leaves the state untouched.
pub fn extend_scene(state: &mut SceneState, next_pose: &Pose, refiner: &dyn Refiner, prompt: &str) -> Result<ExtendOutcome> {
    if !next_pose.translation().iter().all(|v| v.is_finite()) {
        return Err(Error::domain("next pose is not finite"));
    }
    let cfg = state.config.clone();
    let camera = state.camera;
    let render = render_view(&state.blocks, next_pose, &camera, &cfg.render)?;
    let refined = refiner
        .refine(&RefineInput {
            image: &render.image,
            features: &render.features,
            depth: &render.depth,
            alpha: &render.alpha,
            pose: *next_pose,
            camera,
            prompt,
        })
        .map_err(|e| match e {
            Error::Refiner(m) => Error::Refiner(m),
            other => Error::Refiner(other.to_string()),
        })?;
    let (depth, supervised) = match &refined.depth {
        Some(d) => (crate::io::pfm::quantize(d), true),
        None => (crate::io::pfm::quantize(&render.normalized_depth(1e-3, cfg.render.far)), false),
    };
    let depth = depth.map(|&d| if d > 0.0 { d } else { cfg.render.far });
    let keyframe = Keyframe::new(
        crate::io::png::quantize(&refined.image),
        depth,
        *next_pose,
        refined.confidence.clone(),
    )?;

    let center = next_pose.center();
    let mut spawned = None;
    if !state.blocks[state.active_block].bounds.contains(&center) {
        let old = &state.blocks[state.active_block];
        // a dyadic center keeps the checkpoint's min/max round trip exact
        let center = state.last_center.map(|v| (v * 1024.0).round() / 1024.0);
        let bounds = Bounds::new(center, old.bounds.half_extent)?;
        let bounds = Bounds::from_min_max(&bounds.min(), &bounds.max())?;
        let mut block = TriPlaneField::new_random(old.config, bounds, cfg.seed ^ (state.blocks.len() as u64) << 32)?;
        block.decoder = old.decoder.clone();
        let id = state.blocks.len();
        state.blocks.push(block);
        let first_new = state.database.len();
        for k in first_new.saturating_sub(cfg.window)..first_new {
            if !state.database[k].blocks.contains(&id) {
                state.database[k].blocks.push(id);
            }
        }
        state.active_block = id;
        spawned = Some(id);
    }
    let b = state.active_block;
    state
        .database
        .push(DatabaseEntry::new(keyframe, supervised, vec![b], EntryKind::Extension));
    let new_index = state.database.len() - 1;
    state.last_center = center;
    state.frames_added += 1;

    let iterations = cfg.extend_iterations + if spawned.is_some() { cfg.spawn_iterations } else { 0 };
    let mut log = Vec::new();
    if iterations > 0 {
        let mut plan = information_gain_plan(&state.database, &[new_index], cfg.window);
        plan.entries.retain(|e| state.database[e.keyframe].blocks.contains(&b));
        let sampler = PlanSampler::new(&plan, cfg.extend_rays)?;
        let mut opt_cfg =
            OptimizerConfig::with_schedule(Schedule::new(cfg.extend_lr_peak, cfg.lr_final, cfg.extend_warmup, iterations));
        opt_cfg.clip = cfg.clip;
        opt_cfg.weight_decay = cfg.weight_decay;
        let mut opt = OptimizerState::for_field(opt_cfg, &state.blocks[b], cfg.plane_lr_scale);
        let mut rng = state.rng(2);
        let lam = cfg.loss.lambda_depth_final;
        let lambda = move |_: usize| lam;
        let mut field = state.blocks[b].clone();
        let result = train_iterations(
            &mut field,
            &mut opt,
            &mut state.database,
            &camera,
            &cfg,
            &sampler,
            iterations,
            &lambda,
            &mut rng,
            &mut log,
        );
        state.blocks[b] = field;
        result?;
    }
    Ok(ExtendOutcome {
        render,
        refined,
        spawned_block: spawned,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn photometric_examples() {
        let a = vec![[0.2, 0.3, 0.4]; 5];
        assert_eq!(photometric_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|c| c.map(|v| v + 0.1)).collect();
        assert!((photometric_loss(&a, &b).unwrap() - 0.03).abs() < 1e-12);
        assert!(photometric_loss(&[], &[]).is_err());
    }

    #[test]
    fn photometric_matches_hand_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<[f64; 3]> = (0..17).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let b: Vec<[f64; 3]> = (0..17).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut s = 0.0;
        for i in 0..17 {
            for k in 0..3 {
                s += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
            }
        }
        assert!((photometric_loss(&a, &b).unwrap() - s / 17.0).abs() < 1e-14);
    }

    #[test]
    fn depth_loss_examples() {
        let r = [1.0, 2.0, 4.0, 3.5];
        let affine: Vec<f64> = r.iter().map(|d| 2.5 * d + 0.7).collect();
        assert!(depth_loss(&r, &affine).unwrap().value < 1e-12);
        assert!(depth_loss(&r, &r).unwrap().value < 1e-12);
        let flat = depth_loss(&[2.0; 4], &r).unwrap();
        assert!((flat.value - 1.0).abs() < 1e-12);
        let deg = depth_loss(&r, &[3.0; 4]).unwrap();
        assert!(deg.degenerate_reference && deg.value == 0.0);
        assert!(depth_loss(&[1.0], &[1.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn depth_loss_affine_invariant(v in proptest::collection::vec(0.5f64..10.0, 3..20), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let refd: Vec<f64> = v.iter().rev().map(|x| x * 1.3 + (x * 7.0).sin()).collect();
            let base = depth_loss(&v, &refd).unwrap().value;
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let moved_ref: Vec<f64> = refd.iter().map(|x| a * x - b).collect();
            proptest::prop_assert!((depth_loss(&moved, &refd).unwrap().value - base).abs() < 1e-12);
            proptest::prop_assert!((depth_loss(&v, &moved_ref).unwrap().value - base).abs() < 1e-12);
        }

        #[test]
        fn clipped_gradient_norm_bounded(g in proptest::collection::vec(-100.0f64..100.0, 1..30)) {
            let mut p = vec![0.0; g.len()];
            let mut opt = OptimizerState::new(OptimizerConfig::with_schedule(Schedule::new(1.0, 1.0, 0, 10)), &[g.len()]);
            let names = vec!["p".to_string()];
            step_optimizer(&mut [&mut p[..]], &[&g[..]], &names, &mut opt).unwrap();
            // the first moment after one step is (1 − β1)·clipped g
            let norm = opt.m[0].iter().map(|m| (m / 0.1).powi(2)).sum::<f64>().sqrt();
            proptest::prop_assert!(norm <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn depth_loss_gradient_matches_finite_differences() {
        let r = vec![1.0, 2.2, 4.1, 3.5, 0.7];
        let refd = vec![2.0, 1.2, 5.0, 3.3, 1.9];
        let g = depth_loss(&r, &refd).unwrap().grad;
        for j in 0..r.len() {
            let h = 1e-6;
            let mut up = r.clone();
            up[j] += h;
            let mut dn = r.clone();
            dn[j] -= h;
            let fd = (depth_loss(&up, &refd).unwrap().value - depth_loss(&dn, &refd).unwrap().value) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(5e-4, 5e-6, 500, 5000);
        assert_eq!(s.rate(0), 0.0);
        assert!((s.rate(1) - 5e-4 / 500.0).abs() < 1e-18);
        assert!((s.rate(500) - 5e-4).abs() < 1e-18);
        assert!((s.rate(5000) - 5e-6).abs() < 1e-18);
        let mut prev = s.rate(500);
        for k in 501..=5000 {
            let r = s.rate(k);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5, -1.0];
        let mut opt = OptimizerState::new(OptimizerConfig::with_schedule(Schedule::new(1e-3, 1e-5, 10, 100)), &[2]);
        let names = vec!["p".to_string()];
        step_optimizer(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &names, &mut opt).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn norm_ten_gradient_clipped_to_one() {
        let mut p = vec![0.0, 0.0];
        let mut opt = OptimizerState::new(OptimizerConfig::with_schedule(Schedule::new(1e-3, 1e-5, 10, 100)), &[2]);
        let names = vec!["p".to_string()];
        let info = step_optimizer(&mut [&mut p[..]], &[&[6.0, 8.0][..]], &names, &mut opt).unwrap();
        assert!((info.grad_norm - 10.0).abs() < 1e-12);
        assert!((opt.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((opt.m[0][1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_scalar_steps_match_hand_arithmetic() {
        // lr schedule: warmup 2 to peak 0.1, so rates 0.05 then 0.1
        let mut p = vec![1.0];
        let mut opt = OptimizerState::new(OptimizerConfig::with_schedule(Schedule::new(0.1, 0.001, 2, 10)), &[1]);
        let names = vec!["x".to_string()];
        step_optimizer(&mut [&mut p[..]], &[&[0.5][..]], &names, &mut opt).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25 → update 0.5/(0.5+1e-8)
        let x1 = 1.0 - 0.05 * (0.5 / (0.5 + 1e-8));
        assert!((p[0] - x1).abs() < 1e-15);
        step_optimizer(&mut [&mut p[..]], &[&[-0.25][..]], &names, &mut opt).unwrap();
        let m2 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let mh = m2 / (1.0 - 0.81);
        let vh = v2 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 - 0.1 * (mh / (vh.sqrt() + 1e-8));
        assert!((p[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = vec![0.0];
        let mut opt = OptimizerState::new(OptimizerConfig::with_schedule(Schedule::new(1e-3, 1e-5, 1, 10)), &[1]);
        let names = vec!["trunk3.weight".to_string()];
        let err = step_optimizer(&mut [&mut p[..]], &[&[f64::NAN][..]], &names, &mut opt).unwrap_err();
        assert!(err.to_string().contains("trunk3.weight"));
    }

    fn entry(w: usize, h: usize, cache: Option<Vec<f64>>) -> DatabaseEntry {
        let kf = Keyframe::new(
            Grid::filled(w, h, [0.5; 3]),
            Grid::filled(w, h, 1.0),
            Pose::identity(),
            Grid::filled(w, h, true),
        )
        .unwrap();
        let mut e = DatabaseEntry::new(kf, true, vec![0], EntryKind::Neighbor);
        if let Some(c) = cache {
            e.loss_cache.data = c;
        }
        e
    }

    #[test]
    fn equal_losses_give_uniform_plan() {
        let db = vec![entry(2, 2, Some(vec![0.3; 4])), entry(2, 2, Some(vec![0.3; 4]))];
        let plan = information_gain_plan(&db, &[1], 1);
        assert_eq!(plan.entries.len(), 2);
        for e in &plan.entries {
            for &w in &e.weights {
                assert!((w - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn concentrated_loss_weight() {
        let db = vec![entry(3, 2, Some(vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0]))];
        let plan = information_gain_plan(&db, &[0], 0);
        let p = 6.0;
        assert!((plan.entries[0].weights[2] - (0.8 + 0.2 / p)).abs() < 1e-15);
        assert!((plan.entries[0].weights[0] - 0.2 / p).abs() < 1e-15);
    }

    #[test]
    fn window_zero_covers_only_new() {
        let db = vec![entry(2, 2, Some(vec![0.1; 4])), entry(2, 2, None)];
        let plan = information_gain_plan(&db, &[1], 0);
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].keyframe, 1);
        assert_eq!(plan.entries[0].budget, 2.0);
        assert!(plan.entries[0].weights.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn unknown_entries_take_mean_of_known() {
        let db = vec![entry(2, 1, Some(vec![1.0, f64::NAN]))];
        let plan = information_gain_plan(&db, &[0], 0);
        assert!((plan.entries[0].weights[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sampler_respects_budget_and_zero_weights() {
        let plan = SamplingPlan {
            entries: vec![
                PlanEntry {
                    keyframe: 0,
                    budget: 2.0,
                    weights: vec![0.0, 1.0, 0.0],
                },
                PlanEntry {
                    keyframe: 3,
                    budget: 1.0,
                    weights: vec![0.5, 0.0, 0.5],
                },
            ],
        };
        let s = PlanSampler::new(&plan, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rays = s.draw(&mut rng);
        assert_eq!(rays.iter().filter(|r| r.frame == 0).count(), 20);
        assert!(rays.iter().filter(|r| r.frame == 0).all(|r| r.pixel == 1));
        assert!(rays.iter().filter(|r| r.frame == 3).all(|r| r.pixel != 1));
    }
}
