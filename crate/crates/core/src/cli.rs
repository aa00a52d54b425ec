//! Run orchestration: `init`, `extend`, `render` and `eval` over an explicit
//! run directory.
//!
//! Run directory layout:
//! ```text
//! config.txt            resolved configuration (every key, exact floats)
//! scene.txt             oracle scene, when the run has one
//! state.txt             active block, frame counter, last camera center
//! blocks/NNN.tpf        one checkpoint per block
//! database/index.txt    one `entry = index kind depth_supervised blocks` line per keyframe
//! database/poses.txt    keyframe poses
//! database/NNNN_*.png|pfm  image, depth, mask and loss cache per keyframe
//! frames/               per extension frame: render, depth, alpha, refined view
//! eval/                 renders from the final state and report.txt
//! manifest.txt          formats, artifacts and timings
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::camera::{spherical_neighbor_pose, validate_trajectory, Intrinsics, Pose, SphericalOffset, DEFAULT_SMOOTHNESS_THRESHOLD};
use crate::dibr::{build_supporting_database, DatabaseOptions, HoleFiller, Keyframe, NearestFiller, OracleFiller};
use crate::field::{aggregate_volume, backproject_features, handcrafted_features, AxisMlp, Bounds, FieldConfig, TriPlaneField};
use crate::grid::{Grid, Mask};
use crate::io::config::KeyValues;
use crate::io::{checkpoint, pfm, png, trajectory, write_atomic};
use crate::metrics::{depth_error, flow_warp_error, psnr, round_trip_mask, FrameMetrics, MetricReport};
use crate::refine::refiner_by_name;
use crate::render::{render_view, RenderConfig, RenderOutput};
use crate::synth::{oracle_flow, render_oracle, OracleScene};
use crate::train::{extend_scene, train_initial, DatabaseEntry, EntryKind, LossConfig, SceneState, TrainConfig};
use crate::{Error, Result};

pub const RUN_FORMAT: &str = "trifield-run-1";
pub const DATABASE_FORMAT: &str = "trifield-database-1";
pub const TRAJECTORY_FORMAT: &str = "trifield-trajectory-1";
pub const REPORT_FORMAT: &str = "trifield-report-1";

/// How the first block's planes start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Random,
    /// Planes from back-projected image features pooled along each axis.
    Backproject,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneSource {
    Oracle(OracleScene),
    /// A single posed image with depth.
    External { image: PathBuf, depth: PathBuf },
}

/// Parsed run configuration. `to_kv` writes every key, so a resolved copy
/// parses back to the same values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: SceneSource,
    pub camera: Intrinsics,
    pub initial_pose: Pose,
    pub neighbors: usize,
    pub neighbor_radius: f64,
    pub neighbor_tilt: f64,
    pub footprint_radius: usize,
    pub target_distance: Option<f64>,
    pub block_center: Vector3<f64>,
    pub init_mode: InitMode,
    pub refiner: String,
    pub lowalpha_threshold: f64,
    pub heldout: Vec<SphericalOffset>,
    pub train: TrainConfig,
}

fn vec3(kv: &KeyValues, key: &str) -> Result<Option<Vector3<f64>>> {
    match kv.get_vec(key)? {
        None => Ok(None),
        Some(v) if v.len() == 3 => Ok(Some(Vector3::new(v[0], v[1], v[2]))),
        Some(v) => Err(Error::Config(format!("`{key}` needs 3 numbers, found {}", v.len()))),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// `base` resolves relative paths (the directory holding the config).
    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self> {
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let source = match (kv.get_str("scene"), kv.get_str("image"), kv.get_str("depth")) {
            (Some("courtyard"), _, _) => SceneSource::Oracle(OracleScene::courtyard()),
            (Some(path), _, _) => SceneSource::Oracle(OracleScene::from_config(&KeyValues::load(&resolve(path))?)?),
            (None, Some(img), Some(d)) => SceneSource::External {
                image: resolve(img),
                depth: resolve(d),
            },
            _ => return Err(Error::Config("config needs `scene`, or both `image` and `depth`".into())),
        };
        let width = kv.get_or("width", 128usize)?;
        let height = kv.get_or("height", 128usize)?;
        let focal = kv.get_or("focal", 0.86 * width as f64)?;
        let camera = Intrinsics::centered(focal, width, height)?;
        let initial_pose = match kv.get_vec("initial_pose")? {
            None => Pose::identity(),
            Some(v) => {
                let arr: [f64; 12] = v
                    .try_into()
                    .map_err(|_| Error::Config("`initial_pose` needs 12 numbers (row-major [R | t])".into()))?;
                Pose::from_row_major(&arr)?
            }
        };
        let neighbors = kv.get_or("neighbors", crate::dibr::DEFAULT_NEIGHBOR_COUNT)?;
        if neighbors == 0 {
            return Err(Error::Config("`neighbors` must be at least 1".into()));
        }
        let d = FieldConfig::full_scale();
        let field = FieldConfig {
            resolution: kv.get_or("resolution", d.resolution)?,
            features: kv.get_or("features", d.features)?,
            hidden: kv.get_or("hidden", d.hidden)?,
            layers: kv.get_or("layers", d.layers)?,
            pos_freqs: kv.get_or("pos_freqs", d.pos_freqs)?,
            dir_freqs: kv.get_or("dir_freqs", d.dir_freqs)?,
        };
        field.validate()?;
        let rd = RenderConfig::default();
        let background = match kv.get_vec("background")? {
            None => rd.background,
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(_) => return Err(Error::Config("`background` needs 3 numbers".into())),
        };
        let render = RenderConfig {
            samples: kv.get_or("samples", rd.samples)?,
            near: kv.get_or("near", rd.near)?,
            far: kv.get_or("far", rd.far)?,
            background,
            early_stop: kv.get_or("eval_early_stop", 0.0)?,
        };
        if render.samples == 0 || !(render.near >= 0.0 && render.far > render.near) {
            return Err(Error::Config("need samples ≥ 1 and 0 ≤ near < far".into()));
        }
        let t = TrainConfig::default();
        let train = TrainConfig {
            field,
            render,
            loss: LossConfig {
                lambda_depth: kv.get_or("lambda_depth", t.loss.lambda_depth)?,
                lambda_depth_final: kv.get_or("lambda_depth_final", t.loss.lambda_depth_final)?,
            },
            seed: kv.get_or("seed", t.seed)?,
            init_iterations: kv.get_or("init_iterations", t.init_iterations)?,
            init_rays: kv.get_or("init_rays", t.init_rays)?,
            lr_peak: kv.get_or("lr_peak", t.lr_peak)?,
            lr_final: kv.get_or("lr_final", t.lr_final)?,
            lr_warmup: kv.get_or("lr_warmup", t.lr_warmup)?,
            extend_iterations: kv.get_or("extend_iterations", t.extend_iterations)?,
            extend_rays: kv.get_or("extend_rays", t.extend_rays)?,
            extend_lr_peak: kv.get_or("extend_lr_peak", t.extend_lr_peak)?,
            extend_warmup: kv.get_or("extend_warmup", t.extend_warmup)?,
            spawn_iterations: kv.get_or("spawn_iterations", t.spawn_iterations)?,
            window: kv.get_or("window", t.window)?,
            clip: kv.get_or("clip", t.clip)?,
            weight_decay: kv.get_or("weight_decay", t.weight_decay)?,
            plane_lr_scale: kv.get_or("plane_lr_scale", t.plane_lr_scale)?,
            early_stop: kv.get_or("early_stop", t.early_stop)?,
            chunk: kv.get_or("chunk", t.chunk)?,
            block_half_extent: kv.get_or("block_half_extent", t.block_half_extent)?,
        };
        if train.init_rays == 0 || train.extend_rays == 0 || train.chunk == 0 {
            return Err(Error::Config("ray counts and chunk size must be positive".into()));
        }
        if train.loss.lambda_depth < 0.0 || train.loss.lambda_depth_final < 0.0 {
            return Err(Error::Config("depth weights must be nonnegative".into()));
        }
        let init_mode = match kv.get_str("init_mode").unwrap_or("random") {
            "random" => InitMode::Random,
            "backproject" => InitMode::Backproject,
            other => return Err(Error::Config(format!("unknown init_mode {other:?}"))),
        };
        let heldout = if kv.get_str("heldout").is_some() {
            kv.get_all("heldout")
                .map(|v| {
                    let f = crate::io::config::parse_floats("heldout", v)?;
                    if f.len() != 3 {
                        return Err(Error::Config("`heldout` needs theta phi r".into()));
                    }
                    SphericalOffset::new(f[0], f[1], f[2])
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![SphericalOffset::new(1.3, 0.4, 0.2)?]
        };
        Ok(RunConfig {
            source,
            camera,
            initial_pose,
            neighbors,
            neighbor_radius: kv.get_or("neighbor_radius", 0.3)?,
            neighbor_tilt: kv.get_or("neighbor_tilt", 0.35)?,
            footprint_radius: kv.get_or("footprint_radius", 1usize)?,
            target_distance: kv.get("target_distance")?,
            block_center: vec3(kv, "block_center")?.unwrap_or_else(|| initial_pose.center()),
            init_mode,
            refiner: kv.get_str("refiner").unwrap_or("identity").to_string(),
            lowalpha_threshold: kv.get_or("lowalpha_threshold", 0.5)?,
            heldout,
            train,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every key with its effective value. Scene and input paths are given
    /// as written into the run directory.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        match &self.source {
            SceneSource::Oracle(_) => kv.push("scene", "scene.txt"),
            SceneSource::External { .. } => {
                kv.push("image", "input_image.png");
                kv.push("depth", "input_depth.pfm");
            }
        }
        let t = &self.train;
        let f = &t.field;
        kv.push("width", self.camera.width);
        kv.push("height", self.camera.height);
        kv.push("focal", format!("{:?}", self.camera.fx));
        kv.push("initial_pose", join(&self.initial_pose.to_row_major()));
        kv.push("neighbors", self.neighbors);
        kv.push("neighbor_radius", format!("{:?}", self.neighbor_radius));
        kv.push("neighbor_tilt", format!("{:?}", self.neighbor_tilt));
        kv.push("footprint_radius", self.footprint_radius);
        if let Some(d) = self.target_distance {
            kv.push("target_distance", format!("{d:?}"));
        }
        kv.push("resolution", f.resolution);
        kv.push("features", f.features);
        kv.push("hidden", f.hidden);
        kv.push("layers", f.layers);
        kv.push("pos_freqs", f.pos_freqs);
        kv.push("dir_freqs", f.dir_freqs);
        kv.push(
            "init_mode",
            match self.init_mode {
                InitMode::Random => "random",
                InitMode::Backproject => "backproject",
            },
        );
        kv.push("block_center", join(self.block_center.as_slice()));
        kv.push("block_half_extent", format!("{:?}", t.block_half_extent));
        kv.push("samples", t.render.samples);
        kv.push("near", format!("{:?}", t.render.near));
        kv.push("far", format!("{:?}", t.render.far));
        kv.push("background", join(&t.render.background));
        kv.push("eval_early_stop", format!("{:?}", t.render.early_stop));
        kv.push("seed", t.seed);
        kv.push("init_iterations", t.init_iterations);
        kv.push("init_rays", t.init_rays);
        kv.push("lr_peak", format!("{:?}", t.lr_peak));
        kv.push("lr_final", format!("{:?}", t.lr_final));
        kv.push("lr_warmup", t.lr_warmup);
        kv.push("lambda_depth", format!("{:?}", t.loss.lambda_depth));
        kv.push("lambda_depth_final", format!("{:?}", t.loss.lambda_depth_final));
        kv.push("extend_iterations", t.extend_iterations);
        kv.push("extend_rays", t.extend_rays);
        kv.push("extend_lr_peak", format!("{:?}", t.extend_lr_peak));
        kv.push("extend_warmup", t.extend_warmup);
        kv.push("spawn_iterations", t.spawn_iterations);
        kv.push("window", t.window);
        kv.push("clip", format!("{:?}", t.clip));
        kv.push("weight_decay", format!("{:?}", t.weight_decay));
        kv.push("plane_lr_scale", format!("{:?}", t.plane_lr_scale));
        kv.push("early_stop", format!("{:?}", t.early_stop));
        kv.push("chunk", t.chunk);
        kv.push("refiner", &self.refiner);
        kv.push("lowalpha_threshold", format!("{:?}", self.lowalpha_threshold));
        for h in &self.heldout {
            kv.push("heldout", join(&[h.theta, h.phi, h.r]));
        }
        kv
    }

    pub fn oracle(&self) -> Option<&OracleScene> {
        match &self.source {
            SceneSource::Oracle(s) => Some(s),
            SceneSource::External { .. } => None,
        }
    }

    /// Render settings for evaluation and extension renders.
    pub fn eval_render(&self) -> RenderConfig {
        self.train.render
    }

    /// Held-out poses around the initial camera.
    pub fn heldout_poses(&self, initial: &Keyframe) -> Result<Vec<Pose>> {
        let target = self.look_at_distance(initial)?;
        self.heldout
            .iter()
            .map(|o| spherical_neighbor_pose(&self.initial_pose, o, target))
            .collect()
    }

    fn look_at_distance(&self, initial: &Keyframe) -> Result<f64> {
        match self.target_distance {
            Some(d) => Ok(d),
            None => Ok(2.0 * initial
                .mean_depth()
                .ok_or_else(|| Error::domain("initial keyframe has no finite depth"))?),
        }
    }
}

/// Process exit code for an error: 2 usage or input, 3 corrupt state,
/// 4 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Corrupt { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Any failure reading persisted state is reported as corruption.
fn corrupt_on_error<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Corrupt { .. } => e,
        other => Error::corrupt(path, other.to_string()),
    })
}

fn block_path(run: &Path, b: usize) -> PathBuf {
    run.join("blocks").join(format!("{b:03}.tpf"))
}

fn entry_path(run: &Path, k: usize, what: &str) -> PathBuf {
    run.join("database").join(format!("{k:04}_{what}"))
}

/// Rounds the in-memory state to exactly what a save/load round trip
/// yields, so continuing in-process and resuming from disk agree.
pub fn quantize_state(state: &mut SceneState) {
    for b in &mut state.blocks {
        checkpoint::quantize(b);
    }
    for e in &mut state.database {
        e.loss_cache = pfm_round(&e.loss_cache);
    }
}

fn pfm_round(g: &Grid<f64>) -> Grid<f64> {
    g.map(|&v| if v.is_finite() { v as f32 as f64 } else { v })
}

/// Writes blocks, database and state. Keyframe images, depths and masks
/// are immutable once written.
pub fn save_state(run: &Path, state: &SceneState) -> Result<()> {
    mkdir(&run.join("blocks"))?;
    mkdir(&run.join("database"))?;
    for (b, field) in state.blocks.iter().enumerate() {
        checkpoint::write(&block_path(run, b), field)?;
    }
    let mut index = KeyValues::default();
    index.push("format", DATABASE_FORMAT);
    for (k, e) in state.database.iter().enumerate() {
        let img = entry_path(run, k, "image.png");
        if !img.exists() {
            png::write_color(&img, &e.keyframe.image)?;
            pfm::write(&entry_path(run, k, "depth.pfm"), &e.keyframe.depth)?;
            png::write_mask(&entry_path(run, k, "mask.png"), &e.keyframe.valid_mask)?;
        }
        pfm::write(&entry_path(run, k, "loss.pfm"), &e.loss_cache)?;
        let blocks: Vec<String> = e.blocks.iter().map(|b| b.to_string()).collect();
        index.push(
            "entry",
            format!("{k} {} {} {}", e.kind.as_str(), e.depth_supervised, blocks.join(",")),
        );
    }
    let poses: Vec<Pose> = state.database.iter().map(|e| e.keyframe.pose).collect();
    trajectory::write(&run.join("database").join("poses.txt"), &poses)?;
    write_text(&run.join("database").join("index.txt"), &index.to_text())?;
    let mut st = KeyValues::default();
    st.push("format", RUN_FORMAT);
    st.push("blocks", state.blocks.len());
    st.push("active_block", state.active_block);
    st.push("frames_added", state.frames_added);
    st.push("last_center", join(state.last_center.as_slice()));
    write_text(&run.join("state.txt"), &st.to_text())
}

/// Loads the resolved config and the scene state of a run directory.
pub fn load_state(run: &Path) -> Result<(RunConfig, SceneState)> {
    let state_path = run.join("state.txt");
    if !state_path.exists() {
        return Err(Error::domain(format!("{} is not an initialized run directory", run.display())));
    }
    let config = RunConfig::load(&run.join("config.txt"))?;
    let st = corrupt_on_error(&state_path, KeyValues::load(&state_path))?;
    if st.get_str("format") != Some(RUN_FORMAT) {
        return Err(Error::corrupt(&state_path, "unknown run format"));
    }
    let get = |k: &str| -> Result<usize> {
        corrupt_on_error(&state_path, st.get::<usize>(k))?.ok_or_else(|| Error::corrupt(&state_path, format!("missing `{k}`")))
    };
    let nblocks = get("blocks")?;
    let active = get("active_block")?;
    let frames_added = get("frames_added")?;
    let last_center = corrupt_on_error(&state_path, vec3(&st, "last_center"))?
        .ok_or_else(|| Error::corrupt(&state_path, "missing `last_center`"))?;
    if nblocks == 0 || active >= nblocks {
        return Err(Error::corrupt(&state_path, "block count and active block disagree"));
    }
    let f = &config.train.field;
    let mut blocks = Vec::with_capacity(nblocks);
    for b in 0..nblocks {
        let p = block_path(run, b);
        let field = corrupt_on_error(&p, checkpoint::read(&p, f.pos_freqs, f.dir_freqs))?;
        if field.config != *f {
            return Err(Error::corrupt(&p, "checkpoint shape differs from the run configuration"));
        }
        blocks.push(field);
    }
    let index_path = run.join("database").join("index.txt");
    let index = corrupt_on_error(&index_path, KeyValues::load(&index_path))?;
    if index.get_str("format") != Some(DATABASE_FORMAT) {
        return Err(Error::corrupt(&index_path, "unknown database format"));
    }
    let poses_path = run.join("database").join("poses.txt");
    let poses = corrupt_on_error(&poses_path, trajectory::read(&poses_path))?;
    let mut database = Vec::new();
    for (k, line) in index.get_all("entry").enumerate() {
        let bad = |why: &str| Error::corrupt(&index_path, format!("entry {k}: {why}"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0].parse::<usize>().ok() != Some(k) {
            return Err(bad("malformed line"));
        }
        let kind = EntryKind::parse(parts[1]).ok_or_else(|| bad("unknown kind"))?;
        let supervised: bool = parts[2].parse().map_err(|_| bad("bad depth flag"))?;
        let assigned: Vec<usize> = parts[3]
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad block list"))?;
        if assigned.iter().any(|&b| b >= nblocks) {
            return Err(bad("block index out of range"));
        }
        let pose = *poses.get(k).ok_or_else(|| bad("missing pose"))?;
        let img_p = entry_path(run, k, "image.png");
        let image = corrupt_on_error(&img_p, png::read_color(&img_p))?;
        let depth_p = entry_path(run, k, "depth.pfm");
        let depth = corrupt_on_error(&depth_p, pfm::read(&depth_p))?;
        let mask_p = entry_path(run, k, "mask.png");
        let mask = corrupt_on_error(&mask_p, png::read_mask(&mask_p))?;
        let loss_p = entry_path(run, k, "loss.pfm");
        let loss = corrupt_on_error(&loss_p, pfm::read(&loss_p))?;
        let keyframe = corrupt_on_error(&img_p, Keyframe::new(image, depth, pose, mask))?;
        if !loss.same_shape(&keyframe.image) {
            return Err(Error::corrupt(&loss_p, "loss cache shape differs from the image"));
        }
        let mut e = DatabaseEntry::new(keyframe, supervised, assigned, kind);
        e.loss_cache = loss;
        database.push(e);
    }
    if database.is_empty() {
        return Err(Error::corrupt(&index_path, "database is empty"));
    }
    let mut state = SceneState::new(blocks.remove(0), database, config.camera, config.train.clone())?;
    state.blocks.extend(blocks);
    state.active_block = active;
    state.frames_added = frames_added;
    state.last_center = last_center;
    Ok((config, state))
}

/// Updates `manifest.txt`: formats, seed, the artifact list and the timing
/// of `phase` (earlier timings are kept).
fn write_manifest(run: &Path, config: &RunConfig, phase: &str, seconds: f64) -> Result<()> {
    let path = run.join("manifest.txt");
    let old = if path.exists() { KeyValues::load(&path)? } else { KeyValues::default() };
    let mut kv = KeyValues::default();
    kv.push("format.run", RUN_FORMAT);
    kv.push("format.checkpoint", std::str::from_utf8(checkpoint::MAGIC).unwrap_or("TPF1"));
    kv.push("format.database", DATABASE_FORMAT);
    kv.push("format.trajectory", TRAJECTORY_FORMAT);
    kv.push("format.report", REPORT_FORMAT);
    kv.push("format.depth", "PFM little-endian f32, infinity as 1e30");
    kv.push("format.image", "PNG 8-bit RGB");
    kv.push("format.mask", "PNG 8-bit gray, 255 = valid");
    kv.push("seed", config.train.seed);
    kv.push("config", "config.txt");
    for (k, v) in old.entries() {
        if k.starts_with("time.") && k != &format!("time.{phase}") {
            kv.push(k, v);
        }
    }
    kv.push(&format!("time.{phase}"), format!("{seconds:.3}"));
    let mut files = Vec::new();
    collect_files(run, run, &mut files)?;
    files.sort();
    for f in files {
        if f != "manifest.txt" {
            kv.push("artifact", f);
        }
    }
    write_text(&path, &kv.to_text())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if let Ok(rel) = p.strip_prefix(root) {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if !rel.ends_with(".tmp") {
                out.push(rel);
            }
        }
    }
    Ok(())
}

/// Initial keyframe: oracle render or the external image and depth.
fn initial_keyframe(config: &RunConfig) -> Result<Keyframe> {
    match &config.source {
        SceneSource::Oracle(scene) => {
            let kf = render_oracle(scene, &config.initial_pose, &config.camera);
            Keyframe::new(png::quantize(&kf.image), pfm::quantize(&kf.depth), kf.pose, kf.valid_mask)
        }
        SceneSource::External { image, depth } => {
            let img = png::read_color(image)?;
            let d = pfm::read(depth)?;
            if img.width != config.camera.width || img.height != config.camera.height {
                return Err(Error::Config("input image size differs from the configured camera".into()));
            }
            let valid = d.map(|&v| v.is_finite() && v > 0.0);
            Keyframe::new(img, d, config.initial_pose, valid)
        }
    }
}

/// Summary of a finished `init`.
#[derive(Debug, Clone)]
pub struct InitSummary {
    pub keyframes: usize,
    pub final_loss: Option<f64>,
}

/// Builds the supporting database, trains the first block and writes the
/// run directory. A numerical failure still saves the last finite state.
pub fn cmd_init(config_path: &Path, run: &Path, seed: Option<u64>) -> Result<InitSummary> {
    let start = Instant::now();
    let kv = KeyValues::load(config_path)?;
    let mut config = RunConfig::from_kv(&kv, config_path.parent().unwrap_or(Path::new(".")))?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    let initial = initial_keyframe(&config)?;
    mkdir(run)?;
    if run.join("state.txt").exists() {
        for sub in ["blocks", "database", "frames", "eval"] {
            let p = run.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    match &config.source {
        SceneSource::Oracle(scene) => write_text(&run.join("scene.txt"), &scene.to_config().to_text())?,
        SceneSource::External { image, depth } => {
            png::write_color(&run.join("input_image.png"), &png::read_color(image)?)?;
            pfm::write(&run.join("input_depth.pfm"), &pfm::read(depth)?)?;
        }
    }
    write_text(&run.join("config.txt"), &config.to_kv().to_text())?;

    let offsets = SphericalOffset::ring(config.neighbors, config.neighbor_radius, config.neighbor_tilt)?;
    let options = DatabaseOptions {
        footprint_radius: config.footprint_radius,
        target_distance: config.target_distance,
    };
    let oracle_filler;
    let filler: &dyn HoleFiller = match config.oracle() {
        Some(scene) => {
            oracle_filler = OracleFiller { scene };
            &oracle_filler
        }
        None => &NearestFiller,
    };
    let keyframes = build_supporting_database(&initial, &config.camera, &offsets, filler, &options)?;
    let database: Vec<DatabaseEntry> = keyframes
        .into_iter()
        .enumerate()
        .map(|(i, kf)| {
            let kf = Keyframe::new(png::quantize(&kf.image), pfm::quantize(&kf.depth), kf.pose, kf.valid_mask)?;
            let kind = if i == 0 { EntryKind::Initial } else { EntryKind::Neighbor };
            Ok(DatabaseEntry::new(kf, true, vec![0], kind))
        })
        .collect::<Result<_>>()?;

    let bounds = Bounds::new(config.block_center, config.train.block_half_extent)?;
    let bounds = Bounds::from_min_max(&bounds.min(), &bounds.max())?;
    let mut block = TriPlaneField::new_random(config.train.field, bounds, config.train.seed)?;
    if config.init_mode == InitMode::Backproject {
        init_planes_from_features(&mut block, &database, &config)?;
    }
    checkpoint::quantize(&mut block);
    let mut state = SceneState::new(block, database, config.camera, config.train.clone())?;
    let result = train_initial(&mut state, config.train.init_iterations);
    quantize_state(&mut state);
    save_state(run, &state)?;
    write_manifest(run, &config, "init", start.elapsed().as_secs_f64())?;
    let log = result?;
    Ok(InitSummary {
        keyframes: state.database.len(),
        final_loss: log.last().map(|l| l.photometric),
    })
}

fn init_planes_from_features(block: &mut TriPlaneField, database: &[DatabaseEntry], config: &RunConfig) -> Result<()> {
    use rand::SeedableRng;
    let d = block.config.features;
    let keyframes: Vec<Keyframe> = database.iter().map(|e| e.keyframe.clone()).collect();
    let maps: Vec<_> = keyframes.iter().map(|kf| handcrafted_features(kf, d)).collect();
    let volume = backproject_features(&keyframes, &maps, &config.camera, block.config.resolution, &block.bounds)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.train.seed ^ 0xb1a5);
    let mlps = [AxisMlp::random(d, &mut rng), AxisMlp::random(d, &mut rng), AxisMlp::random(d, &mut rng)];
    let agg = aggregate_volume(&volume, &mlps);
    block.planes = agg.planes;
    Ok(())
}

fn frame_path(run: &Path, f: usize, what: &str) -> PathBuf {
    run.join("frames").join(format!("{f:04}_{what}"))
}

fn write_render(run: &Path, f: usize, out: &RenderOutput, far: f64) -> Result<()> {
    png::write_color(&frame_path(run, f, "render.png"), &out.image)?;
    pfm::write(&frame_path(run, f, "render_depth.pfm"), &out.normalized_depth(1e-3, far))?;
    png::write_gray(&frame_path(run, f, "alpha.png"), &out.alpha)
}

/// Summary of a finished `extend`.
#[derive(Debug, Clone, Default)]
pub struct ExtendSummary {
    pub frames_added: usize,
    pub warnings: usize,
    pub blocks: usize,
}

/// Walks a trajectory, extending the scene one pose at a time. State is
/// saved after every frame; a refiner failure skips the frame with a
/// warning.
pub fn cmd_extend(run: &Path, trajectory_path: &Path, refiner_name: Option<&str>) -> Result<ExtendSummary> {
    let start = Instant::now();
    let poses = trajectory::read(trajectory_path)?;
    let (config, mut state) = load_state(run)?;
    let mut summary = ExtendSummary {
        blocks: state.blocks.len(),
        ..Default::default()
    };
    if poses.is_empty() {
        return Ok(summary);
    }
    let name = refiner_name.unwrap_or(&config.refiner);
    let refiner = refiner_by_name(name, config.oracle(), config.lowalpha_threshold)?;
    if poses.len() >= 2 {
        let smooth = validate_trajectory(&poses, DEFAULT_SMOOTHNESS_THRESHOLD)?;
        let rough = smooth.iter().filter(|s| !**s).count();
        if rough > 0 {
            eprintln!("warning: {rough} trajectory step(s) move against the viewing direction");
            summary.warnings += rough;
        }
    }
    mkdir(&run.join("frames"))?;
    let traj_path = run.join("frames").join("trajectory.txt");
    let mut accepted = if traj_path.exists() {
        corrupt_on_error(&traj_path, trajectory::read(&traj_path))?
    } else {
        Vec::new()
    };
    let log_path = run.join("frames").join("extend_log.txt");
    let mut log = if log_path.exists() {
        KeyValues::load(&log_path)?
    } else {
        let mut kv = KeyValues::default();
        kv.push("format", "trifield-extend-log-1");
        kv
    };
    for (i, pose) in poses.iter().enumerate() {
        match extend_scene(&mut state, pose, refiner.as_ref(), "") {
            Ok(out) => {
                let f = state.frames_added - 1;
                write_render(run, f, &out.render, config.train.render.far)?;
                png::write_color(&frame_path(run, f, "refined.png"), &out.refined.image)?;
                if let Some(d) = &out.refined.depth {
                    pfm::write(&frame_path(run, f, "refined_depth.pfm"), d)?;
                }
                accepted.push(*pose);
                let first = out.log.first().map_or(f64::NAN, |l| l.photometric);
                let last = out.log.last().map_or(f64::NAN, |l| l.photometric);
                log.push(
                    "frame",
                    format!(
                        "{f:04} block {} spawned {} loss_first {first:.6} loss_last {last:.6}",
                        state.active_block,
                        out.spawned_block.is_some()
                    ),
                );
                summary.frames_added += 1;
                quantize_state(&mut state);
                save_state(run, &state)?;
                trajectory::write(&traj_path, &accepted)?;
                write_text(&log_path, &log.to_text())?;
                write_block_map(run, &state)?;
            }
            Err(Error::Refiner(msg)) => {
                eprintln!("warning: pose {i} skipped, refiner failed: {msg}");
                log.push("skipped", format!("pose {i}: {msg}"));
                write_text(&log_path, &log.to_text())?;
                summary.warnings += 1;
            }
            Err(e) => {
                quantize_state(&mut state);
                save_state(run, &state)?;
                write_manifest(run, &config, "extend", start.elapsed().as_secs_f64())?;
                return Err(e);
            }
        }
    }
    summary.blocks = state.blocks.len();
    write_manifest(run, &config, "extend", start.elapsed().as_secs_f64())?;
    Ok(summary)
}

fn write_block_map(run: &Path, state: &SceneState) -> Result<()> {
    let mut kv = KeyValues::default();
    kv.push("blocks", state.blocks.len());
    kv.push("active_block", state.active_block);
    for (b, f) in state.blocks.iter().enumerate() {
        kv.push(
            "block",
            format!("{b} center {} half_extent {:?}", join(f.bounds.center.as_slice()), f.bounds.half_extent),
        );
    }
    for (k, e) in state.database.iter().enumerate() {
        let blocks: Vec<String> = e.blocks.iter().map(|b| b.to_string()).collect();
        kv.push("keyframe", format!("{k} {} {}", e.kind.as_str(), blocks.join(",")));
    }
    write_text(&run.join("frames").join("blocks.txt"), &kv.to_text())
}

/// Renders every pose of a trajectory into `renders/`.
pub fn cmd_render(run: &Path, trajectory_path: &Path) -> Result<usize> {
    let start = Instant::now();
    let poses = trajectory::read(trajectory_path)?;
    let (config, state) = load_state(run)?;
    let dir = run.join("renders");
    mkdir(&dir)?;
    let rc = config.eval_render();
    for (i, pose) in poses.iter().enumerate() {
        let out = render_view(&state.blocks, pose, &config.camera, &rc)?;
        png::write_color(&dir.join(format!("{i:04}.png")), &out.image)?;
        pfm::write(&dir.join(format!("{i:04}_depth.pfm")), &out.normalized_depth(1e-3, rc.far))?;
        png::write_gray(&dir.join(format!("{i:04}_alpha.png")), &out.alpha)?;
    }
    write_manifest(run, &config, "render", start.elapsed().as_secs_f64())?;
    Ok(poses.len())
}

fn mask_and(a: &Mask, b: impl Fn(usize) -> bool) -> Mask {
    Grid {
        width: a.width,
        height: a.height,
        data: a.data.iter().enumerate().map(|(i, &v)| v && b(i)).collect(),
    }
}

/// Renders the extension frames, initial views and held-out views from the
/// current state and scores them. PSNR, depth error and flow-warping error
/// need the oracle; without it they are reported as unavailable.
pub fn cmd_eval(run: &Path) -> Result<MetricReport> {
    let start = Instant::now();
    let (config, state) = load_state(run)?;
    let traj_path = run.join("frames").join("trajectory.txt");
    let frames = if traj_path.exists() {
        corrupt_on_error(&traj_path, trajectory::read(&traj_path))?
    } else {
        Vec::new()
    };
    let scene = config.oracle();
    if frames.is_empty() && scene.is_none() {
        return Err(Error::domain("nothing to evaluate: no extension frames and no oracle"));
    }
    let dir = run.join("eval");
    mkdir(&dir)?;
    let rc = config.eval_render();
    let cam = config.camera;
    let mut report = MetricReport::default();
    let mut rendered = Vec::with_capacity(frames.len());
    for (i, pose) in frames.iter().enumerate() {
        let out = render_view(&state.blocks, pose, &cam, &rc)?;
        png::write_color(&dir.join(format!("{i:04}.png")), &out.image)?;
        let depth = out.normalized_depth(1e-3, rc.far);
        pfm::write(&dir.join(format!("{i:04}_depth.pfm")), &depth)?;
        let (p, de) = match scene {
            Some(s) => {
                let truth = render_oracle(s, pose, &cam);
                let de = depth_error(&depth, &truth.depth, None).ok();
                (Some(psnr(&out.image, &truth.image, None)?), de)
            }
            None => (None, None),
        };
        report.frames.push(FrameMetrics {
            name: format!("f{i:04}"),
            psnr: p,
            depth_error: de,
            pixels: cam.num_pixels(),
        });
        rendered.push(out.image);
    }
    report.summarize();
    if let (Some(s), true) = (scene, frames.len() >= 2) {
        let mut flows = Vec::new();
        let mut masks = Vec::new();
        let mut truths = Vec::new();
        for (t, w) in frames.windows(2).enumerate() {
            let fwd = oracle_flow(s, &w[0], &w[1], &cam);
            let bwd = oracle_flow(s, &w[1], &w[0], &cam);
            let rt = round_trip_mask(&fwd.flow, &bwd.flow, 1.0);
            masks.push(mask_and(&rt, |i| !fwd.occluded.data[i]));
            flows.push(fwd.flow);
            if t == 0 {
                truths.push(render_oracle(s, &w[0], &cam).image);
            }
            truths.push(render_oracle(s, &w[1], &cam).image);
        }
        report.flow_warp_error = flow_warp_error(&rendered, &flows, &masks).ok();
        report.flow_warp_floor = flow_warp_error(&truths, &flows, &masks).ok();
    }
    if let Some(s) = scene {
        let mut views = Vec::new();
        for (k, e) in state.database.iter().enumerate() {
            if e.kind == EntryKind::Extension {
                continue;
            }
            let out = render_view(&state.blocks, &e.keyframe.pose, &cam, &rc)?;
            let truth = render_oracle(s, &e.keyframe.pose, &cam);
            let v = psnr(&out.image, &truth.image, None)?;
            report.extra.push((format!("initial_view.{k:02}.psnr"), format!("{v:.6}")));
            views.push(v);
        }
        if !views.is_empty() {
            report.initial_view_psnr = Some(views.iter().sum::<f64>() / views.len() as f64);
        }
        let initial = initial_keyframe(&config)?;
        let mut held = Vec::new();
        for (h, pose) in config.heldout_poses(&initial)?.iter().enumerate() {
            let out = render_view(&state.blocks, pose, &cam, &rc)?;
            png::write_color(&dir.join(format!("heldout_{h:02}.png")), &out.image)?;
            let v = psnr(&out.image, &render_oracle(s, pose, &cam).image, None)?;
            report.extra.push((format!("heldout.{h:02}.psnr"), format!("{v:.6}")));
            held.push(v);
        }
        if !held.is_empty() {
            report
                .extra
                .push(("heldout_psnr".into(), format!("{:.6}", held.iter().sum::<f64>() / held.len() as f64)));
        }
    }
    report.extra.push(("blocks".into(), state.blocks.len().to_string()));
    let mut text = format!("format = {REPORT_FORMAT}\n");
    text.push_str(&report.to_text());
    write_text(&dir.join("report.txt"), &text)?;
    write_manifest(run, &config, "eval", start.elapsed().as_secs_f64())?;
    Ok(report)
}

#[derive(Parser, Debug)]
#[command(name = "trifield", version, about = "Tri-plane radiance fields grown frame by frame")]
pub struct Cli {
    /// Worker threads (falls back to ENGINE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the supporting database and fit the first block.
    Init(InitArgs),
    /// Extend the scene along a trajectory.
    Extend(ExtendArgs),
    /// Render a trajectory from the current state.
    Render(RenderArgs),
    /// Score renders against the oracle and write the report.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExtendArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
    /// identity, oracle or lowalpha; defaults to the configured refiner.
    #[arg(long)]
    pub refiner: Option<String>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub trajectory: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("ENGINE_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("ENGINE_THREADS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = configure_threads(cli.threads).and_then(|_| match cli.command {
        Command::Init(a) => cmd_init(&a.config, &a.run_dir, a.seed).map(|s| {
            println!("initialized {} keyframes in {}", s.keyframes, a.run_dir.display());
            0
        }),
        Command::Extend(a) => cmd_extend(&a.run_dir, &a.trajectory, a.refiner.as_deref()).map(|s| {
            println!("added {} frames, {} blocks, {} warnings", s.frames_added, s.blocks, s.warnings);
            0
        }),
        Command::Render(a) => cmd_render(&a.run_dir, &a.trajectory).map(|n| {
            println!("rendered {n} views");
            0
        }),
        Command::Eval(a) => cmd_eval(&a.run_dir).map(|r| {
            print!("{}", r.table());
            0
        }),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
