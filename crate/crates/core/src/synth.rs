//! Procedural oracle scenes: textured axis-aligned boxes and spheres under a
//! directional light, rendered by exact ray casting. Every test and
//! acceptance run measures against these renders, depths and flows.

use nalgebra::{Vector2, Vector3};

use crate::camera::{pixel_direction, Intrinsics, Pose};
use crate::dibr::Keyframe;
use crate::grid::{ColorImage, DepthMap, FlowField, Grid, Mask};
use crate::io::config::{parse_floats, KeyValues};
use crate::{Error, Result};

/// Solid value-noise texture modulating a base albedo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub albedo: [f64; 3],
    /// Peak relative albedo change.
    pub amplitude: f64,
    /// Noise lattice cells per world unit.
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { min: Vector3<f64>, max: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Unit direction pointing toward the light.
    pub light: Vector3<f64>,
    pub ambient: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

impl OracleScene {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3], light: Vector3<f64>, ambient: f64, seed: u64) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            let ok = match p.shape {
                Shape::Box { min, max } => (0..3).all(|k| max[k] > min[k]),
                Shape::Sphere { radius, .. } => radius > 0.0,
            };
            if !ok {
                return Err(Error::domain(format!("primitive {i} is degenerate")));
            }
        }
        if light.norm() == 0.0 {
            return Err(Error::domain("light direction must be nonzero"));
        }
        Ok(OracleScene {
            primitives,
            background,
            light: light.normalize(),
            ambient,
            seed,
        })
    }

    /// Open courtyard: a ground slab, six boxes and a sphere within
    /// half-extent 4. World +y points down, matching an upright camera.
    pub fn courtyard() -> Self {
        let tex = |r, g, b| Texture {
            albedo: [r, g, b],
            amplitude: 0.15,
            frequency: 1.5,
        };
        let boxed = |min: [f64; 3], max: [f64; 3], t| Primitive {
            shape: Shape::Box {
                min: Vector3::from(min),
                max: Vector3::from(max),
            },
            texture: t,
        };
        let primitives = vec![
            boxed([-4.0, 1.0, -4.0], [4.0, 1.3, 4.0], tex(0.45, 0.42, 0.36)),
            boxed([-1.7, -0.2, 1.0], [-0.6, 1.0, 2.0], tex(0.75, 0.35, 0.3)),
            boxed([0.4, 0.2, 1.4], [1.4, 1.0, 2.3], tex(0.3, 0.55, 0.75)),
            boxed([-0.6, -0.7, 2.8], [0.5, 1.0, 3.6], tex(0.8, 0.75, 0.4)),
            boxed([2.0, -0.3, -0.2], [3.0, 1.0, 1.0], tex(0.4, 0.7, 0.4)),
            boxed([-3.3, 0.0, -0.6], [-2.2, 1.0, 0.6], tex(0.65, 0.45, 0.7)),
            boxed([-0.5, 0.4, -3.6], [0.5, 1.0, -2.8], tex(0.7, 0.6, 0.5)),
            Primitive {
                shape: Shape::Sphere {
                    center: Vector3::new(1.9, 0.45, 3.0),
                    radius: 0.55,
                },
                texture: tex(0.85, 0.55, 0.25),
            },
        ];
        OracleScene::new(primitives, [0.55, 0.7, 0.9], Vector3::new(0.35, -1.0, -0.45), 0.35, 7)
            .expect("courtyard scene is well formed")
    }

    /// Scene dialect:
    /// ```text
    /// background = r g b
    /// light = x y z
    /// ambient = a
    /// seed = n
    /// box = minx miny minz maxx maxy maxz r g b amplitude frequency
    /// sphere = cx cy cz radius r g b amplitude frequency
    /// ```
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let vec3 = |key: &str, default: [f64; 3]| -> Result<[f64; 3]> {
            match kv.get_vec(key)? {
                None => Ok(default),
                Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                Some(_) => Err(Error::Config(format!("`{key}` needs 3 numbers"))),
            }
        };
        let background = vec3("background", [0.0; 3])?;
        let light = vec3("light", [0.0, -1.0, 0.0])?;
        let ambient = kv.get_or("ambient", 0.35)?;
        let seed = kv.get_or("seed", 0u64)?;
        let mut primitives = Vec::new();
        for v in kv.get_all("box") {
            let n = parse_floats("box", v)?;
            if n.len() != 11 {
                return Err(Error::Config(format!("`box` needs 11 numbers, got {}", n.len())));
            }
            primitives.push(Primitive {
                shape: Shape::Box {
                    min: Vector3::new(n[0], n[1], n[2]),
                    max: Vector3::new(n[3], n[4], n[5]),
                },
                texture: Texture {
                    albedo: [n[6], n[7], n[8]],
                    amplitude: n[9],
                    frequency: n[10],
                },
            });
        }
        for v in kv.get_all("sphere") {
            let n = parse_floats("sphere", v)?;
            if n.len() != 9 {
                return Err(Error::Config(format!("`sphere` needs 9 numbers, got {}", n.len())));
            }
            primitives.push(Primitive {
                shape: Shape::Sphere {
                    center: Vector3::new(n[0], n[1], n[2]),
                    radius: n[3],
                },
                texture: Texture {
                    albedo: [n[4], n[5], n[6]],
                    amplitude: n[7],
                    frequency: n[8],
                },
            });
        }
        if primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        OracleScene::new(primitives, background, Vector3::from(light), ambient, seed)
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let j = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        kv.push("background", j(&self.background));
        kv.push("light", j(self.light.as_slice()));
        kv.push("ambient", self.ambient);
        kv.push("seed", self.seed);
        for p in &self.primitives {
            let t = &p.texture;
            let tail = [t.albedo[0], t.albedo[1], t.albedo[2], t.amplitude, t.frequency];
            match p.shape {
                Shape::Box { min, max } => {
                    let mut v = vec![min.x, min.y, min.z, max.x, max.y, max.z];
                    v.extend_from_slice(&tail);
                    kv.push("box", j(&v));
                }
                Shape::Sphere { center, radius } => {
                    let mut v = vec![center.x, center.y, center.z, radius];
                    v.extend_from_slice(&tail);
                    kv.push("sphere", j(&v));
                }
            }
        }
        kv
    }

    /// Nearest intersection with `t > 0` along a unit-direction ray.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            let hit = match p.shape {
                Shape::Box { min, max } => intersect_box(origin, dir, &min, &max),
                Shape::Sphere { center, radius } => intersect_sphere(origin, dir, &center, radius),
            };
            if let Some((t, normal)) = hit {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    pub fn shade(&self, hit: &Hit, dir: &Vector3<f64>) -> [f64; 3] {
        let tex = &self.primitives[hit.primitive].texture;
        let n = if hit.normal.dot(dir) > 0.0 { -hit.normal } else { hit.normal };
        let lambert = n.dot(&self.light).max(0.0);
        let light = self.ambient + (1.0 - self.ambient) * lambert;
        let noise = value_noise(&(hit.point * tex.frequency), self.seed ^ (hit.primitive as u64).wrapping_mul(0x9e37_79b9));
        let m = 1.0 + tex.amplitude * (2.0 * noise - 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (tex.albedo[k] * m * light).clamp(0.0, 1.0);
        }
        c
    }

    /// Color and camera-frame depth seen through a continuous pixel
    /// coordinate; `None` for background.
    pub fn trace(&self, camera: &Intrinsics, pose: &Pose, u: f64, v: f64) -> Option<([f64; 3], f64, Hit)> {
        let dir = pixel_direction(camera, pose, u, v);
        let origin = pose.center();
        self.intersect(&origin, &dir).map(|hit| {
            let z = (hit.t * dir).dot(&pose.forward());
            (self.shade(&hit, &dir), z, hit)
        })
    }
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis0 = 0;
    let mut axis1 = 0;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < min[k] || o[k] > max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut b) = ((min[k] - o[k]) * inv, (max[k] - o[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t0 {
            t0 = a;
            axis0 = k;
        }
        if b < t1 {
            t1 = b;
            axis1 = k;
        }
    }
    if t0 > t1 || t1 <= 0.0 {
        return None;
    }
    let (t, axis) = if t0 > 1e-12 { (t0, axis0) } else { (t1, axis1) };
    let mut n = Vector3::zeros();
    n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
    Some((t, n))
}

fn intersect_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > 1e-12 { -b - s } else { -b + s };
    if t <= 1e-12 {
        return None;
    }
    let n = (o + d * t - c) / r;
    Some((t, n))
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth lattice noise in [0, 1].
pub fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let fr = p - f;
    let s = fr.map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * hash3(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Exact render of the oracle scene. Background pixels carry the background
/// color, infinite depth and `valid_mask = false`.
pub fn render_oracle(scene: &OracleScene, pose: &Pose, camera: &Intrinsics) -> Keyframe {
    let (w, h) = (camera.width, camera.height);
    let mut image = Grid::filled(w, h, scene.background);
    let mut depth = Grid::filled(w, h, f64::INFINITY);
    let mut valid = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if let Some((c, z, _)) = scene.trace(camera, pose, x as f64, y as f64) {
                let i = y * w + x;
                image.data[i] = c;
                depth.data[i] = z;
                valid.data[i] = true;
            }
        }
    }
    Keyframe {
        image,
        depth,
        pose: *pose,
        valid_mask: valid,
    }
}

/// Ground-truth flow from view `a` to view `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFlow {
    /// Continuous displacement `p_b − p_a` for every pixel of view a.
    pub flow: FlowField,
    /// True where the surface seen in `a` is not visible in `b` (occluded,
    /// outside the image, or behind the camera).
    pub occluded: Mask,
}

const OCCLUSION_REL_TOL: f64 = 1e-4;

/// Per pixel of view a: intersect, reproject the hit into view b, and
/// compare against view b's exact depth at the landing position.
/// Background pixels are treated as points at infinity.
pub fn oracle_flow(scene: &OracleScene, pose_a: &Pose, pose_b: &Pose, camera: &Intrinsics) -> OracleFlow {
    let (w, h) = (camera.width, camera.height);
    let mut flow = Grid::filled(w, h, [0.0; 2]);
    let mut occluded = Grid::filled(w, h, true);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let dir = pixel_direction(camera, pose_a, p.x, p.y);
            let origin = pose_a.center();
            let (landing, visible) = match scene.intersect(&origin, &dir) {
                Some(hit) => {
                    let pc = pose_b.world_to_camera(&hit.point);
                    if pc.z <= 0.0 {
                        (None, false)
                    } else {
                        let q = camera.project_camera_point(&pc);
                        let seen = camera.contains(&q)
                            && scene
                                .trace(camera, pose_b, q.x, q.y)
                                .is_some_and(|(_, zb, _)| (zb - pc.z).abs() <= OCCLUSION_REL_TOL * pc.z);
                        (Some(q), seen)
                    }
                }
                None => {
                    let dc = pose_b.rotation().tr_mul(&dir);
                    if dc.z <= 0.0 {
                        (None, false)
                    } else {
                        let q = camera.project_camera_point(&dc);
                        let seen = camera.contains(&q) && scene.trace(camera, pose_b, q.x, q.y).is_none();
                        (Some(q), seen)
                    }
                }
            };
            let i = y * w + x;
            if let Some(q) = landing {
                flow.data[i] = [q.x - p.x, q.y - p.y];
            }
            occluded.data[i] = !visible;
        }
    }
    OracleFlow { flow, occluded }
}

/// Exact camera-frame depth of the oracle at every pixel (infinite for
/// background).
pub fn oracle_depth(scene: &OracleScene, pose: &Pose, camera: &Intrinsics) -> DepthMap {
    render_oracle(scene, pose, camera).depth
}

pub fn oracle_image(scene: &OracleScene, pose: &Pose, camera: &Intrinsics) -> ColorImage {
    render_oracle(scene, pose, camera).image
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Intrinsics {
        Intrinsics::centered(60.0, 64, 48).unwrap()
    }

    fn wall_scene(d: f64) -> OracleScene {
        OracleScene::new(
            vec![Primitive {
                shape: Shape::Box {
                    min: Vector3::new(-50.0, -50.0, d),
                    max: Vector3::new(50.0, 50.0, d + 1.0),
                },
                texture: Texture {
                    albedo: [0.5, 0.5, 0.5],
                    amplitude: 0.2,
                    frequency: 2.0,
                },
            }],
            [0.0; 3],
            Vector3::new(0.0, 0.0, -1.0),
            0.3,
            1,
        )
        .unwrap()
    }

    #[test]
    fn enclosing_box_all_valid() {
        let scene = OracleScene::new(
            vec![Primitive {
                shape: Shape::Box {
                    min: Vector3::new(-5.0, -5.0, -5.0),
                    max: Vector3::new(5.0, 5.0, 5.0),
                },
                texture: Texture {
                    albedo: [0.5; 3],
                    amplitude: 0.1,
                    frequency: 1.0,
                },
            }],
            [0.0; 3],
            Vector3::new(0.2, -1.0, 0.1),
            0.3,
            3,
        )
        .unwrap();
        let kf = render_oracle(&scene, &Pose::identity(), &cam());
        assert_eq!(kf.valid_mask.count(), 64 * 48);
        assert!(kf.depth.data.iter().all(|&d| d > 0.0 && d.is_finite()));
    }

    #[test]
    fn sphere_on_axis_depth_symmetric() {
        let scene = OracleScene::new(
            vec![Primitive {
                shape: Shape::Sphere {
                    center: Vector3::new(0.0, 0.0, 5.0),
                    radius: 1.0,
                },
                texture: Texture {
                    albedo: [0.5; 3],
                    amplitude: 0.0,
                    frequency: 1.0,
                },
            }],
            [0.0; 3],
            Vector3::new(0.0, 0.0, -1.0),
            0.3,
            0,
        )
        .unwrap();
        let c = Intrinsics::centered(60.0, 33, 33).unwrap();
        let kf = render_oracle(&scene, &Pose::identity(), &c);
        let center = *kf.depth.get(16, 16);
        assert!((center - 4.0).abs() < 1e-12);
        for (i, &d) in kf.depth.data.iter().enumerate() {
            if d.is_finite() {
                assert!(d >= center - 1e-12);
                let (x, y) = (i % 33, i / 33);
                let mirrored = *kf.depth.get(32 - x, 32 - y);
                assert!((d - mirrored).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fronto_parallel_plane_constant_depth() {
        let kf = render_oracle(&wall_scene(3.0), &Pose::identity(), &cam());
        assert!(kf.depth.data.iter().all(|&d| (d - 3.0).abs() < 1e-12));
    }

    #[test]
    fn identical_poses_give_zero_flow() {
        let scene = OracleScene::courtyard();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1.5));
        let f = oracle_flow(&scene, &pose, &pose, &cam());
        assert!(f.flow.data.iter().all(|v| v[0].abs() < 1e-9 && v[1].abs() < 1e-9));
        assert_eq!(f.occluded.count(), 0);
    }

    #[test]
    fn translation_over_plane_uniform_flow() {
        let d = 4.0;
        let tx = 0.2;
        let c = cam();
        let b = Pose::from_translation(Vector3::new(tx, 0.0, 0.0));
        let f = oracle_flow(&wall_scene(d), &Pose::identity(), &b, &c);
        // the camera moves right so the scene moves left in the image
        let expected = -c.fx * tx / d;
        for (i, v) in f.flow.data.iter().enumerate() {
            assert!((v[0] - expected).abs() < 1e-9 && v[1].abs() < 1e-9);
            if !f.occluded.data[i] {
                assert!(c.contains(&Vector2::new((i % 64) as f64 + v[0], (i / 64) as f64)));
            }
        }
    }

    #[test]
    fn pose_equivariance() {
        // moving scene and camera together by a translation leaves the render unchanged
        let scene = OracleScene::courtyard();
        let shift = Vector3::new(0.5, -0.25, 1.0);
        let moved = OracleScene {
            primitives: scene
                .primitives
                .iter()
                .map(|p| Primitive {
                    shape: match p.shape {
                        Shape::Box { min, max } => Shape::Box {
                            min: min + shift,
                            max: max + shift,
                        },
                        Shape::Sphere { center, radius } => Shape::Sphere {
                            center: center + shift,
                            radius,
                        },
                    },
                    texture: p.texture,
                })
                .collect(),
            ..scene.clone()
        };
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1.5));
        let moved_pose = Pose::from_translation(pose.center() + shift);
        let a = render_oracle(&scene, &pose, &cam());
        let b = render_oracle(&moved, &moved_pose, &cam());
        assert_eq!(a.valid_mask, b.valid_mask);
        for (da, db) in a.depth.data.iter().zip(&b.depth.data) {
            if da.is_finite() {
                assert!((da - db).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_and_config_round_trip() {
        let scene = OracleScene::courtyard();
        let again = OracleScene::from_config(&scene.to_config()).unwrap();
        assert_eq!(scene.primitives, again.primitives);
        assert!((scene.light - again.light).amax() < 1e-15);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1.5));
        assert_eq!(render_oracle(&scene, &pose, &cam()), render_oracle(&scene, &pose, &cam()));
    }

    #[test]
    fn noise_in_unit_range() {
        for i in 0..1000 {
            let p = Vector3::new(i as f64 * 0.137, (i as f64 * 0.71).sin() * 3.0, i as f64 * -0.05);
            let n = value_noise(&p, 42);
            assert!((0.0..=1.0).contains(&n));
        }
    }
}
