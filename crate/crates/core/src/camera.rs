//! Pinhole cameras and rigid poses.
//!
//! Convention: right-handed, the camera looks down +z, image u grows to the
//! right and v grows downward. Poses are camera-to-world. Pixel coordinates
//! are continuous with integer values at pixel centers, so pixel index
//! `(x, y)` has its center at `(x as f64, y as f64)`.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};

use crate::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::domain(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::domain("image size must be nonzero"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::domain(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// Un-normalized camera-frame direction with unit z.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Intrinsics for the same camera at `1/factor` resolution.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::domain(format!(
                "cannot downscale {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        let shift = (f - 1.0) / 2.0;
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx - shift) / f,
            (self.cy - shift) / f,
            self.width / factor,
            self.height / factor,
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= ORTHO_TOL) || !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::domain(format!(
                "rotation is not orthonormal (deviation {ortho:e}, det {det})"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::domain("translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Pose {
            rotation: rot.into_inner(),
            translation,
        }
    }

    /// Camera at `eye` looking at `target`; `down` is the preferred world
    /// direction of the image +v axis.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::domain("look-at target coincides with the eye"));
        }
        let z = forward.normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::domain("look-at down vector is parallel to the view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Ok(Pose {
            rotation,
            translation: eye,
        })
    }

    /// Projects an almost-orthonormal matrix onto SO(3). Used when reading
    /// poses written with limited precision.
    pub fn orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let svd = rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            return Err(Error::domain("rotation has negative determinant"));
        }
        // one Newton step of the polar iteration tightens the result to ~1e-16
        r = 0.5 * (r + r.transpose().try_inverse().unwrap_or(r));
        Pose::new(r, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-space optical axis (camera +z).
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn down(&self) -> Vector3<f64> {
        self.rotation.column(1).into_owned()
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    /// 3×4 row-major `[R|t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        Pose::new(r, t)
    }
}

/// Spherical displacement of a neighbor camera, expressed in the frame of
/// the center camera: polar angle from the optical axis, azimuth measured
/// from the image +u axis toward +v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalOffset {
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
}

impl SphericalOffset {
    pub fn new(theta: f64, phi: f64, r: f64) -> Result<Self> {
        let pi = std::f64::consts::PI;
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::domain(format!("radius must be nonnegative, got {r}")));
        }
        if !(0.0..=pi).contains(&theta) {
            return Err(Error::domain(format!("polar angle {theta} outside [0, pi]")));
        }
        if !(-pi..=pi).contains(&phi) {
            return Err(Error::domain(format!("azimuth {phi} outside [-pi, pi]")));
        }
        Ok(SphericalOffset { theta, phi, r })
    }

    /// Displacement in the center camera's frame.
    pub fn camera_displacement(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        self.r * Vector3::new(st * cp, st * sp, ct)
    }

    /// `count` neighbors on a ring around the optical axis, alternating
    /// slightly forward and slightly backward of the image plane.
    pub fn ring(count: usize, radius: f64, tilt: f64) -> Result<Vec<Self>> {
        let pi = std::f64::consts::PI;
        (0..count)
            .map(|k| {
                let phi = -pi + 2.0 * pi * k as f64 / count as f64;
                let theta = if k % 2 == 0 { pi / 2.0 - tilt } else { pi / 2.0 + tilt };
                SphericalOffset::new(theta, phi, radius)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, t_near: f64, t_far: f64) -> Result<Self> {
        let n = direction.norm();
        if !((n - 1.0).abs() <= 1e-9) {
            return Err(Error::domain(format!("ray direction has norm {n}")));
        }
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::domain(format!("invalid ray bounds [{t_near}, {t_far}]")));
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Unit world direction through a continuous pixel coordinate.
#[inline]
pub fn pixel_direction(camera: &Intrinsics, pose: &Pose, u: f64, v: f64) -> Vector3<f64> {
    (pose.rotation * camera.unproject(u, v)).normalize()
}

/// One ray per pixel, through the given continuous pixel coordinates. Ray
/// bounds are set to `[0, +inf)`-like defaults of `[0, f64::MAX]`; callers
/// narrow them with [`Ray::with_bounds`].
pub fn generate_rays(camera: &Intrinsics, pose: &Pose, pixels: &[Vector2<f64>]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|p| {
            if !camera.contains(p) {
                return Err(Error::domain(format!(
                    "pixel ({}, {}) outside {}x{} image",
                    p.x, p.y, camera.width, camera.height
                )));
            }
            Ok(Ray {
                origin: pose.translation,
                direction: pixel_direction(camera, pose, p.x, p.y),
                t_near: 0.0,
                t_far: f64::MAX,
            })
        })
        .collect()
}

impl Ray {
    pub fn with_bounds(mut self, t_near: f64, t_far: f64) -> Result<Self> {
        if !(0.0 <= t_near && t_near < t_far) {
            return Err(Error::domain(format!("invalid ray bounds [{t_near}, {t_far}]")));
        }
        self.t_near = t_near;
        self.t_far = t_far;
        Ok(self)
    }
}

/// Projects a world point; returns the pixel and the camera-frame depth.
pub fn project_point(camera: &Intrinsics, pose: &Pose, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let pc = pose.world_to_camera(point);
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera(pc.z));
    }
    Ok((camera.project_camera_point(&pc), pc.z))
}

/// World point seen at `pixel` with camera-frame depth `depth`.
pub fn backproject_pixel(camera: &Intrinsics, pose: &Pose, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::domain(format!("depth must be positive and finite, got {depth}")));
    }
    Ok(pose.transform_point(&(camera.unproject(pixel.x, pixel.y) * depth)))
}

/// Neighbor camera on the sphere of radius `offset.r` around the center
/// camera, re-aimed at the point `target_distance` along the original
/// optical axis.
pub fn spherical_neighbor_pose(center_pose: &Pose, offset: &SphericalOffset, target_distance: f64) -> Result<Pose> {
    if !(target_distance > 0.0) {
        return Err(Error::domain("look-at target distance must be positive"));
    }
    let eye = center_pose.transform_point(&offset.camera_displacement());
    let target = center_pose.center() + center_pose.forward() * target_distance;
    if (target - eye).norm() < 1e-9 * target_distance {
        return Err(Error::domain("neighbor camera coincides with the look-at target"));
    }
    Pose::look_at(eye, target, center_pose.down())
}

/// Per consecutive pair: is the cosine between the center displacement and
/// the viewing direction of the first pose at least `threshold`? A
/// stationary pair counts as smooth.
pub fn validate_trajectory(poses: &[Pose], threshold: f64) -> Result<Vec<bool>> {
    if poses.len() < 2 {
        return Err(Error::domain("trajectory validation needs at least two poses"));
    }
    Ok(poses
        .windows(2)
        .map(|w| {
            let step = w[1].center() - w[0].center();
            let n = step.norm();
            if n == 0.0 {
                return true;
            }
            step.dot(&w[0].forward()) / n >= threshold
        })
        .collect())
}

pub const DEFAULT_SMOOTHNESS_THRESHOLD: f64 = 0.95;
