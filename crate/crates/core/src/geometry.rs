//! Pinhole cameras, rays and the world-to-camera transform.
//!
//! Conventions used throughout the crate:
//!
//! * A [`CameraPose`] stores the world-to-camera rigid transform
//!   `x_cam = R * x_world + t`.
//! * The camera looks down its local `-z` axis, `+x` points right and `+y`
//!   points up. Pixel rows grow downwards, so
//!   `u_x = cx + fx * x / -z` and `u_y = cy - fy * y / -z`.
//! * Rays follow `x(tau) = origin - direction * tau`, i.e. `direction` points
//!   from the scene back towards the camera centre.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

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
    /// Intrinsics for a `width x height` image with the given horizontal field
    /// of view, square pixels and the principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    /// Tangent of the half field of view along x and y, measured to the
    /// outermost pixel centre plus half a pixel.
    pub fn half_fov_tangents(&self) -> (f64, f64) {
        let tx = (self.cx.max(self.width as f64 - 1.0 - self.cx) + 0.5) / self.fx;
        let ty = (self.cy.max(self.height as f64 - 1.0 - self.cy) + 0.5) / self.fy;
        (tx, ty)
    }

    pub fn contains(&self, pixel: (f64, f64)) -> bool {
        let (x, y) = pixel;
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Mat3,
    translation: Vec3,
    intrinsics: Intrinsics,
    frame_index: usize,
}

impl CameraPose {
    /// Validates that `rotation` is a proper rotation (orthonormal, det +1).
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        intrinsics: Intrinsics,
        frame_index: usize,
    ) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(ortho <= ORTHONORMAL_TOL) {
            return Err(Error::Domain(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(Error::Domain(format!("rotation determinant is {det}, expected +1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("translation is not finite".into()));
        }
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::Domain("focal lengths must be positive".into()));
        }
        Ok(CameraPose {
            rotation,
            translation,
            intrinsics,
            frame_index,
        })
    }

    /// Camera centred at `center` with identity orientation.
    pub fn at(center: Vec3, intrinsics: Intrinsics, frame_index: usize) -> Result<Self> {
        Self::new(Mat3::identity(), -center, intrinsics, frame_index)
    }

    /// Camera at `eye` looking at `target` with `up` as the approximate up
    /// direction.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        intrinsics: Intrinsics,
        frame_index: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("look_at: eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("look_at: up is parallel to the view direction".into()))?;
        let true_up = right.cross(&forward);
        // Rows of the world->camera rotation are the camera axes in world space.
        let back = -forward;
        let rotation = Mat3::from_rows(&[right.transpose(), true_up.transpose(), back.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation, intrinsics, frame_index)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn camera_to_world(&self, x_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Rotates a world direction into the camera frame.
    pub fn direction_to_camera(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn direction_to_world(&self, v_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * v_cam
    }

    /// Projects a world point to continuous pixel coordinates. Returns `None`
    /// for points on or behind the camera plane.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        project_camera_point(&self.intrinsics, &self.world_to_camera(x))
    }

    /// Viewing direction (pointing into the scene) of a pixel, camera frame.
    pub fn pixel_view_dir_camera(&self, pixel: (f64, f64)) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((pixel.0 - k.cx) / k.fx, -(pixel.1 - k.cy) / k.fy, -1.0).normalize()
    }

    /// Back-projects a pixel into a world-space ray starting at the camera
    /// centre. The ray is unbounded (`t_far = inf`); clip it with
    /// [`Ray::clip_to`] before sampling.
    pub fn ray_through_pixel(&self, pixel: (f64, f64)) -> Result<Ray> {
        if !self.intrinsics.contains(pixel) {
            return Err(Error::Domain(format!(
                "pixel ({}, {}) outside {}x{} image",
                pixel.0, pixel.1, self.intrinsics.width, self.intrinsics.height
            )));
        }
        let view = self.direction_to_world(&self.pixel_view_dir_camera(pixel));
        Ok(Ray {
            origin: self.center(),
            direction: -view,
            t_near: 0.0,
            t_far: f64::INFINITY,
            pixel,
        })
    }
}

pub fn project_camera_point(k: &Intrinsics, p: &Vec3) -> Option<(f64, f64)> {
    let depth = -p.z;
    if depth <= 0.0 {
        return None;
    }
    Some((k.cx + k.fx * p.x / depth, k.cy - k.fy * p.y / depth))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit vector; points are `origin - direction * tau`.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn point_at(&self, tau: f64) -> Vec3 {
        self.origin - self.direction * tau
    }

    /// Direction of travel along the ray (`-direction`).
    pub fn travel_dir(&self) -> Vec3 {
        -self.direction
    }

    /// Restricts the ray to its overlap with `bbox`, never starting before
    /// `near`. Returns `None` if the ray misses the box.
    pub fn clip_to(&self, bbox: &Aabb, near: f64) -> Option<Ray> {
        let (t0, t1) = bbox.intersect(&self.origin, &self.travel_dir())?;
        let t_near = t0.max(near).max(self.t_near);
        let t_far = t1.min(self.t_far);
        (t_near < t_far).then_some(Ray {
            t_near,
            t_far,
            ..*self
        })
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn expanded(&self, margin: f64) -> Self {
        let m = Vec3::repeat(margin);
        Aabb::new(self.min - m, self.max + m)
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    /// Slab test for the ray `origin + dir * t`, `t >= 0`. Returns the
    /// parametric interval inside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
