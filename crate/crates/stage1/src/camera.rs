//! Object-centric orbit cameras and ray generation.
//!
//! World frame is y-up. Azimuth 0 looks at the origin from +z, positive
//! azimuth rotates toward +x, positive elevation raises the camera.

use serde::{Deserialize, Serialize};
use trigen_core::vec3::{self, Vec3};

use crate::error::{Error, Result};

pub const DEFAULT_RADIUS: f32 = 2.5;
pub const DEFAULT_FOV_DEG: f32 = 49.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub radius: f32,
    pub azimuth_deg: f32,
    pub elevation_deg: f32,
    /// Vertical field of view.
    pub fov_deg: f32,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f32) -> Vec3 {
        vec3::add(self.origin, vec3::scale(self.dir, t))
    }
}

impl Camera {
    pub fn new(
        radius: f32,
        azimuth_deg: f32,
        elevation_deg: f32,
        fov_deg: f32,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            radius,
            azimuth_deg,
            elevation_deg,
            fov_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Orbit camera at the default radius and field of view.
    pub fn orbit(azimuth_deg: f32, elevation_deg: f32, size: usize) -> Result<Self> {
        Self::new(DEFAULT_RADIUS, azimuth_deg, elevation_deg, DEFAULT_FOV_DEG, size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Camera(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 120.0) {
            return Err(Error::Camera(format!("fov must be in (0, 120), got {}", self.fov_deg)));
        }
        if self.elevation_deg.abs() >= 89.9 {
            return Err(Error::Camera(format!(
                "elevation {} is too close to a pole",
                self.elevation_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Camera("image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [
            self.radius * el.cos() * az.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * az.cos(),
        ]
    }

    /// Orthonormal (right, up, forward) basis.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = vec3::normalize(vec3::scale(self.position(), -1.0));
        let right = vec3::normalize(vec3::cross(forward, [0.0, 1.0, 0.0]));
        let up = vec3::cross(right, forward);
        (right, up, forward)
    }

    /// True if the camera sits inside (or on) the `[-1, 1]³` cube.
    pub fn inside_unit_cube(&self) -> bool {
        self.position().iter().all(|c| c.abs() <= 1.0)
    }

    pub fn ensure_outside_unit_cube(&self) -> Result<()> {
        if self.inside_unit_cube() {
            return Err(Error::Camera(format!("camera at {:?} is inside the unit cube", self.position())));
        }
        Ok(())
    }

    fn tan_half_fov(&self) -> f32 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    /// Ray through the image-plane point `(px, py)` in pixel units, where
    /// pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn ray_at(&self, px: f32, py: f32) -> Ray {
        let (right, up, forward) = self.basis();
        let th = self.tan_half_fov();
        let aspect = self.width as f32 / self.height as f32;
        let sx = (2.0 * px / self.width as f32 - 1.0) * th * aspect;
        let sy = (1.0 - 2.0 * py / self.height as f32) * th;
        let dir = vec3::add(forward, vec3::add(vec3::scale(right, sx), vec3::scale(up, sy)));
        Ray {
            origin: self.position(),
            dir: vec3::normalize(dir),
        }
    }

    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray_at(x as f32 + 0.5, y as f32 + 0.5)
    }

    /// One ray per pixel, row-major.
    pub fn rays(&self) -> Vec<Ray> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.pixel_ray(x, y))
            .collect()
    }

    /// Projects a world point to continuous pixel coordinates, or `None`
    /// when it lies behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f32, f32)> {
        self.project_with_depth(p).map(|(x, y, _)| (x, y))
    }

    /// Pixel coordinates plus view-space depth along the optical axis.
    pub fn project_with_depth(&self, p: Vec3) -> Option<(f32, f32, f32)> {
        let (right, up, forward) = self.basis();
        let d = vec3::sub(p, self.position());
        let z = vec3::dot(d, forward);
        if z <= 0.0 {
            return None;
        }
        let th = self.tan_half_fov();
        let aspect = self.width as f32 / self.height as f32;
        let sx = vec3::dot(d, right) / z / (th * aspect);
        let sy = vec3::dot(d, up) / z / th;
        Some((
            (sx + 1.0) * 0.5 * self.width as f32,
            (1.0 - sy) * 0.5 * self.height as f32,
            z,
        ))
    }

    /// Apparent radius in pixels of a sphere of radius `r` at the origin.
    pub fn sphere_pixel_radius(&self, r: f32) -> f32 {
        let half_angle = (r / self.radius).asin();
        half_angle.tan() / self.tan_half_fov() * self.height as f32 * 0.5
    }
}

/// Slab test against `[-1, 1]³`; returns the entry/exit distances clipped
/// to `t ≥ 0`.
pub fn intersect_unit_cube(ray: &Ray) -> Option<(f32, f32)> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d.abs() < 1e-12 {
            if o.abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut lo, mut hi) = ((-1.0 - o) * inv, (1.0 - o) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}
