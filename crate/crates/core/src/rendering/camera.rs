use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Centered principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self { width, height, fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Camera-to-world pose. Columns of `rotation` are the camera's right, up and
/// back axes; the camera looks along its local `-z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
}

impl Pose {
    pub fn identity_at(position: Vec3) -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], position }
    }

    /// Pose at `eye` looking at `target`. Falls back to another up vector when
    /// the view direction is parallel to `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = geom::normalize(geom::sub(target, eye))
            .ok_or_else(|| Error::Camera("eye and target coincide".into()))?;
        let back = geom::scale(forward, -1.0);
        let right = geom::normalize(geom::cross(up, back))
            .or_else(|| geom::normalize(geom::cross([0.0, 0.0, 1.0], back)))
            .or_else(|| geom::normalize(geom::cross([1.0, 0.0, 0.0], back)))
            .ok_or_else(|| Error::Camera("cannot build an orthonormal frame".into()))?;
        let cam_up = geom::cross(back, right);
        Ok(Self::from_axes(right, cam_up, back, eye))
    }

    fn from_axes(right: Vec3, up: Vec3, back: Vec3, position: Vec3) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            rotation[i] = [right[i], up[i], back[i]];
        }
        Self { rotation, position }
    }

    pub fn axis(&self, col: usize) -> Vec3 {
        [self.rotation[0][col], self.rotation[1][col], self.rotation[2][col]]
    }

    /// Rejects non-finite or non-orthonormal rotations.
    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().chain(self.rotation.iter().flatten()).all(|v| v.is_finite()) {
            return Err(Error::Camera("non-finite pose".into()));
        }
        for a in 0..3 {
            for b in 0..3 {
                let d = geom::dot(self.axis(a), self.axis(b));
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Camera(format!("rotation is not orthonormal (axes {a},{b}: {d})")));
                }
            }
        }
        Ok(())
    }

    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geom::along(self.origin, self.direction, t)
    }

    /// Restricts `[t_near, t_far]` to the part inside `aabb`.
    pub fn clipped(&self, aabb: &Aabb) -> Option<Ray> {
        let (a, b) = aabb.intersect(self.origin, self.direction)?;
        let (t_near, t_far) = (a.max(self.t_near), b.min(self.t_far));
        (t_far > t_near).then_some(Ray { t_near, t_far, ..*self })
    }
}

/// One ray per pixel through the pixel center, row-major from the top-left.
/// Rays start at the camera center and are unbounded.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    camera.pose.validate()?;
    let k = &camera.intrinsics;
    if k.width == 0 || k.height == 0 || !(k.fx > 0.0) || !(k.fy > 0.0) {
        return Err(Error::Camera("invalid intrinsics".into()));
    }
    let mut rays = Vec::with_capacity(k.pixel_count());
    for v in 0..k.height {
        for u in 0..k.width {
            let local = [(u as f64 + 0.5 - k.cx) / k.fx, -(v as f64 + 0.5 - k.cy) / k.fy, -1.0];
            let direction = geom::normalize(camera.pose.to_world(local))
                .ok_or_else(|| Error::Camera("degenerate ray direction".into()))?;
            rays.push(Ray { origin: camera.pose.position, direction, t_near: 0.0, t_far: f64::INFINITY });
        }
    }
    Ok(rays)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = Camera { pose: Pose::identity_at([0.0, 0.0, 3.0]), intrinsics: Intrinsics::from_fov(3, 3, 60.0) };
        let rays = generate_rays(&cam).unwrap();
        let d = rays[4].direction;
        assert!(d[0].abs() < 1e-15 && d[1].abs() < 1e-15 && (d[2] + 1.0).abs() < 1e-15);
        // Top-left pixel points up and left.
        assert!(rays[0].direction[0] < 0.0 && rays[0].direction[1] > 0.0);
    }

    #[test]
    fn ray_count_and_unit_directions() {
        let pose = Pose::look_at([2.0, 1.5, 2.5], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        let cam = Camera { pose, intrinsics: Intrinsics::from_fov(64, 64, 45.0) };
        let rays = generate_rays(&cam).unwrap();
        assert_eq!(rays.len(), 4096);
        assert!(rays.iter().all(|r| (geom::norm(r.direction) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn degenerate_poses_are_rejected() {
        assert!(Pose::look_at([1.0; 3], [1.0; 3], [0.0, 1.0, 0.0]).is_err());
        let mut pose = Pose::identity_at([0.0; 3]);
        pose.rotation[0][0] = 2.0;
        let cam = Camera { pose, intrinsics: Intrinsics::from_fov(4, 4, 45.0) };
        assert!(generate_rays(&cam).is_err());
        // Looking straight down the up vector still yields a valid frame.
        let down = Pose::look_at([0.0, 3.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap();
        down.validate().unwrap();
    }
}
