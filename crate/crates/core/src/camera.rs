//! Pinhole cameras with an OpenCV-style frame: x right, y down, z forward.
//!
//! Pixel `(u, v)` covers `[u, u + 1) x [v, v + 1)`; its ray passes through the
//! pixel center. Depth maps throughout the crate store the Euclidean range
//! from the camera center along the pixel ray, not the camera-frame z.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let should_be_identity = rotation.transpose() * rotation - Matrix3::identity();
        if should_be_identity.amax() > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "rotation is not a proper orthonormal matrix (det = {:.6})",
                rotation.determinant()
            )));
        }
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::domain("pose contains non-finite entries"));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look-at target coincides with the eye"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look-at direction is parallel to up"))?;
        let down = forward.cross(&right);
        Pose::new(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_rows(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::domain("pose bottom row must be [0, 0, 0, 1]"));
        }
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        Pose::new(rotation, Vec3::new(m[0][3], m[1][3], m[2][3]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_from_camera: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_from_camera: Pose,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::domain(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::domain("image size must be non-zero"));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_from_camera,
        })
    }

    /// Camera with the principal point at the image center and a horizontal
    /// field of view of `hfov_deg`.
    pub fn with_fov(width: usize, height: usize, hfov_deg: f64, pose: Pose) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Camera::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, pose)
    }

    pub fn center(&self) -> Vec3 {
        self.world_from_camera.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit world-space direction through the continuous image point (x, y).
    pub fn direction(&self, x: f64, y: f64) -> Vec3 {
        let local = Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        (self.world_from_camera.rotation * local).normalize()
    }

    pub fn pixel_ray(&self, u: usize, v: usize) -> (Vec3, Vec3) {
        (self.center(), self.direction(u as f64 + 0.5, v as f64 + 0.5))
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_from_camera.rotation.transpose() * (p - self.world_from_camera.translation)
    }

    /// Continuous image coordinates and camera-frame z of a world point.
    /// Points at or behind the camera plane yield `None`.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        (c.z > 0.0).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// Integer pixel containing a continuous image point, if inside.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let pose = Pose::look_at(Vec3::new(3.0, 1.0, 2.0), Vec3::zeros(), Vec3::z()).unwrap();
        let cam = Camera::with_fov(64, 48, 60.0, pose).unwrap();
        let (x, y, z) = cam.project(&Vec3::zeros()).unwrap();
        assert!((x - 32.0).abs() < 1e-9 && (y - 24.0).abs() < 1e-9);
        assert!((z - 14f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reflection_is_rejected() {
        let m = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(Pose::new(m, Vec3::zeros()), Err(Error::Domain(_))));
    }

    #[test]
    fn rows_round_trip() {
        let pose = Pose::look_at(Vec3::new(-1.0, 2.0, 0.5), Vec3::new(0.1, 0.0, 0.0), Vec3::z()).unwrap();
        assert_eq!(Pose::from_rows(&pose.to_rows()).unwrap(), pose);
    }

    #[test]
    fn pixel_ray_round_trips_through_projection() {
        let pose = Pose::look_at(Vec3::new(0.0, -4.0, 1.0), Vec3::zeros(), Vec3::z()).unwrap();
        let cam = Camera::with_fov(40, 30, 70.0, pose).unwrap();
        let (o, d) = cam.pixel_ray(7, 21);
        let (x, y, _) = cam.project(&(o + 2.5 * d)).unwrap();
        assert!((x - 7.5).abs() < 1e-9 && (y - 21.5).abs() < 1e-9);
        assert_eq!(cam.pixel_of(x, y), Some((7, 21)));
    }
}
