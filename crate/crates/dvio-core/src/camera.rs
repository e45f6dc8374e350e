//! Rectified pinhole stereo camera model.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Minimum depth (meters) in front of the camera for a valid projection.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline, meters.
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// A VGA-ish default used by the simulator.
    pub fn default_stereo() -> Self {
        CameraModel {
            fx: 420.0,
            fy: 420.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.12,
            width: 640,
            height: 480,
        }
    }

    /// Projects a camera-frame point to the left image. `None` when the point
    /// is at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z < MIN_DEPTH {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Right-image horizontal coordinate of a camera-frame point.
    pub fn project_right_u(&self, p: &Vector3<f64>) -> Option<f64> {
        if p.z < MIN_DEPTH {
            return None;
        }
        Some(self.fx * (p.x - self.baseline) / p.z + self.cx)
    }

    /// Jacobian of the left-image projection w.r.t. the camera-frame point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * iz, 0.0, -self.fx * p.x * iz * iz,
            0.0, self.fy * iz, -self.fy * p.y * iz * iz,
        )
    }

    /// Row Jacobian of the right-image u coordinate.
    pub fn right_u_jacobian(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let iz = 1.0 / p.z;
        Vector3::new(self.fx * iz, 0.0, -self.fx * (p.x - self.baseline) * iz * iz)
    }

    pub fn in_bounds(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x < self.width as f64 && px.y >= 0.0 && px.y < self.height as f64
    }

    /// Back-projects a stereo observation (u, v, u_right) to a camera-frame
    /// point using the disparity depth.
    pub fn back_project(&self, u: f64, v: f64, u_right: f64) -> Option<Vector3<f64>> {
        let disparity = u - u_right;
        if disparity <= 1e-9 {
            return None;
        }
        let z = self.fx * self.baseline / disparity;
        Some(Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z))
    }

    /// Intrinsic matrix (left camera).
    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = CameraModel::default_stereo();
        let px = cam.project(&Vector3::new(0.0, 0.0, 3.0)).unwrap();
        assert_abs_diff_eq!(px, Vector2::new(cam.cx, cam.cy), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let cam = CameraModel::default_stereo();
        assert!(cam.project(&Vector3::new(0.1, 0.1, -1.0)).is_none());
        assert!(cam.project(&Vector3::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn stereo_back_projection_round_trip() {
        let cam = CameraModel::default_stereo();
        let p = Vector3::new(0.4, -0.3, 2.5);
        let px = cam.project(&p).unwrap();
        let ur = cam.project_right_u(&p).unwrap();
        let back = cam.back_project(px.x, px.y, ur).unwrap();
        assert_abs_diff_eq!(back, p, epsilon = 1e-10);
    }
}
