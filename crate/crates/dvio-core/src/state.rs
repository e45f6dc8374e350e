//! Shared state and measurement types: keyframe states, the extrinsic set,
//! landmarks, camera observations and the gravity model.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Rotation};
use crate::imu::ImuBias;

/// Per-keyframe state: camera pose in the initial camera frame, linear
/// velocity in the DVL frame, and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    /// Linear velocity expressed in the DVL frame of this keyframe.
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl KeyframeState {
    pub fn origin() -> Self {
        KeyframeState {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            bias: ImuBias::zero(),
        }
    }
}

/// Rigid transforms between the sensors plus the initial IMU orientation in
/// the world (the gravity direction). `T_IC` is always derived from the two
/// stored transforms, never stored separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicSet {
    /// IMU from DVL.
    pub t_id: RigidTransform,
    /// DVL from camera.
    pub t_dc: RigidTransform,
    /// Initial IMU orientation in the world frame.
    pub r_wi0: Rotation,
}

impl ExtrinsicSet {
    pub fn identity() -> Self {
        ExtrinsicSet {
            t_id: RigidTransform::identity(),
            t_dc: RigidTransform::identity(),
            r_wi0: Rotation::identity(),
        }
    }

    /// IMU from camera, composed on demand.
    pub fn t_ic(&self) -> RigidTransform {
        self.t_id * self.t_dc
    }

    pub fn r_ic(&self) -> Rotation {
        self.t_id.rotation * self.t_dc.rotation
    }

    /// Position of the IMU origin in the camera frame.
    pub fn p_ci(&self) -> Vector3<f64> {
        self.t_ic().inverse().translation
    }
}

/// A 3D landmark expressed in the initial camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
}

/// One stereo landmark observation: left pixel plus the right-image
/// horizontal coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraObservation {
    pub landmark_id: u64,
    /// Left-image pixel (u, v).
    pub u: f64,
    pub v: f64,
    /// Right-image horizontal pixel coordinate.
    pub u_right: Option<f64>,
    /// Pixel noise standard deviation.
    pub sigma: f64,
}

/// Gravity: `g_w = [0, 0, -g]` in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityModel {
    pub magnitude: f64,
}

impl GravityModel {
    pub fn standard() -> Self {
        GravityModel { magnitude: 9.81 }
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.magnitude)
    }
}
