//! IMU sample, bias and noise-density types shared by the pre-integration,
//! simulator and estimator modules.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// One gyroscope + accelerometer sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Angular velocity, rad/s, IMU frame.
    pub omega: Vector3<f64>,
    /// Specific force (gravity included), m/s^2, IMU frame.
    pub accel: Vector3<f64>,
    pub timestamp: f64,
}

/// Gyroscope and accelerometer biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        ImuBias { gyro: Vector3::zeros(), accel: Vector3::zeros() }
    }

    /// Largest component-wise deviation from `other`.
    pub fn max_delta(&self, other: &ImuBias) -> f64 {
        (self.gyro - other.gyro)
            .amax()
            .max((self.accel - other.accel).amax())
    }
}

/// Continuous white-noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// Gyro white noise density, rad/s/sqrt(Hz).
    pub gyro_density: f64,
    /// Accelerometer white noise density, m/s^2/sqrt(Hz).
    pub accel_density: f64,
}

impl ImuNoise {
    pub fn zero() -> Self {
        ImuNoise { gyro_density: 0.0, accel_density: 0.0 }
    }
}
