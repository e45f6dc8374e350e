//! Tightly-coupled acoustic-visual-inertial state estimation.
//!
//! The crate fuses Doppler velocity log (DVL), IMU and camera landmark
//! measurements in a sliding-window factor-graph optimizer, calibrates the
//! inter-sensor extrinsics and the DVL transducer alignment online, and ships
//! a synthetic sensor simulator used to verify the whole pipeline end to end.

pub mod calibration;
pub mod camera;
pub mod dataset;
pub mod dvl;
pub mod estimator;
pub mod evaluation;
pub mod factors;
pub mod geometry;
pub mod imu;
pub mod jacobian_check;
pub mod optimizer;
pub mod preintegration;
pub mod sim;
pub mod state;

pub use dvl::{BodyVelocity, ProjectionMatrix, TransducerGeometry, TransducerMeasurement};
pub use geometry::{Rotation, RigidTransform};
pub use imu::{ImuBias, ImuNoise, ImuSample};
pub use preintegration::{GyroPreintegration, PreintegratedDvl, PreintegratedImu};
pub use state::{CameraObservation, ExtrinsicSet, GravityModel, KeyframeState, Landmark};
