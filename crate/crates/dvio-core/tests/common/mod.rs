//! Shared fixtures for the integration tests: random factor linearization
//! points and the synthetic scenarios used by the consistency and
//! acceptance suites.

#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::Rng;

use dvio_core::dvl::BodyVelocity;
use dvio_core::factors::{ImuVars, RotationConvention, Value, Values, VarId};
use dvio_core::geometry::Rotation;
use dvio_core::imu::{ImuBias, ImuNoise, ImuSample};
use dvio_core::preintegration::{
    integrate_accel, integrate_dvl, integrate_gyro, GyroPreintegration, PreintegratedDvl,
    PreintegratedImu,
};
use dvio_core::sim::{NoiseSpec, SensorRig, TrajectoryKind, TrajectorySpec, WorldSpec};
use dvio_core::state::GravityModel;

pub fn rvec(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

/// Random IMU sample stream with gravity-scale accelerations.
pub fn random_samples(rng: &mut StdRng, n: usize, dt: f64) -> Vec<ImuSample> {
    (0..n)
        .map(|k| ImuSample {
            omega: rvec(rng, 0.6),
            accel: rvec(rng, 2.0) + Vector3::new(0.0, -9.0, 0.0),
            timestamp: k as f64 * dt,
        })
        .collect()
}

/// A full random linearization point shared by the IMU/DVL factor tests.
pub struct FactorFixture {
    pub values: Values,
    pub imu_vars: ImuVars,
    pub gyro: GyroPreintegration,
    pub imu_pre: PreintegratedImu,
    pub dvl_pre: PreintegratedDvl,
    pub gravity: GravityModel,
}

pub fn random_fixture(rng: &mut StdRng) -> FactorFixture {
    let n = 40;
    let dt = 2.5e-3;
    let samples = random_samples(rng, n, dt);
    let noise = ImuNoise { gyro_density: 1e-3, accel_density: 1e-2 };
    let bias_lin = ImuBias { gyro: rvec(rng, 0.01), accel: rvec(rng, 0.05) };
    let gyro = integrate_gyro(&samples, &bias_lin.gyro, &noise, Some(n as f64 * dt)).unwrap();
    let imu_pre = integrate_accel(&gyro, &bias_lin, &noise);

    let r_id = Rotation::exp(&rvec(rng, 0.4));
    let held: Vec<(BodyVelocity, usize)> = (0..gyro.steps.len())
        .map(|k| {
            (
                BodyVelocity {
                    v: rvec(rng, 0.4),
                    covariance: Matrix3::identity() * 1e-4,
                    timestamp: 0.0,
                },
                k / 8,
            )
        })
        .collect();
    let dvl_pre = integrate_dvl(&gyro, &held, &r_id).unwrap();

    let mut values = Values::new();
    let rot_i = values.add(Value::Rot(Rotation::exp(&rvec(rng, 1.5)), RotationConvention::RightMultiply));
    let pos_i = values.add(Value::Vec3(rvec(rng, 2.0)));
    let rot_j = values.add(Value::Rot(Rotation::exp(&rvec(rng, 1.5)), RotationConvention::RightMultiply));
    let pos_j = values.add(Value::Vec3(rvec(rng, 2.0)));
    let vel_i = values.add(Value::Vec3(rvec(rng, 0.5)));
    let vel_j = values.add(Value::Vec3(rvec(rng, 0.5)));
    let rot_id = values.add(Value::Rot(r_id, RotationConvention::LeftMultiply));
    let rot_dc = values.add(Value::Rot(Rotation::exp(&rvec(rng, 0.4)), RotationConvention::LeftMultiply));
    let trans_id = values.add(Value::Vec3(rvec(rng, 0.3)));
    let trans_dc = values.add(Value::Vec3(rvec(rng, 0.3)));
    let rot_wi0 = values.add(Value::Rot(Rotation::exp(&rvec(rng, 1.0)), RotationConvention::LeftMultiply));
    // Bias values near (within the re-linearization threshold of) the
    // pre-integration linearization point.
    let bg_i = values.add(Value::Vec3(bias_lin.gyro + rvec(rng, 4e-4)));
    let ba_i = values.add(Value::Vec3(bias_lin.accel + rvec(rng, 4e-4)));

    FactorFixture {
        values,
        imu_vars: ImuVars {
            rot_i,
            pos_i,
            rot_j,
            pos_j,
            vel_i,
            vel_j,
            rot_id,
            rot_dc,
            trans_id,
            trans_dc,
            rot_wi0,
            bg_i,
            ba_i,
        },
        gyro,
        imu_pre,
        dvl_pre,
        gravity: GravityModel::standard(),
    }
}

pub fn dvl_vars(f: &FactorFixture) -> dvio_core::factors::DvlTranslationVars {
    dvio_core::factors::DvlTranslationVars {
        rot_i: f.imu_vars.rot_i,
        pos_i: f.imu_vars.pos_i,
        rot_j: f.imu_vars.rot_j,
        pos_j: f.imu_vars.pos_j,
        rot_id: f.imu_vars.rot_id,
        rot_dc: f.imu_vars.rot_dc,
        trans_dc: f.imu_vars.trans_dc,
        bg_i: f.imu_vars.bg_i,
    }
}

pub fn landmark_var(values: &mut Values, p: Vector3<f64>) -> VarId {
    values.add(Value::Vec3(p))
}

/// Consistency scenarios: gentle dynamics so the stated residual tolerances
/// measure model agreement, not hold-age artifacts.
pub fn scenario_static() -> (TrajectorySpec, SensorRig) {
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Static,
        duration: 10.0,
        rotation_amplitude: [0.0; 3],
        rotation_frequency: [0.0; 3],
    };
    (spec, SensorRig::default_rig())
}

pub fn scenario_circle() -> (TrajectorySpec, SensorRig) {
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Circle { radius: 2.0, speed: 0.2 },
        duration: 20.0,
        rotation_amplitude: [0.0; 3],
        rotation_frequency: [0.0; 3],
    };
    (spec, SensorRig::default_rig())
}

pub fn scenario_lissajous() -> (TrajectorySpec, SensorRig) {
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Lissajous {
            amplitude: [0.8, 0.5, 0.25],
            frequency_hz: [0.02, 0.03, 0.025],
        },
        duration: 20.0,
        rotation_amplitude: [0.08, 0.06, 0.12],
        rotation_frequency: [0.05, 0.04, 0.06],
    };
    let mut rig = SensorRig::default_rig();
    // Hold-age error is the ZOH model's own approximation; sample the DVL at
    // the IMU rate here so the tolerance measures model consistency.
    rig.imu_hz = 300.0;
    rig.dvl_hz = 300.0;
    (spec, rig)
}

/// A motion-rich calibration scenario: 3D velocity and all three rotation
/// axes excited.
pub fn scenario_calibration(duration: f64) -> (TrajectorySpec, SensorRig) {
    let spec = TrajectorySpec {
        kind: TrajectoryKind::Lissajous {
            amplitude: [1.2, 0.9, 0.5],
            frequency_hz: [0.06, 0.09, 0.12],
        },
        duration,
        rotation_amplitude: [0.25, 0.22, 0.45],
        rotation_frequency: [0.10, 0.13, 0.08],
    };
    (spec, SensorRig::default_rig())
}

pub fn noisy(mut rig: SensorRig) -> SensorRig {
    rig.noise = NoiseSpec::realistic();
    rig
}

pub fn default_world() -> WorldSpec {
    WorldSpec::default()
}
