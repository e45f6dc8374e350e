//! Synthetic ground-truth world and sensor synthesis: IMU samples with bias
//! walk and white noise, per-transducer DVL returns, landmark pixel
//! observations, plus the ground-truth streams that verify every factor in
//! the estimation stack.

pub mod trajectory;

pub use trajectory::{Trajectory, TrajectoryKind, TrajectorySpec};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dvl::{synthesize_transducer_velocities, TransducerGeometry, TransducerMeasurement};
use crate::geometry::{hat, RigidTransform, Rotation};
use crate::imu::{ImuBias, ImuSample};
use crate::state::{CameraObservation, ExtrinsicSet, KeyframeState, Landmark};

/// Sensor noise description; white-noise terms are continuous densities,
/// bias walks are random-walk densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_walk: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_walk: f64,
    /// Per-transducer radial velocity std, m/s.
    pub sigma_d: f64,
    /// Pixel noise std.
    pub pixel_std: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            gyro_noise_density: 0.0,
            gyro_bias_walk: 0.0,
            accel_noise_density: 0.0,
            accel_bias_walk: 0.0,
            sigma_d: 0.0,
            pixel_std: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
        }
    }

    /// Tank-grade sensors: the default noisy configuration.
    pub fn realistic() -> Self {
        NoiseSpec {
            gyro_noise_density: 1e-3,
            gyro_bias_walk: 1e-5,
            accel_noise_density: 1e-2,
            accel_bias_walk: 1e-4,
            sigma_d: 0.01,
            pixel_std: 1.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
        }
    }
}

/// Physical sensor suite: true extrinsics, true transducer geometry, camera
/// intrinsics, rates and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub t_id: RigidTransform,
    pub t_dc: RigidTransform,
    pub transducers: TransducerGeometry,
    pub camera: CameraModel,
    pub imu_hz: f64,
    pub dvl_hz: f64,
    pub cam_hz: f64,
    pub gravity: f64,
    pub noise: NoiseSpec,
}

impl SensorRig {
    /// Paper-grade rates (330/20/5 Hz), nominal geometry, identity extrinsics.
    pub fn default_rig() -> Self {
        SensorRig {
            t_id: RigidTransform::identity(),
            t_dc: RigidTransform::identity(),
            transducers: TransducerGeometry::nominal(),
            camera: CameraModel::default_stereo(),
            imu_hz: 330.0,
            dvl_hz: 5.0,
            cam_hz: 20.0,
            gravity: 9.81,
            noise: NoiseSpec::noiseless(),
        }
    }

    pub fn r_ic(&self) -> Rotation {
        self.t_id.rotation * self.t_dc.rotation
    }

    /// Position of the IMU in the camera frame.
    pub fn p_ci(&self) -> Vector3<f64> {
        (self.t_id * self.t_dc).inverse().translation
    }

    /// Position of the DVL in the camera frame.
    pub fn p_cd(&self) -> Vector3<f64> {
        self.t_dc.inverse().translation
    }
}

/// Landmark field parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub landmark_count: usize,
    /// Half-extent of the landmark box around the trajectory, meters.
    pub spread: f64,
    /// Minimum landmarks visible from every camera frame.
    pub min_visible: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec { landmark_count: 500, spread: 6.0, min_visible: 8 }
    }
}

/// One camera frame: keyframe time plus the visible landmark observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub t: f64,
    pub observations: Vec<CameraObservation>,
}

/// Ground-truth state at one camera time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthState {
    pub t: f64,
    pub r_wc: Rotation,
    pub p_wc: Vector3<f64>,
    /// True velocity of the DVL origin in the DVL frame.
    pub v_d: Vector3<f64>,
    pub bias: ImuBias,
}

/// Truth side of a dataset, kept separate from the sensor streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub r_wi0: Rotation,
    pub t_wc0: RigidTransform,
    pub states: Vec<GroundTruthState>,
    pub extrinsics: ExtrinsicSet,
    pub transducers: TransducerGeometry,
}

impl GroundTruth {
    /// Keyframe states in the initial camera frame (the estimator's frame).
    pub fn state_in_c0(&self, s: &GroundTruthState) -> KeyframeState {
        let t0_inv = self.t_wc0.inverse();
        KeyframeState {
            rotation: t0_inv.rotation * s.r_wc,
            position: t0_inv.act(&s.p_wc),
            velocity: s.v_d,
            bias: s.bias,
        }
    }
}

/// Complete synthetic dataset: sensor streams, landmark map and truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub rig: SensorRig,
    pub duration: f64,
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<TransducerMeasurement>,
    pub frames: Vec<CameraFrame>,
    /// Camera clock (start, rate, count) independent of frame dropout.
    pub cam_t0: f64,
    pub cam_count: usize,
    /// Landmarks in the initial camera frame.
    pub landmarks: Vec<Landmark>,
    pub ground_truth: GroundTruth,
}

#[derive(Debug, thiserror::Error)]
pub enum SimulatorError {
    #[error("sensor rates must satisfy imu >= dvl and imu >= camera (got {imu}/{dvl}/{cam})")]
    BadRates { imu: f64, dvl: f64, cam: f64 },
    #[error("could not place {needed} visible landmarks for every frame")]
    LandmarkPlacement { needed: usize },
}

struct TruthEval<'a> {
    traj: &'a Trajectory,
    rig: &'a SensorRig,
}

impl TruthEval<'_> {
    /// True angular velocity in the IMU frame.
    fn omega_i(&self, s: &trajectory::TrajectorySample) -> Vector3<f64> {
        self.rig.r_ic() * s.omega_c
    }

    /// True specific force in the IMU frame (gravity included).
    fn specific_force(&self, s: &trajectory::TrajectorySample) -> Vector3<f64> {
        let p_ci = self.rig.p_ci();
        let a_wi = s.a_wc
            + *s.r_wc.matrix() * ((hat(&s.alpha_c) + hat(&s.omega_c) * hat(&s.omega_c)) * p_ci);
        let r_wi = s.r_wc * self.rig.r_ic().inverse();
        let g_w = Vector3::new(0.0, 0.0, -self.rig.gravity);
        r_wi.inverse() * (a_wi - g_w)
    }

    /// True velocity of the DVL origin expressed in the DVL frame.
    fn v_dvl(&self, s: &trajectory::TrajectorySample) -> Vector3<f64> {
        let p_cd = self.rig.p_cd();
        let v_wd = s.v_wc + *s.r_wc.matrix() * (hat(&s.omega_c) * p_cd);
        let r_wd = s.r_wc * self.rig.t_dc.rotation.inverse();
        r_wd.inverse() * v_wd
    }

    fn sample(&self, t: f64) -> trajectory::TrajectorySample {
        self.traj.sample(t)
    }
}

/// Generates a complete synthetic dataset. Identical seeds give bit-identical
/// datasets.
pub fn generate(
    spec: &TrajectorySpec,
    rig: &SensorRig,
    world: &WorldSpec,
    seed: u64,
) -> Result<SyntheticDataset, SimulatorError> {
    if rig.imu_hz < rig.dvl_hz || rig.imu_hz < rig.cam_hz {
        return Err(SimulatorError::BadRates { imu: rig.imu_hz, dvl: rig.dvl_hz, cam: rig.cam_hz });
    }
    let traj = spec.build();
    let truth = TruthEval { traj: &traj, rig };
    let duration = spec.duration;

    let mut rng_imu = stream_rng(seed, 1);
    let mut rng_dvl = stream_rng(seed, 2);
    let mut rng_cam = stream_rng(seed, 3);
    let mut rng_world = stream_rng(seed, 4);

    // IMU stream with bias random walk, recording the bias trace for truth.
    let n_imu = (duration * rig.imu_hz).round() as usize;
    let dt = 1.0 / rig.imu_hz;
    let mut bias = ImuBias {
        gyro: Vector3::from_row_slice(&rig.noise.initial_gyro_bias),
        accel: Vector3::from_row_slice(&rig.noise.initial_accel_bias),
    };
    let gyro_sigma = rig.noise.gyro_noise_density * rig.imu_hz.sqrt();
    let accel_sigma = rig.noise.accel_noise_density * rig.imu_hz.sqrt();
    let mut imu = Vec::with_capacity(n_imu);
    let mut bias_trace: Vec<(f64, ImuBias)> = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = k as f64 * dt;
        let s = truth.sample(t);
        let omega = truth.omega_i(&s) + bias.gyro + randn3(&mut rng_imu, gyro_sigma);
        let accel = truth.specific_force(&s) + bias.accel + randn3(&mut rng_imu, accel_sigma);
        imu.push(ImuSample { omega, accel, timestamp: t });
        bias_trace.push((t, bias));
        bias.gyro += randn3(&mut rng_imu, rig.noise.gyro_bias_walk * dt.sqrt());
        bias.accel += randn3(&mut rng_imu, rig.noise.accel_bias_walk * dt.sqrt());
    }

    // DVL stream: true body velocity through each (true) transducer direction.
    let n_dvl = (duration * rig.dvl_hz).round() as usize;
    let mut dvl = Vec::with_capacity(n_dvl);
    for k in 0..n_dvl {
        let t = k as f64 / rig.dvl_hz;
        let s = truth.sample(t);
        let v = truth.v_dvl(&s);
        dvl.push(synthesize_transducer_velocities(
            &v,
            &rig.transducers,
            rig.noise.sigma_d,
            t,
            &mut rng_dvl,
        ));
    }

    // Landmarks in the world frame, topped up until every frame sees enough.
    let n_cam = (duration * rig.cam_hz).round() as usize;
    let cam_times: Vec<f64> = (0..n_cam).map(|k| k as f64 / rig.cam_hz).collect();
    let landmarks_w = place_landmarks(&truth, world, &cam_times, &mut rng_world)?;

    // Camera frames: noiseless culling, then pixel noise on kept points.
    let pixel_noise = Normal::new(0.0, rig.noise.pixel_std.max(0.0)).unwrap();
    let mut frames = Vec::with_capacity(n_cam);
    for &t in &cam_times {
        let s = truth.sample(t);
        let mut observations = Vec::new();
        for (id, l_w) in landmarks_w.iter().enumerate() {
            if let Some((u, v, ur)) = project_visible(&s, l_w, &rig.camera) {
                let (nu, nv, nur) = if rig.noise.pixel_std > 0.0 {
                    (
                        u + pixel_noise.sample(&mut rng_cam),
                        v + pixel_noise.sample(&mut rng_cam),
                        ur + pixel_noise.sample(&mut rng_cam),
                    )
                } else {
                    (u, v, ur)
                };
                observations.push(CameraObservation {
                    landmark_id: id as u64,
                    u: nu,
                    v: nv,
                    u_right: Some(nur),
                    sigma: rig.noise.pixel_std,
                });
            }
        }
        frames.push(CameraFrame { t, observations });
    }

    // Truth streams at camera times; landmarks re-expressed in C0.
    let s0 = truth.sample(0.0);
    let t_wc0 = RigidTransform::new(s0.r_wc, s0.p_wc);
    let t_c0w = t_wc0.inverse();
    let r_wi0 = s0.r_wc * rig.r_ic().inverse();
    let mut states = Vec::with_capacity(n_cam);
    let mut bias_idx = 0;
    for &t in &cam_times {
        let s = truth.sample(t);
        while bias_idx + 1 < bias_trace.len() && bias_trace[bias_idx + 1].0 <= t + 1e-12 {
            bias_idx += 1;
        }
        let bias = if bias_trace.is_empty() { ImuBias::zero() } else { bias_trace[bias_idx].1 };
        states.push(GroundTruthState { t, r_wc: s.r_wc, p_wc: s.p_wc, v_d: truth.v_dvl(&s), bias });
    }
    let landmarks: Vec<Landmark> = landmarks_w
        .iter()
        .enumerate()
        .map(|(id, l_w)| Landmark { id: id as u64, position: t_c0w.act(l_w) })
        .collect();

    Ok(SyntheticDataset {
        seed,
        rig: rig.clone(),
        duration,
        imu,
        dvl,
        frames,
        cam_t0: 0.0,
        cam_count: n_cam,
        landmarks,
        ground_truth: GroundTruth {
            r_wi0,
            t_wc0,
            states,
            extrinsics: ExtrinsicSet { t_id: rig.t_id, t_dc: rig.t_dc, r_wi0 },
            transducers: rig.transducers,
        },
    })
}

/// Removes camera frames inside the given [start, end) windows; all other
/// streams are untouched.
pub fn degrade_vision(dataset: &SyntheticDataset, schedule: &[(f64, f64)]) -> SyntheticDataset {
    let mut out = dataset.clone();
    out.frames.retain(|f| !schedule.iter().any(|(a, b)| f.t >= *a && f.t < *b));
    out
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn randn3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma <= 0.0 {
        return Vector3::zeros();
    }
    let n = StandardNormal;
    Vector3::new(
        sigma * Distribution::<f64>::sample(&n, rng),
        sigma * Distribution::<f64>::sample(&n, rng),
        sigma * Distribution::<f64>::sample(&n, rng),
    )
}

fn project_visible(
    s: &trajectory::TrajectorySample,
    l_w: &Vector3<f64>,
    cam: &CameraModel,
) -> Option<(f64, f64, f64)> {
    let x = s.r_wc.inverse() * (l_w - s.p_wc);
    if x.z < 0.3 || x.z > 40.0 {
        return None;
    }
    let px = cam.project(&x)?;
    let ur = cam.project_right_u(&x)?;
    if !cam.in_bounds(&px) || ur < 0.0 || ur >= cam.width as f64 {
        return None;
    }
    Some((px.x, px.y, ur))
}

/// Uniform landmarks in a box around the trajectory, topped up in front of
/// any camera frame that would otherwise see too few.
fn place_landmarks(
    truth: &TruthEval<'_>,
    world: &WorldSpec,
    cam_times: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vector3<f64>>, SimulatorError> {
    let mut landmarks = Vec::with_capacity(world.landmark_count);
    let duration = truth.traj.duration;
    for _ in 0..world.landmark_count {
        let t = rng.gen_range(0.0..duration.max(1e-9));
        let s = truth.sample(t);
        // Biased ahead of the camera so static and slow paths see texture.
        let depth = rng.gen_range(1.5..world.spread.max(2.5));
        let forward = *s.r_wc.matrix() * Vector3::new(
            rng.gen_range(-0.6..0.6) * depth,
            rng.gen_range(-0.45..0.45) * depth,
            depth,
        );
        landmarks.push(s.p_wc + forward);
    }

    let cam = truth.rig.camera;
    for _round in 0..20 {
        let mut all_ok = true;
        for &t in cam_times {
            let s = truth.sample(t);
            let visible =
                landmarks.iter().filter(|l| project_visible(&s, l, &cam).is_some()).count();
            if visible < world.min_visible {
                all_ok = false;
                for _ in 0..(world.min_visible - visible + 4) {
                    let depth = rng.gen_range(2.0..8.0);
                    let u = rng.gen_range(0.15..0.85) * cam.width as f64;
                    let v = rng.gen_range(0.15..0.85) * cam.height as f64;
                    let x = Vector3::new(
                        (u - cam.cx) * depth / cam.fx,
                        (v - cam.cy) * depth / cam.fy,
                        depth,
                    );
                    landmarks.push(*s.r_wc.matrix() * x + s.p_wc);
                }
            }
        }
        if all_ok {
            return Ok(landmarks);
        }
    }
    Err(SimulatorError::LandmarkPlacement { needed: world.min_visible })
}

/// Convenience: nearest ground-truth state to a timestamp.
pub fn nearest_state(truth: &GroundTruth, t: f64) -> &GroundTruthState {
    truth
        .states
        .iter()
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .expect("ground truth is non-empty")
}
