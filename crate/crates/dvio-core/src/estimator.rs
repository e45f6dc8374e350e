//! End-to-end sliding-window estimator: per keyframe it pre-integrates the
//! IMU and DVL streams since the last keyframe, adds DVL velocity, DVL
//! translation, IMU and reprojection factors, solves the window, and trims
//! it with a drop-with-prior policy. Keyframes without camera observations
//! fall back to acoustic-inertial estimation and are flagged.

use std::collections::HashMap;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dvl::{projection_vectors, solve_body_velocity, BodyVelocity, TransducerGeometry, TransducerMeasurement};
use crate::factors::{
    BiasRandomWalkFactor, DvlTranslationFactor, DvlTranslationVars, DvlVelocityFactor, ImuFactor,
    ImuVars, PriorComponent, PriorFactor, ReprojectionFactor, RotationConvention, Value, VarId,
};
use crate::imu::{ImuBias, ImuNoise, ImuSample};
use crate::optimizer::{solve, Problem, SolveError, SolverSettings};
use crate::preintegration::{
    hold_velocities, integrate_accel, integrate_dvl, integrate_gyro, GyroPreintegration,
    PreintegratedDvl, PreintegratedImu, PreintegrationError,
};
use crate::sim::{CameraFrame, SyntheticDataset};
use crate::state::{CameraObservation, ExtrinsicSet, GravityModel, KeyframeState, Landmark};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Sliding-window capacity in keyframes.
    pub window_size: usize,
    /// Every Nth camera frame becomes a keyframe.
    pub keyframe_every: usize,
    pub extrinsics: ExtrinsicSet,
    pub gravity: f64,
    /// Drop DVL factors entirely (visual-inertial ablation).
    pub use_dvl: bool,
    /// Drop camera factors entirely (acoustic-inertial dead reckoning).
    pub use_camera: bool,
    pub noise_floor: f64,
    /// Random-walk densities chaining biases between consecutive keyframes.
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    /// Prior standard deviations on the first state
    /// [rot, pos, vel, bg, ba].
    pub initial_prior_sigmas: [f64; 5],
    pub bias_threshold: f64,
    pub sigma_phi: f64,
    pub approx_enabled: bool,
    pub max_obs_per_keyframe: usize,
    pub solver: SolverSettings,
}

impl EstimatorConfig {
    pub fn new(extrinsics: ExtrinsicSet) -> Self {
        EstimatorConfig {
            window_size: 10,
            keyframe_every: 1,
            extrinsics,
            gravity: 9.81,
            use_dvl: true,
            use_camera: true,
            noise_floor: 1e-6,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            initial_prior_sigmas: [1e-6, 1e-6, 1e-2, 1e-3, 1e-2],
            bias_threshold: 1e-3,
            sigma_phi: 1e-2,
            approx_enabled: true,
            max_obs_per_keyframe: 30,
            solver: SolverSettings { max_iterations: 15, ..Default::default() },
        }
    }
}

/// Estimation mode of one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyframeMode {
    VisualInertialAcoustic,
    AcousticInertialFallback,
}

impl KeyframeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeyframeMode::VisualInertialAcoustic => "visual_inertial_acoustic",
            KeyframeMode::AcousticInertialFallback => "acoustic_inertial_fallback",
        }
    }
}

/// One output state of the estimator.
#[derive(Debug, Clone, Copy)]
pub struct EstimateEntry {
    pub t: f64,
    pub state: KeyframeState,
    pub mode: KeyframeMode,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryEstimate {
    pub entries: Vec<EstimateEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Solver(#[from] SolveError),
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
    #[error("dataset has no camera clock")]
    NoCameraClock,
}

/// Input streams for the estimator (sensor side only).
pub struct EstimatorInput<'a> {
    pub imu: &'a [ImuSample],
    pub dvl: &'a [TransducerMeasurement],
    pub frames: &'a [CameraFrame],
    pub landmark_hint: Option<&'a [Landmark]>,
    pub camera: CameraModel,
    /// Keyframe clock: start, rate, count (independent of dropout).
    pub cam_t0: f64,
    pub cam_hz: f64,
    pub cam_count: usize,
    pub dvl_hz: f64,
    pub nominal_geometry: TransducerGeometry,
    pub imu_noise: ImuNoise,
}

impl<'a> EstimatorInput<'a> {
    pub fn from_dataset(dataset: &'a SyntheticDataset) -> Self {
        EstimatorInput {
            imu: &dataset.imu,
            dvl: &dataset.dvl,
            frames: &dataset.frames,
            landmark_hint: None,
            camera: dataset.rig.camera,
            cam_t0: dataset.cam_t0,
            cam_hz: dataset.rig.cam_hz,
            cam_count: dataset.cam_count,
            dvl_hz: dataset.rig.dvl_hz,
            nominal_geometry: TransducerGeometry::nominal(),
            imu_noise: ImuNoise {
                gyro_density: dataset.rig.noise.gyro_noise_density,
                accel_density: dataset.rig.noise.accel_noise_density,
            },
        }
    }
}

struct WindowKeyframe {
    t: f64,
    state: KeyframeState,
    mode: KeyframeMode,
    /// Measured DVL body velocity nearest this keyframe, if any.
    dvl_velocity: Option<BodyVelocity>,
    observations: Vec<CameraObservation>,
    /// Pre-integrations over the interval ending at this keyframe.
    gyro: Option<GyroPreintegration>,
    imu_pre: Option<PreintegratedImu>,
    dvl_pre: Option<PreintegratedDvl>,
}

/// Prior on the oldest window state installed when older keyframes drop out.
struct BoundaryPrior {
    state: KeyframeState,
    covariance: DMatrix<f64>,
}

/// Runs the estimator over the whole input. Never aborts on camera dropout;
/// affected keyframes are flagged as acoustic-inertial fallback.
pub fn run_estimator(
    input: &EstimatorInput<'_>,
    config: &EstimatorConfig,
) -> Result<TrajectoryEstimate, EstimatorError> {
    if input.cam_count == 0 || input.cam_hz <= 0.0 {
        return Err(EstimatorError::NoCameraClock);
    }
    let e_nominal = projection_vectors(&input.nominal_geometry);
    let body_velocities: Vec<BodyVelocity> = input
        .dvl
        .iter()
        .filter_map(|m| solve_body_velocity(m, &e_nominal).ok())
        .collect();
    let frames_by_time: HashMap<i64, &CameraFrame> =
        input.frames.iter().map(|f| (time_key(f.t, input.cam_hz), f)).collect();

    let keyframe_times: Vec<f64> = (0..input.cam_count)
        .step_by(config.keyframe_every.max(1))
        .map(|k| input.cam_t0 + k as f64 / input.cam_hz)
        .collect();

    let gravity = GravityModel { magnitude: config.gravity };
    let mut window: Vec<WindowKeyframe> = Vec::new();
    let mut boundary_prior: Option<BoundaryPrior> = None;
    let mut estimate = TrajectoryEstimate::default();
    // Landmark estimates persist while observed by the window.
    let mut landmark_estimates: HashMap<u64, Vector3<f64>> = HashMap::new();

    for &t in keyframe_times.iter() {
        let frame = frames_by_time.get(&time_key(t, input.cam_hz));
        let observations: Vec<CameraObservation> = if config.use_camera {
            frame
                .map(|f| f.observations.iter().take(config.max_obs_per_keyframe).cloned().collect())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        let mode = if observations.is_empty() {
            KeyframeMode::AcousticInertialFallback
        } else {
            KeyframeMode::VisualInertialAcoustic
        };
        let dvl_velocity = nearest_velocity(&body_velocities, t, 0.55 / input.dvl_hz.max(1e-3));

        if window.is_empty() {
            // First keyframe anchors the reference frame.
            let mut state = KeyframeState::origin();
            if let Some(v) = &dvl_velocity {
                state.velocity = v.v;
            }
            window.push(WindowKeyframe {
                t,
                state,
                mode,
                dvl_velocity,
                observations,
                gyro: None,
                imu_pre: None,
                dvl_pre: None,
            });
            seed_new_landmarks(&mut landmark_estimates, &window[0], &input.camera);
            continue;
        }

        // Pre-integrate the interval from the previous keyframe.
        let prev = window.last().unwrap();
        let t_prev = prev.t;
        let prev_state = prev.state;
        let samples = crate::preintegration::clip_samples(input.imu, t_prev, t);
        if samples.is_empty() {
            continue;
        }
        let gyro = integrate_gyro(&samples, &prev_state.bias.gyro, &input.imu_noise, Some(t))?;
        let imu_pre = integrate_accel(&gyro, &prev_state.bias, &input.imu_noise);
        let dvl_pre = if config.use_dvl {
            let usable: Vec<BodyVelocity> = body_velocities
                .iter()
                .filter(|v| v.timestamp <= t + 1e-9)
                .cloned()
                .collect();
            match hold_velocities(&gyro, &usable, t_prev) {
                Ok(held) => Some(integrate_dvl(&gyro, &held, &config.extrinsics.t_id.rotation)?),
                Err(_) => None,
            }
        } else {
            None
        };

        // Predict the new state by dead reckoning.
        let state = predict_state(&prev_state, &gyro, &imu_pre, dvl_pre.as_ref(), &config.extrinsics, &dvl_velocity, t - t_prev);
        window.push(WindowKeyframe {
            t,
            state,
            mode,
            dvl_velocity,
            observations,
            gyro: Some(gyro),
            imu_pre: Some(imu_pre),
            dvl_pre,
        });
        seed_new_landmarks(&mut landmark_estimates, window.last().unwrap(), &input.camera);

        // Solve the window.
        solve_window(&mut window, &mut landmark_estimates, boundary_prior.as_ref(), input, config, &gravity)?;

        // Trim to capacity, installing a prior on the new oldest state.
        if window.len() > config.window_size {
            let marginal = window_marginal(&mut window, &mut landmark_estimates, boundary_prior.as_ref(), input, config, &gravity, 1)?;
            let dropped = window.remove(0);
            estimate.entries.push(EstimateEntry { t: dropped.t, state: dropped.state, mode: dropped.mode });
            let oldest = &window[0];
            boundary_prior = Some(BoundaryPrior { state: oldest.state, covariance: marginal });
            // Forget landmarks no longer observed in the window.
            let live: std::collections::HashSet<u64> = window
                .iter()
                .flat_map(|kf| kf.observations.iter().map(|o| o.landmark_id))
                .collect();
            landmark_estimates.retain(|id, _| live.contains(id));
        }

    }

    // Flush the remaining window states.
    for kf in &window {
        estimate.entries.push(EstimateEntry { t: kf.t, state: kf.state, mode: kf.mode });
    }
    estimate.entries.sort_by(|a, b| a.t.total_cmp(&b.t));
    estimate.entries.dedup_by(|a, b| (a.t - b.t).abs() < 1e-9);
    Ok(estimate)
}

fn time_key(t: f64, hz: f64) -> i64 {
    (t * hz).round() as i64
}

fn nearest_velocity(velocities: &[BodyVelocity], t: f64, tol: f64) -> Option<BodyVelocity> {
    velocities
        .iter()
        .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
        .filter(|v| (v.timestamp - t).abs() <= tol)
        .cloned()
}

/// Dead-reckoning prediction of the next keyframe state.
#[allow(clippy::too_many_arguments)]
fn predict_state(
    prev: &KeyframeState,
    gyro: &GyroPreintegration,
    _imu_pre: &PreintegratedImu,
    dvl_pre: Option<&PreintegratedDvl>,
    extrinsics: &ExtrinsicSet,
    dvl_velocity: &Option<BodyVelocity>,
    dt: f64,
) -> KeyframeState {
    let r_ic = extrinsics.r_ic();
    let r_j = prev.rotation * r_ic.inverse() * gyro.delta_r * r_ic;

    let position = if let Some(pre) = dvl_pre {
        // Invert the DVL translation model for p_j.
        let r_id = extrinsics.t_id.rotation;
        let r_dc = extrinsics.t_dc.rotation;
        let q = extrinsics.t_dc.translation;
        let a = prev.rotation.inverse() * r_j;
        let rhs = r_id.inverse() * pre.delta_p_bar - q + r_dc * (a * (r_dc.inverse() * q));
        prev.position + prev.rotation * (r_dc.inverse() * rhs)
    } else {
        // No DVL: constant-velocity dead reckoning.
        let v_c0 = prev.rotation * (extrinsics.t_dc.rotation.inverse() * prev.velocity);
        prev.position + v_c0 * dt
    };

    let velocity = dvl_velocity.map(|v| v.v).unwrap_or(prev.velocity);
    KeyframeState { rotation: r_j.renormalized(), position, velocity, bias: prev.bias }
}

struct WindowVars {
    pose: Vec<(VarId, VarId)>,
    vel: Vec<VarId>,
    bg: Vec<VarId>,
    ba: Vec<VarId>,
    landmarks: HashMap<u64, VarId>,
}

/// Builds the window problem. `fix_count` keyframes at the front are frozen
/// (used for marginal extraction of the next boundary prior).
#[allow(clippy::too_many_arguments)]
fn build_window_problem(
    window: &[WindowKeyframe],
    landmark_estimates: &HashMap<u64, Vector3<f64>>,
    boundary_prior: Option<&BoundaryPrior>,
    input: &EstimatorInput<'_>,
    config: &EstimatorConfig,
    gravity: &GravityModel,
) -> (Problem, WindowVars) {
    let mut problem = Problem::new();
    let mut vars = WindowVars {
        pose: Vec::new(),
        vel: Vec::new(),
        bg: Vec::new(),
        ba: Vec::new(),
        landmarks: HashMap::new(),
    };

    for (i, kf) in window.iter().enumerate() {
        let rot = problem.add_variable(Value::Rot(kf.state.rotation, RotationConvention::RightMultiply));
        let pos = problem.add_variable(Value::Vec3(kf.state.position));
        let vel = problem.add_variable(Value::Vec3(kf.state.velocity));
        let bg = problem.add_variable(Value::Vec3(kf.state.bias.gyro));
        let bav = problem.add_variable(Value::Vec3(kf.state.bias.accel));
        if i == 0 && boundary_prior.is_none() {
            // Gauge: the first keyframe of the run is the reference.
            problem.set_fixed(rot, true);
            problem.set_fixed(pos, true);
        }
        vars.pose.push((rot, pos));
        vars.vel.push(vel);
        vars.bg.push(bg);
        vars.ba.push(bav);
    }

    // Extrinsics are known constants in the estimator.
    let rot_id = problem.add_fixed_variable(Value::Rot(config.extrinsics.t_id.rotation, RotationConvention::LeftMultiply));
    let trans_id = problem.add_fixed_variable(Value::Vec3(config.extrinsics.t_id.translation));
    let rot_dc = problem.add_fixed_variable(Value::Rot(config.extrinsics.t_dc.rotation, RotationConvention::LeftMultiply));
    let trans_dc = problem.add_fixed_variable(Value::Vec3(config.extrinsics.t_dc.translation));
    let rot_wi0 = problem.add_fixed_variable(Value::Rot(config.extrinsics.r_wi0, RotationConvention::LeftMultiply));

    // Boundary prior (or the strong initial prior on the very first state).
    if let Some(prior) = boundary_prior {
        problem.add_factor(Box::new(PriorFactor::new(
            vec![vars.pose[0].0, vars.pose[0].1, vars.vel[0], vars.bg[0], vars.ba[0]],
            vec![
                PriorComponent::Rotation(prior.state.rotation),
                PriorComponent::Vector(prior.state.position),
                PriorComponent::Vector(prior.state.velocity),
                PriorComponent::Vector(prior.state.bias.gyro),
                PriorComponent::Vector(prior.state.bias.accel),
            ],
            &prior.covariance,
            config.noise_floor,
        )));
    } else {
        let s = &config.initial_prior_sigmas;
        problem.add_factor(Box::new(PriorFactor::isotropic(
            vec![vars.vel[0], vars.bg[0], vars.ba[0]],
            vec![
                PriorComponent::Vector(window[0].state.velocity),
                PriorComponent::Vector(Vector3::zeros()),
                PriorComponent::Vector(Vector3::zeros()),
            ],
            &[s[2], s[3], s[4]],
            config.noise_floor,
        )));
    }

    for (i, kf) in window.iter().enumerate() {
        // DVL velocity measurement at this keyframe.
        if config.use_dvl {
            if let Some(v) = &kf.dvl_velocity {
                problem.add_factor(Box::new(DvlVelocityFactor::new(
                    vars.vel[i],
                    v.v,
                    &v.covariance,
                    config.noise_floor,
                )));
            }
        }
        // Camera observations.
        for obs in &kf.observations {
            let Some(l0) = landmark_estimates.get(&obs.landmark_id) else { continue };
            let lm = *vars.landmarks.entry(obs.landmark_id).or_insert_with(|| {
                let v = problem.add_variable(Value::Vec3(*l0));
                problem.set_eliminable(v);
                v
            });
            problem.add_factor(Box::new(ReprojectionFactor::new(
                vars.pose[i].0,
                vars.pose[i].1,
                lm,
                *obs,
                input.camera,
                config.noise_floor,
            )));
        }
        if i == 0 {
            continue;
        }
        // Relative-motion factors over interval (i-1, i).
        let dt = kf.t - window[i - 1].t;
        if let Some(pre) = &kf.imu_pre {
            let mut f = ImuFactor::new(
                ImuVars {
                    rot_i: vars.pose[i - 1].0,
                    pos_i: vars.pose[i - 1].1,
                    rot_j: vars.pose[i].0,
                    pos_j: vars.pose[i].1,
                    vel_i: vars.vel[i - 1],
                    vel_j: vars.vel[i],
                    rot_id,
                    rot_dc,
                    trans_id,
                    trans_dc,
                    rot_wi0,
                    bg_i: vars.bg[i - 1],
                    ba_i: vars.ba[i - 1],
                },
                pre.clone(),
                *gravity,
                config.noise_floor,
            );
            f.bias_threshold = config.bias_threshold;
            problem.add_factor(Box::new(f));
        }
        if let (Some(gyro), Some(dvl_pre)) = (&kf.gyro, &kf.dvl_pre) {
            let mut f = DvlTranslationFactor::new(
                DvlTranslationVars {
                    rot_i: vars.pose[i - 1].0,
                    pos_i: vars.pose[i - 1].1,
                    rot_j: vars.pose[i].0,
                    pos_j: vars.pose[i].1,
                    rot_id,
                    rot_dc,
                    trans_dc,
                    bg_i: vars.bg[i - 1],
                },
                gyro.clone(),
                dvl_pre.clone(),
                config.noise_floor,
            );
            f.sigma_phi = config.sigma_phi;
            f.bias_threshold = config.bias_threshold;
            f.approx_enabled = config.approx_enabled;
            problem.add_factor(Box::new(f));
        }
        // Bias random walks chain consecutive keyframes.
        problem.add_factor(Box::new(BiasRandomWalkFactor::new(
            vars.bg[i - 1],
            vars.bg[i],
            config.gyro_bias_walk * dt.sqrt(),
            config.noise_floor.max(1e-8),
        )));
        problem.add_factor(Box::new(BiasRandomWalkFactor::new(
            vars.ba[i - 1],
            vars.ba[i],
            config.accel_bias_walk * dt.sqrt(),
            config.noise_floor.max(1e-8),
        )));
    }

    (problem, vars)
}

fn solve_window(
    window: &mut [WindowKeyframe],
    landmark_estimates: &mut HashMap<u64, Vector3<f64>>,
    boundary_prior: Option<&BoundaryPrior>,
    input: &EstimatorInput<'_>,
    config: &EstimatorConfig,
    gravity: &GravityModel,
) -> Result<(), EstimatorError> {
    let (mut problem, vars) = build_window_problem(window, landmark_estimates, boundary_prior, input, config, gravity);
    solve(&mut problem, &config.solver)?;
    for (i, kf) in window.iter_mut().enumerate() {
        kf.state = KeyframeState {
            rotation: problem.values.rot(vars.pose[i].0),
            position: problem.values.vec3(vars.pose[i].1),
            velocity: problem.values.vec3(vars.vel[i]),
            bias: ImuBias {
                gyro: problem.values.vec3(vars.bg[i]),
                accel: problem.values.vec3(vars.ba[i]),
            },
        };
    }
    for (id, var) in &vars.landmarks {
        landmark_estimates.insert(*id, problem.values.vec3(*var));
    }
    Ok(())
}

/// Marginal covariance of the state at window index `index` from the last
/// solve's linearization.
#[allow(clippy::too_many_arguments)]
fn window_marginal(
    window: &mut [WindowKeyframe],
    landmark_estimates: &mut HashMap<u64, Vector3<f64>>,
    boundary_prior: Option<&BoundaryPrior>,
    input: &EstimatorInput<'_>,
    config: &EstimatorConfig,
    gravity: &GravityModel,
    index: usize,
) -> Result<DMatrix<f64>, EstimatorError> {
    let (mut problem, vars) = build_window_problem(window, landmark_estimates, boundary_prior, input, config, gravity);
    let ids = [
        vars.pose[index].0,
        vars.pose[index].1,
        vars.vel[index],
        vars.bg[index],
        vars.ba[index],
    ];
    let cov = problem.marginal_covariance(&ids).or_else(|_| {
        // Degenerate linearization: fall back to a loose diagonal prior.
        Ok::<DMatrix<f64>, SolveError>(DMatrix::identity(15, 15) * 1e-2)
    })?;
    // Guard against negative round-off eigenvalues.
    let mut sym = (cov.clone() + cov.transpose()) * 0.5;
    for i in 0..sym.nrows() {
        sym[(i, i)] = sym[(i, i)].max(1e-12);
    }
    Ok(sym)
}

/// First stereo sighting of a landmark back-projects into the map.
fn seed_new_landmarks(
    landmarks: &mut HashMap<u64, Vector3<f64>>,
    kf: &WindowKeyframe,
    cam: &CameraModel,
) {
    for obs in &kf.observations {
        if landmarks.contains_key(&obs.landmark_id) {
            continue;
        }
        let Some(ur) = obs.u_right else { continue };
        if let Some(x) = cam.back_project(obs.u, obs.v, ur) {
            landmarks.insert(obs.landmark_id, kf.state.rotation * x + kf.state.position);
        }
    }
}
