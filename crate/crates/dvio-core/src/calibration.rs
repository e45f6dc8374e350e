//! Online sensor calibration: the coarse-to-fine extrinsic pipeline
//! (vision-only bundle adjustment, extrinsic initialization, gyro-bias
//! refinement, gravity-direction initialization, full refinement) and the
//! DVL transducer misalignment pipeline (bundle adjustment, body-velocity
//! optimization, transducer-angle optimization), both using the rapid
//! linearized update of the DVL translation pre-integration inside the
//! optimizer iterations.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dvl::{projection_vectors, solve_body_velocity, BodyVelocity, TransducerGeometry, TransducerMeasurement};
use crate::factors::{
    dvl_translation_model, BodyVelocityFitFactor, DvlTranslationFactor, DvlTranslationVars,
    DvlVelocityFactor, ImuFactor, ImuRotationFactor, ImuVars, ImuVelocityFactor,
    ReprojectionFactor, RotationConvention, TransducerAngleFactor, Value, VarId,
};
use crate::geometry::{RigidTransform, Rotation};
use crate::imu::{ImuBias, ImuNoise, ImuSample};
use crate::optimizer::{solve, Problem, SolveError, SolveReport, SolverSettings};
use crate::preintegration::{
    hold_velocities, integrate_accel, integrate_dvl, integrate_gyro, PreintegrationError,
};
use crate::sim::SyntheticDataset;
use crate::state::{CameraObservation, ExtrinsicSet, GravityModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Buffer capacity; calibration uses at most this many keyframes.
    pub max_keyframes: usize,
    /// Minimum keyframes before calibration may run.
    pub min_keyframes: usize,
    /// Keyframe decimation: every Nth camera frame enters the buffer.
    pub keyframe_every: usize,
    /// Linearized-update threshold on the extrinsic rotation increment, rad.
    pub sigma_phi: f64,
    /// Linearized-update threshold on a body-velocity increment, m/s.
    pub sigma_v: f64,
    /// Bias move that triggers exact re-integration, rad/s or m/s^2.
    pub bias_threshold: f64,
    /// Standard-deviation floor keeping zero-noise covariances invertible.
    pub noise_floor: f64,
    /// Cap on reprojection factors per keyframe in the bundle adjustment.
    pub max_obs_per_keyframe: usize,
    pub gravity: f64,
    pub approx_enabled: bool,
    pub solver: SolverSettings,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            max_keyframes: 100,
            min_keyframes: 10,
            keyframe_every: 4,
            sigma_phi: 1e-2,
            sigma_v: 1e-2,
            bias_threshold: 1e-3,
            noise_floor: 1e-6,
            max_obs_per_keyframe: 40,
            gravity: 9.81,
            approx_enabled: true,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("too few keyframes or co-observations for calibration ({got} keyframes, need {need})")]
    TooFewObservations { got: usize, need: usize },
    #[error("degenerate visual reconstruction")]
    InsufficientParallax,
    #[error("trajectory does not excite enough axes ({detail})")]
    InsufficientExcitation { detail: String },
    #[error("velocity samples span fewer than 3 dimensions")]
    DegenerateMotion,
    #[error(transparent)]
    Solver(#[from] SolveError),
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
}

/// Everything between two consecutive keyframes.
#[derive(Debug, Clone)]
pub struct IntervalData {
    pub t_start: f64,
    pub t_end: f64,
    pub imu: Vec<ImuSample>,
    /// Body velocities (nominal-geometry solve) usable in this interval,
    /// including the latest one at or before `t_start`.
    pub velocities: Vec<BodyVelocity>,
    /// Raw transducer measurements inside the interval.
    pub transducer: Vec<TransducerMeasurement>,
}

/// Measurement buffer feeding both calibration pipelines.
#[derive(Debug, Clone)]
pub struct CalibrationBuffer {
    pub keyframe_times: Vec<f64>,
    pub observations: Vec<Vec<CameraObservation>>,
    pub intervals: Vec<IntervalData>,
    /// Measured body velocity nearest each keyframe.
    pub kf_velocity: Vec<BodyVelocity>,
    pub camera: CameraModel,
    pub gravity: f64,
    pub sigma_d: f64,
    pub imu_noise: ImuNoise,
    pub nominal_geometry: TransducerGeometry,
}

impl CalibrationBuffer {
    /// Builds the buffer from raw streams. Body velocities come from the
    /// closed-form solve with the *nominal* transducer geometry.
    pub fn from_streams(
        imu: &[ImuSample],
        dvl: &[TransducerMeasurement],
        frames: &[(f64, Vec<CameraObservation>)],
        camera: CameraModel,
        gravity: f64,
        imu_noise: ImuNoise,
        config: &CalibrationConfig,
    ) -> Result<Self, CalibrationError> {
        let nominal = TransducerGeometry::nominal();
        let e = projection_vectors(&nominal);
        let velocities: Vec<BodyVelocity> = dvl
            .iter()
            .filter_map(|m| solve_body_velocity(m, &e).ok())
            .collect();

        let kept: Vec<&(f64, Vec<CameraObservation>)> = frames
            .iter()
            .step_by(config.keyframe_every.max(1))
            .take(config.max_keyframes)
            .collect();
        if kept.len() < config.min_keyframes {
            return Err(CalibrationError::TooFewObservations {
                got: kept.len(),
                need: config.min_keyframes,
            });
        }

        let keyframe_times: Vec<f64> = kept.iter().map(|f| f.0).collect();
        let observations: Vec<Vec<CameraObservation>> =
            kept.iter().map(|f| f.1.clone()).collect();

        let mut intervals = Vec::with_capacity(keyframe_times.len() - 1);
        for w in keyframe_times.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            let samples = crate::preintegration::clip_samples(imu, t0, t1);
            let vels: Vec<BodyVelocity> = velocities
                .iter()
                .filter(|v| v.timestamp <= t1 + 1e-9)
                .cloned()
                .collect();
            let trans: Vec<TransducerMeasurement> = dvl
                .iter()
                .filter(|m| m.timestamp >= t0 - 1e-9 && m.timestamp < t1 - 1e-9)
                .cloned()
                .collect();
            intervals.push(IntervalData { t_start: t0, t_end: t1, imu: samples, velocities: vels, transducer: trans });
        }

        let kf_velocity: Vec<BodyVelocity> = keyframe_times
            .iter()
            .map(|t| {
                velocities
                    .iter()
                    .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
                    .cloned()
                    .unwrap_or(BodyVelocity {
                        v: Vector3::zeros(),
                        covariance: Matrix3::identity(),
                        timestamp: *t,
                    })
            })
            .collect();

        Ok(CalibrationBuffer {
            keyframe_times,
            observations,
            intervals,
            kf_velocity,
            camera,
            gravity,
            sigma_d: dvl.first().map(|m| m.sigma_d).unwrap_or(0.0),
            imu_noise,
            nominal_geometry: nominal,
        })
    }

    pub fn from_dataset(dataset: &SyntheticDataset, config: &CalibrationConfig) -> Result<Self, CalibrationError> {
        let frames: Vec<(f64, Vec<CameraObservation>)> =
            dataset.frames.iter().map(|f| (f.t, f.observations.clone())).collect();
        Self::from_streams(
            &dataset.imu,
            &dataset.dvl,
            &frames,
            dataset.rig.camera,
            dataset.rig.gravity,
            ImuNoise {
                gyro_density: dataset.rig.noise.gyro_noise_density,
                accel_density: dataset.rig.noise.accel_noise_density,
            },
            config,
        )
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframe_times.len()
    }
}

/// Vision-only bundle adjustment output; poses and landmarks are fixed in
/// every later stage.
#[derive(Debug, Clone)]
pub struct VisionBa {
    pub poses: Vec<(Rotation, Vector3<f64>)>,
    pub landmarks: HashMap<u64, Vector3<f64>>,
    pub report: SolveReport,
}

/// Stage one: poses and landmarks from the camera observations alone.
pub fn vision_only_ba(buffer: &CalibrationBuffer, config: &CalibrationConfig) -> Result<VisionBa, CalibrationError> {
    let k = buffer.n_keyframes();
    if k < config.min_keyframes {
        return Err(CalibrationError::TooFewObservations { got: k, need: config.min_keyframes });
    }
    for w in 0..k - 1 {
        let a: std::collections::HashSet<u64> =
            buffer.observations[w].iter().map(|o| o.landmark_id).collect();
        let shared = buffer.observations[w + 1].iter().filter(|o| a.contains(&o.landmark_id)).count();
        if shared < 3 {
            return Err(CalibrationError::TooFewObservations { got: shared, need: 3 });
        }
    }

    // Incremental bootstrap: stereo back-projection seeds landmarks, a
    // pose-only solve localizes each next keyframe against them.
    let cam = buffer.camera;
    let mut poses: Vec<(Rotation, Vector3<f64>)> = vec![(Rotation::identity(), Vector3::zeros())];
    let mut landmarks: HashMap<u64, Vector3<f64>> = HashMap::new();
    seed_landmarks(&mut landmarks, &buffer.observations[0], &poses[0], &cam);
    for i in 1..k {
        let init = poses[i - 1];
        let pose = localize(&buffer.observations[i], &landmarks, init, &cam, config)?;
        poses.push(pose);
        seed_landmarks(&mut landmarks, &buffer.observations[i], &pose, &cam);
    }

    // Global refinement with the first pose fixed.
    let mut problem = Problem::new();
    let mut pose_vars = Vec::with_capacity(k);
    for (i, (r, p)) in poses.iter().enumerate() {
        let rot = problem.add_variable(Value::Rot(*r, RotationConvention::RightMultiply));
        let pos = problem.add_variable(Value::Vec3(*p));
        if i == 0 {
            problem.set_fixed(rot, true);
            problem.set_fixed(pos, true);
        }
        pose_vars.push((rot, pos));
    }
    let mut lm_vars: HashMap<u64, VarId> = HashMap::new();
    for (i, obs_list) in buffer.observations.iter().enumerate() {
        for obs in obs_list.iter().take(config.max_obs_per_keyframe) {
            let Some(pos0) = landmarks.get(&obs.landmark_id) else { continue };
            let lm = *lm_vars.entry(obs.landmark_id).or_insert_with(|| {
                let v = problem.add_variable(Value::Vec3(*pos0));
                problem.set_eliminable(v);
                v
            });
            problem.add_factor(Box::new(ReprojectionFactor::new(
                pose_vars[i].0,
                pose_vars[i].1,
                lm,
                *obs,
                cam,
                config.noise_floor,
            )));
        }
    }
    let report = solve(&mut problem, &config.solver).map_err(|e| match e {
        SolveError::SingularNormalEquations => CalibrationError::InsufficientParallax,
        other => CalibrationError::Solver(other),
    })?;

    let refined_poses: Vec<(Rotation, Vector3<f64>)> = pose_vars
        .iter()
        .map(|(r, p)| (problem.values.rot(*r), problem.values.vec3(*p)))
        .collect();
    let refined_landmarks: HashMap<u64, Vector3<f64>> =
        lm_vars.iter().map(|(id, v)| (*id, problem.values.vec3(*v))).collect();
    Ok(VisionBa { poses: refined_poses, landmarks: refined_landmarks, report })
}

fn seed_landmarks(
    landmarks: &mut HashMap<u64, Vector3<f64>>,
    observations: &[CameraObservation],
    pose: &(Rotation, Vector3<f64>),
    cam: &CameraModel,
) {
    for obs in observations {
        if landmarks.contains_key(&obs.landmark_id) {
            continue;
        }
        let Some(ur) = obs.u_right else { continue };
        if let Some(x) = cam.back_project(obs.u, obs.v, ur) {
            landmarks.insert(obs.landmark_id, pose.0 * x + pose.1);
        }
    }
}

/// Pose-only solve of one keyframe against known landmarks.
fn localize(
    observations: &[CameraObservation],
    landmarks: &HashMap<u64, Vector3<f64>>,
    init: (Rotation, Vector3<f64>),
    cam: &CameraModel,
    config: &CalibrationConfig,
) -> Result<(Rotation, Vector3<f64>), CalibrationError> {
    let mut problem = Problem::new();
    let rot = problem.add_variable(Value::Rot(init.0, RotationConvention::RightMultiply));
    let pos = problem.add_variable(Value::Vec3(init.1));
    let mut used = 0;
    for obs in observations {
        let Some(l) = landmarks.get(&obs.landmark_id) else { continue };
        let lm = problem.add_fixed_variable(Value::Vec3(*l));
        problem.add_factor(Box::new(ReprojectionFactor::new(rot, pos, lm, *obs, *cam, config.noise_floor)));
        used += 1;
        if used >= config.max_obs_per_keyframe {
            break;
        }
    }
    if used < 3 {
        return Err(CalibrationError::TooFewObservations { got: used, need: 3 });
    }
    let mut settings = config.solver.clone();
    settings.max_iterations = 25;
    solve(&mut problem, &settings)?;
    Ok((problem.values.rot(rot), problem.values.vec3(pos)))
}

/// Current calibration parameter estimates threaded through the stages.
#[derive(Debug, Clone)]
pub struct CalibrationState {
    pub r_id: Rotation,
    pub p_id: Vector3<f64>,
    pub r_dc: Rotation,
    pub p_dc: Vector3<f64>,
    pub r_wi0: Rotation,
    pub gyro_bias: Vec<Vector3<f64>>,
    pub accel_bias: Vec<Vector3<f64>>,
}

impl CalibrationState {
    pub fn identity(n_intervals: usize) -> Self {
        CalibrationState {
            r_id: Rotation::identity(),
            p_id: Vector3::zeros(),
            r_dc: Rotation::identity(),
            p_dc: Vector3::zeros(),
            r_wi0: Rotation::identity(),
            gyro_bias: vec![Vector3::zeros(); n_intervals],
            accel_bias: vec![Vector3::zeros(); n_intervals],
        }
    }

    pub fn extrinsics(&self) -> ExtrinsicSet {
        ExtrinsicSet {
            t_id: RigidTransform::new(self.r_id, self.p_id),
            t_dc: RigidTransform::new(self.r_dc, self.p_dc),
            r_wi0: self.r_wi0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StageOptions {
    free_rot_id: bool,
    free_trans_id: bool,
    free_rot_dc: bool,
    free_trans_dc: bool,
    free_gravity: bool,
    free_bg: bool,
    free_ba: bool,
    use_dvl_translation: bool,
    use_imu_rotation: bool,
    use_imu_velocity: bool,
    use_combined_imu: bool,
}

/// Builds and solves one calibration stage over fixed vision poses.
fn solve_stage(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &mut CalibrationState,
    opts: StageOptions,
    config: &CalibrationConfig,
) -> Result<SolveReport, CalibrationError> {
    let k = buffer.n_keyframes();
    let gravity = GravityModel { magnitude: buffer.gravity };
    let mut problem = Problem::new();

    // Fixed keyframe poses and measured velocities.
    let mut pose_vars = Vec::with_capacity(k);
    let mut vel_vars = Vec::with_capacity(k);
    for i in 0..k {
        let rot = problem.add_fixed_variable(Value::Rot(ba.poses[i].0, RotationConvention::RightMultiply));
        let pos = problem.add_fixed_variable(Value::Vec3(ba.poses[i].1));
        let vel = problem.add_fixed_variable(Value::Vec3(buffer.kf_velocity[i].v));
        pose_vars.push((rot, pos));
        vel_vars.push(vel);
    }

    // Extrinsics and gravity orientation.
    let rot_id = problem.add_variable(Value::Rot(state.r_id, RotationConvention::LeftMultiply));
    let trans_id = problem.add_variable(Value::Vec3(state.p_id));
    let rot_dc = problem.add_variable(Value::Rot(state.r_dc, RotationConvention::LeftMultiply));
    let trans_dc = problem.add_variable(Value::Vec3(state.p_dc));
    let rot_wi0 = problem.add_variable(Value::Rot(state.r_wi0, RotationConvention::LeftMultiply));
    problem.set_fixed(rot_id, !opts.free_rot_id);
    problem.set_fixed(trans_id, !opts.free_trans_id);
    problem.set_fixed(rot_dc, !opts.free_rot_dc);
    problem.set_fixed(trans_dc, !opts.free_trans_dc);
    problem.set_fixed(rot_wi0, !opts.free_gravity);

    // Per-interval biases.
    let mut bg_vars = Vec::with_capacity(k - 1);
    let mut ba_vars = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let bg = problem.add_variable(Value::Vec3(state.gyro_bias[i]));
        let bav = problem.add_variable(Value::Vec3(state.accel_bias[i]));
        problem.set_fixed(bg, !opts.free_bg);
        problem.set_fixed(bav, !opts.free_ba);
        bg_vars.push(bg);
        ba_vars.push(bav);
    }

    for i in 0..k - 1 {
        let interval = &buffer.intervals[i];
        let bias = ImuBias { gyro: state.gyro_bias[i], accel: state.accel_bias[i] };
        let gyro = integrate_gyro(&interval.imu, &bias.gyro, &buffer.imu_noise, Some(interval.t_end))?;
        let imu_vars = ImuVars {
            rot_i: pose_vars[i].0,
            pos_i: pose_vars[i].1,
            rot_j: pose_vars[i + 1].0,
            pos_j: pose_vars[i + 1].1,
            vel_i: vel_vars[i],
            vel_j: vel_vars[i + 1],
            rot_id,
            rot_dc,
            trans_id,
            trans_dc,
            rot_wi0,
            bg_i: bg_vars[i],
            ba_i: ba_vars[i],
        };

        if opts.use_dvl_translation {
            let held = hold_velocities(&gyro, &interval.velocities, interval.t_start)?;
            let dvl_pre = integrate_dvl(&gyro, &held, &state.r_id)?;
            let mut f = DvlTranslationFactor::new(
                DvlTranslationVars {
                    rot_i: pose_vars[i].0,
                    pos_i: pose_vars[i].1,
                    rot_j: pose_vars[i + 1].0,
                    pos_j: pose_vars[i + 1].1,
                    rot_id,
                    rot_dc,
                    trans_dc,
                    bg_i: bg_vars[i],
                },
                gyro.clone(),
                dvl_pre,
                config.noise_floor,
            );
            f.sigma_phi = config.sigma_phi;
            f.bias_threshold = config.bias_threshold;
            f.approx_enabled = config.approx_enabled;
            problem.add_factor(Box::new(f));
        }

        let pre = integrate_accel(&gyro, &bias, &buffer.imu_noise);
        if opts.use_combined_imu {
            let mut f = ImuFactor::new(imu_vars, pre, gravity, config.noise_floor);
            f.bias_threshold = config.bias_threshold;
            problem.add_factor(Box::new(f));
        } else {
            if opts.use_imu_rotation {
                let mut f = ImuRotationFactor::new(imu_vars, pre.clone(), config.noise_floor);
                f.bias_threshold = config.bias_threshold;
                problem.add_factor(Box::new(f));
            }
            if opts.use_imu_velocity {
                let mut f = ImuVelocityFactor::new(imu_vars, pre, gravity, config.noise_floor);
                f.bias_threshold = config.bias_threshold;
                problem.add_factor(Box::new(f));
            }
        }
    }

    let report = solve(&mut problem, &config.solver)?;

    state.r_id = problem.values.rot(rot_id);
    state.p_id = problem.values.vec3(trans_id);
    state.r_dc = problem.values.rot(rot_dc);
    state.p_dc = problem.values.vec3(trans_dc);
    state.r_wi0 = problem.values.rot(rot_wi0);
    for i in 0..k - 1 {
        state.gyro_bias[i] = problem.values.vec3(bg_vars[i]);
        state.accel_bias[i] = problem.values.vec3(ba_vars[i]);
    }
    Ok(report)
}

/// Stage two: extrinsics only, zero gyro bias assumed.
pub fn extrinsic_init(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &mut CalibrationState,
    config: &CalibrationConfig,
) -> Result<SolveReport, CalibrationError> {
    solve_stage(
        buffer,
        ba,
        state,
        StageOptions {
            free_rot_id: true,
            free_rot_dc: true,
            free_trans_dc: true,
            use_dvl_translation: true,
            use_imu_rotation: true,
            ..Default::default()
        },
        config,
    )
}

/// Stage three: same residuals with per-keyframe gyro biases freed.
pub fn extrinsic_refine_with_bias(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &mut CalibrationState,
    config: &CalibrationConfig,
) -> Result<SolveReport, CalibrationError> {
    solve_stage(
        buffer,
        ba,
        state,
        StageOptions {
            free_rot_id: true,
            free_rot_dc: true,
            free_trans_dc: true,
            free_bg: true,
            use_dvl_translation: true,
            use_imu_rotation: true,
            ..Default::default()
        },
        config,
    )
}

/// Stage four: gravity direction only, from the rotation+velocity residuals.
pub fn gravity_init(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &mut CalibrationState,
    config: &CalibrationConfig,
) -> Result<SolveReport, CalibrationError> {
    // Alignment seed from the mean specific force; fails only when the
    // accelerometer sees essentially no gravity.
    let mut mean = Vector3::zeros();
    let mut count = 0;
    for interval in &buffer.intervals {
        for s in &interval.imu {
            mean += s.accel;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CalibrationError::InsufficientExcitation { detail: "no accelerometer samples".into() });
    }
    mean /= count as f64;
    if mean.norm() < 0.5 * buffer.gravity {
        return Err(CalibrationError::InsufficientExcitation {
            detail: format!("mean specific force {:.3} m/s^2", mean.norm()),
        });
    }
    // a ~ R_WI0^T(-g_w) near the start, so -mean seeds the gravity direction.
    let g_i0 = -mean;
    state.r_wi0 = Rotation::between_vectors(&g_i0, &Vector3::new(0.0, 0.0, -buffer.gravity));

    solve_stage(
        buffer,
        ba,
        state,
        StageOptions {
            free_gravity: true,
            use_imu_rotation: true,
            use_imu_velocity: true,
            ..Default::default()
        },
        config,
    )
}

/// Stage five: joint refinement of extrinsics, gravity and both bias sets
/// over the DVL translation residual and all three IMU residuals.
pub fn full_refine(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &mut CalibrationState,
    config: &CalibrationConfig,
) -> Result<SolveReport, CalibrationError> {
    solve_stage(
        buffer,
        ba,
        state,
        StageOptions {
            free_rot_id: true,
            free_trans_id: true,
            free_rot_dc: true,
            free_trans_dc: true,
            free_gravity: true,
            free_bg: true,
            free_ba: true,
            use_dvl_translation: true,
            use_combined_imu: true,
            ..Default::default()
        },
        config,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub approx_hits: u64,
    pub approx_misses: u64,
}

fn stage_report(stage: &str, r: &SolveReport) -> StageReport {
    StageReport {
        stage: stage.into(),
        iterations: r.iterations,
        initial_cost: r.initial_cost,
        final_cost: r.final_cost,
        approx_hits: r.approx_hits,
        approx_misses: r.approx_misses,
    }
}

/// Full extrinsic calibration result with per-stage diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrinsicCalibrationReport {
    pub extrinsics: ExtrinsicSet,
    pub gyro_bias_mean: [f64; 3],
    pub accel_bias_mean: [f64; 3],
    pub stages: Vec<StageReport>,
    pub approx_hits: u64,
    pub approx_misses: u64,
    /// Square roots of the final marginal-covariance diagonal for
    /// [phi_ID, p_ID, phi_DC, p_DC, phi_WI0].
    pub confidence: Vec<f64>,
    pub keyframes: usize,
}

impl ExtrinsicCalibrationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("extrinsic calibration over {} keyframes\n", self.keyframes));
        for s in &self.stages {
            out.push_str(&format!(
                "  {:<22} iters {:<3} cost {:.6e} -> {:.6e} (fast {} / full {})\n",
                s.stage, s.iterations, s.initial_cost, s.final_cost, s.approx_hits, s.approx_misses
            ));
        }
        let e = &self.extrinsics;
        out.push_str(&format!(
            "  R_ID angle {:.5} rad, p_ID {:?}\n  R_DC angle {:.5} rad, p_DC {:?}\n",
            e.t_id.rotation.angle(),
            e.t_id.translation.as_slice(),
            e.t_dc.rotation.angle(),
            e.t_dc.translation.as_slice(),
        ));
        out
    }
}

/// Motion observability guard: the buffer must excite at least two rotation
/// axes and three velocity directions.
pub fn check_observability(buffer: &CalibrationBuffer) -> Result<(), CalibrationError> {
    let mut gyro_cov = Matrix3::zeros();
    let mut n = 0.0;
    for interval in &buffer.intervals {
        for s in &interval.imu {
            gyro_cov += s.omega * s.omega.transpose();
            n += 1.0;
        }
    }
    if n > 0.0 {
        gyro_cov /= n;
    }
    let gyro_ev = gyro_cov.symmetric_eigenvalues();
    let gyro_axes = gyro_ev.iter().filter(|&&e| e > 1e-8 * gyro_ev.max().max(1e-12) && e > 1e-10).count();
    if gyro_axes < 2 {
        return Err(CalibrationError::InsufficientExcitation {
            detail: format!("rotation axes excited: {gyro_axes} (need 2)"),
        });
    }

    let mut vel_cov = Matrix3::zeros();
    let mut m = 0.0;
    for v in &buffer.kf_velocity {
        vel_cov += v.v * v.v.transpose();
        m += 1.0;
    }
    if m > 0.0 {
        vel_cov /= m;
    }
    let vel_ev = vel_cov.symmetric_eigenvalues();
    let vel_axes = vel_ev.iter().filter(|&&e| e > 1e-6 * vel_ev.max().max(1e-12) && e > 1e-12).count();
    if vel_axes < 3 {
        return Err(CalibrationError::InsufficientExcitation {
            detail: format!("velocity directions excited: {vel_axes} (need 3)"),
        });
    }
    Ok(())
}

/// Runs the five-stage extrinsic calibration pipeline from identity
/// initialization.
pub fn run_extrinsic_calibration(
    buffer: &CalibrationBuffer,
    config: &CalibrationConfig,
) -> Result<(ExtrinsicCalibrationReport, CalibrationState), CalibrationError> {
    check_observability(buffer)?;
    let ba = vision_only_ba(buffer, config)?;
    let mut state = CalibrationState::identity(buffer.intervals.len());
    let mut stages = vec![stage_report("vision_ba", &ba.report)];

    let r2 = extrinsic_init(buffer, &ba, &mut state, config)?;
    stages.push(stage_report("extrinsic_init", &r2));
    let r3 = extrinsic_refine_with_bias(buffer, &ba, &mut state, config)?;
    stages.push(stage_report("extrinsic_bias_refine", &r3));
    let r4 = gravity_init(buffer, &ba, &mut state, config)?;
    stages.push(stage_report("gravity_init", &r4));
    let r5 = full_refine(buffer, &ba, &mut state, config)?;
    stages.push(stage_report("full_refine", &r5));

    let (hits, misses) = stages.iter().fold((0, 0), |a, s| (a.0 + s.approx_hits, a.1 + s.approx_misses));
    let n_b = state.gyro_bias.len().max(1) as f64;
    let bg_mean = state.gyro_bias.iter().sum::<Vector3<f64>>() / n_b;
    let ba_mean = state.accel_bias.iter().sum::<Vector3<f64>>() / n_b;
    let confidence = confidence_diagonal(buffer, &ba, &state, config).unwrap_or_default();

    let report = ExtrinsicCalibrationReport {
        extrinsics: state.extrinsics(),
        gyro_bias_mean: [bg_mean.x, bg_mean.y, bg_mean.z],
        accel_bias_mean: [ba_mean.x, ba_mean.y, ba_mean.z],
        stages,
        approx_hits: hits,
        approx_misses: misses,
        confidence,
        keyframes: buffer.n_keyframes(),
    };
    Ok((report, state))
}

/// Re-solves the final stage problem once to extract the marginal standard
/// deviations of the extrinsic parameters.
fn confidence_diagonal(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    state: &CalibrationState,
    config: &CalibrationConfig,
) -> Option<Vec<f64>> {
    let s = state.clone();
    let cfg = config.clone();
    // Rebuild the stage-five problem at the solution, then read H^-1.
    let mut problem = Problem::new();
    let gravity = GravityModel { magnitude: buffer.gravity };
    let mut pose_vars = Vec::new();
    let mut vel_vars = Vec::new();
    for i in 0..buffer.n_keyframes() {
        pose_vars.push((
            problem.add_fixed_variable(Value::Rot(ba.poses[i].0, RotationConvention::RightMultiply)),
            problem.add_fixed_variable(Value::Vec3(ba.poses[i].1)),
        ));
        vel_vars.push(problem.add_fixed_variable(Value::Vec3(buffer.kf_velocity[i].v)));
    }
    let rot_id = problem.add_variable(Value::Rot(s.r_id, RotationConvention::LeftMultiply));
    let trans_id = problem.add_variable(Value::Vec3(s.p_id));
    let rot_dc = problem.add_variable(Value::Rot(s.r_dc, RotationConvention::LeftMultiply));
    let trans_dc = problem.add_variable(Value::Vec3(s.p_dc));
    let rot_wi0 = problem.add_variable(Value::Rot(s.r_wi0, RotationConvention::LeftMultiply));
    for i in 0..buffer.n_keyframes() - 1 {
        let interval = &buffer.intervals[i];
        let bias = ImuBias { gyro: s.gyro_bias[i], accel: s.accel_bias[i] };
        let gyro = integrate_gyro(&interval.imu, &bias.gyro, &buffer.imu_noise, Some(interval.t_end)).ok()?;
        let held = hold_velocities(&gyro, &interval.velocities, interval.t_start).ok()?;
        let dvl_pre = integrate_dvl(&gyro, &held, &s.r_id).ok()?;
        let bg = problem.add_fixed_variable(Value::Vec3(s.gyro_bias[i]));
        let bav = problem.add_fixed_variable(Value::Vec3(s.accel_bias[i]));
        problem.add_factor(Box::new(DvlTranslationFactor::new(
            DvlTranslationVars {
                rot_i: pose_vars[i].0,
                pos_i: pose_vars[i].1,
                rot_j: pose_vars[i + 1].0,
                pos_j: pose_vars[i + 1].1,
                rot_id,
                rot_dc,
                trans_dc,
                bg_i: bg,
            },
            gyro.clone(),
            dvl_pre,
            cfg.noise_floor,
        )));
        let pre = integrate_accel(&gyro, &bias, &buffer.imu_noise);
        let imu_vars = ImuVars {
            rot_i: pose_vars[i].0,
            pos_i: pose_vars[i].1,
            rot_j: pose_vars[i + 1].0,
            pos_j: pose_vars[i + 1].1,
            vel_i: vel_vars[i],
            vel_j: vel_vars[i + 1],
            rot_id,
            rot_dc,
            trans_id,
            trans_dc,
            rot_wi0,
            bg_i: bg,
            ba_i: bav,
        };
        problem.add_factor(Box::new(ImuFactor::new(imu_vars, pre, gravity, cfg.noise_floor)));
    }
    let cov = problem
        .marginal_covariance(&[rot_id, trans_id, rot_dc, trans_dc, rot_wi0])
        .ok()?;
    Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
}

/// Straightforward joint one-shot estimation of everything (poses,
/// landmarks, velocities, extrinsics, biases, gravity) from naive
/// initialization. Kept as the baseline the staged pipeline is measured
/// against.
pub fn run_joint_calibration(
    buffer: &CalibrationBuffer,
    config: &CalibrationConfig,
) -> Result<(ExtrinsicSet, SolveReport), CalibrationError> {
    let cam = buffer.camera;
    let gravity = GravityModel { magnitude: buffer.gravity };
    let k = buffer.n_keyframes();
    let mut problem = Problem::new();

    // All poses start at identity; landmarks from back-projection at identity.
    let mut pose_vars = Vec::with_capacity(k);
    let mut vel_vars = Vec::with_capacity(k);
    for i in 0..k {
        let rot = problem.add_variable(Value::Rot(Rotation::identity(), RotationConvention::RightMultiply));
        let pos = problem.add_variable(Value::Vec3(Vector3::zeros()));
        if i == 0 {
            problem.set_fixed(rot, true);
            problem.set_fixed(pos, true);
        }
        let vel = problem.add_variable(Value::Vec3(buffer.kf_velocity[i].v));
        pose_vars.push((rot, pos));
        vel_vars.push(vel);
    }
    let mut landmarks: HashMap<u64, VarId> = HashMap::new();
    for obs_list in &buffer.observations {
        for obs in obs_list.iter().take(config.max_obs_per_keyframe) {
            if let (false, Some(ur)) = (landmarks.contains_key(&obs.landmark_id), obs.u_right) {
                if let Some(x) = cam.back_project(obs.u, obs.v, ur) {
                    let v = problem.add_variable(Value::Vec3(x));
                    problem.set_eliminable(v);
                    landmarks.insert(obs.landmark_id, v);
                }
            }
        }
    }
    let rot_id = problem.add_variable(Value::Rot(Rotation::identity(), RotationConvention::LeftMultiply));
    let trans_id = problem.add_variable(Value::Vec3(Vector3::zeros()));
    let rot_dc = problem.add_variable(Value::Rot(Rotation::identity(), RotationConvention::LeftMultiply));
    let trans_dc = problem.add_variable(Value::Vec3(Vector3::zeros()));
    let rot_wi0 = problem.add_variable(Value::Rot(Rotation::identity(), RotationConvention::LeftMultiply));

    for (i, obs_list) in buffer.observations.iter().enumerate() {
        for obs in obs_list.iter().take(config.max_obs_per_keyframe) {
            if let Some(lm) = landmarks.get(&obs.landmark_id) {
                problem.add_factor(Box::new(ReprojectionFactor::new(
                    pose_vars[i].0,
                    pose_vars[i].1,
                    *lm,
                    *obs,
                    cam,
                    config.noise_floor,
                )));
            }
        }
    }
    for i in 0..k - 1 {
        let interval = &buffer.intervals[i];
        let gyro = integrate_gyro(&interval.imu, &Vector3::zeros(), &buffer.imu_noise, Some(interval.t_end))?;
        let held = hold_velocities(&gyro, &interval.velocities, interval.t_start)?;
        let dvl_pre = integrate_dvl(&gyro, &held, &Rotation::identity())?;
        let bg = problem.add_variable(Value::Vec3(Vector3::zeros()));
        let bav = problem.add_variable(Value::Vec3(Vector3::zeros()));
        let mut f = DvlTranslationFactor::new(
            DvlTranslationVars {
                rot_i: pose_vars[i].0,
                pos_i: pose_vars[i].1,
                rot_j: pose_vars[i + 1].0,
                pos_j: pose_vars[i + 1].1,
                rot_id,
                rot_dc,
                trans_dc,
                bg_i: bg,
            },
            gyro.clone(),
            dvl_pre,
            config.noise_floor,
        );
        f.sigma_phi = config.sigma_phi;
        f.approx_enabled = config.approx_enabled;
        problem.add_factor(Box::new(f));
        let pre = integrate_accel(&gyro, &ImuBias::zero(), &buffer.imu_noise);
        problem.add_factor(Box::new(ImuFactor::new(
            ImuVars {
                rot_i: pose_vars[i].0,
                pos_i: pose_vars[i].1,
                rot_j: pose_vars[i + 1].0,
                pos_j: pose_vars[i + 1].1,
                vel_i: vel_vars[i],
                vel_j: vel_vars[i + 1],
                rot_id,
                rot_dc,
                trans_id,
                trans_dc,
                rot_wi0,
                bg_i: bg,
                ba_i: bav,
            },
            pre,
            gravity,
            config.noise_floor,
        )));
        problem.add_factor(Box::new(DvlVelocityFactor::new(
            vel_vars[i],
            buffer.kf_velocity[i].v,
            &buffer.kf_velocity[i].covariance,
            config.noise_floor.max(1e-3),
        )));
    }

    let report = solve(&mut problem, &config.solver)?;
    Ok((
        ExtrinsicSet {
            t_id: RigidTransform::new(problem.values.rot(rot_id), problem.values.vec3(trans_id)),
            t_dc: RigidTransform::new(problem.values.rot(rot_dc), problem.values.vec3(trans_dc)),
            r_wi0: problem.values.rot(rot_wi0),
        },
        report,
    ))
}

/// Transducer alignment estimate with per-parameter confidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisalignmentReport {
    pub geometry: TransducerGeometry,
    /// sqrt of marginal variance per angle: [a1, b1, a2, b2, a3, b3, a4, b4].
    pub confidence: Vec<f64>,
    pub stages: Vec<StageReport>,
    pub keyframes: usize,
}

impl MisalignmentReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("DVL misalignment calibration over {} keyframes\n", self.keyframes);
        for s in &self.stages {
            out.push_str(&format!(
                "  {:<22} iters {:<3} cost {:.6e} -> {:.6e}\n",
                s.stage, s.iterations, s.initial_cost, s.final_cost
            ));
        }
        for n in 0..4 {
            out.push_str(&format!(
                "  transducer {}: alpha {:.4} deg, beta {:.4} deg\n",
                n + 1,
                self.geometry.alpha[n].to_degrees(),
                self.geometry.beta[n].to_degrees()
            ));
        }
        out
    }
}

/// Stage two of the misalignment pipeline: one body velocity per keyframe
/// interval from the fixed vision poses and gyro increments.
pub fn misalignment_body_velocity_opt(
    buffer: &CalibrationBuffer,
    ba: &VisionBa,
    extrinsics: &ExtrinsicSet,
    config: &CalibrationConfig,
) -> Result<(Vec<Vector3<f64>>, SolveReport), CalibrationError> {
    let k = buffer.n_keyframes();
    let mut problem = Problem::new();
    let mut vel_vars = Vec::with_capacity(k - 1);
    for i in 0..k - 1 {
        let interval = &buffer.intervals[i];
        let gyro = integrate_gyro(&interval.imu, &Vector3::zeros(), &buffer.imu_noise, Some(interval.t_end))?;
        let v_init = buffer.kf_velocity[i].v;
        // The model holds one velocity across the whole interval.
        let held: Vec<(BodyVelocity, usize)> = gyro
            .steps
            .iter()
            .map(|_| {
                (
                    BodyVelocity {
                        v: v_init,
                        covariance: buffer.kf_velocity[i].covariance,
                        timestamp: interval.t_start,
                    },
                    0,
                )
            })
            .collect();
        let pre = integrate_dvl(&gyro, &held, &extrinsics.t_id.rotation)?;
        let model = dvl_translation_model(
            &ba.poses[i].0,
            &ba.poses[i].1,
            &ba.poses[i + 1].0,
            &ba.poses[i + 1].1,
            &extrinsics.t_id.rotation,
            &extrinsics.t_dc.rotation,
            &extrinsics.t_dc.translation,
        );
        let vel = problem.add_variable(Value::Vec3(v_init));
        let mut f = BodyVelocityFitFactor::new(vel, pre, model.h, v_init, config.noise_floor);
        f.sigma_v = config.sigma_v;
        problem.add_factor(Box::new(f));
        vel_vars.push(vel);
    }
    let report = solve(&mut problem, &config.solver)?;
    let velocities = vel_vars.iter().map(|v| problem.values.vec3(*v)).collect();
    Ok((velocities, report))
}

/// Stage three: per-transducer tilt/yaw angles from the radial measurements
/// and the optimized body velocities.
pub fn misalignment_transducer_opt(
    buffer: &CalibrationBuffer,
    velocities: &[Vector3<f64>],
    config: &CalibrationConfig,
) -> Result<(TransducerGeometry, Vec<f64>, SolveReport), CalibrationError> {
    // Observability: the optimized velocities must span three dimensions.
    let mut cov = Matrix3::zeros();
    for v in velocities {
        cov += v * v.transpose();
    }
    cov /= velocities.len().max(1) as f64;
    let ev = cov.symmetric_eigenvalues();
    if ev.iter().filter(|&&e| e > 1e-6 * ev.max().max(1e-12) && e > 1e-12).count() < 3 {
        return Err(CalibrationError::DegenerateMotion);
    }

    let signs = [(-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (1.0, 1.0)];
    let nominal = buffer.nominal_geometry;
    let mut problem = Problem::new();
    let mut angle_vars = Vec::with_capacity(4);
    for n in 0..4 {
        let mut samples = Vec::new();
        for (i, v) in velocities.iter().enumerate() {
            for m in &buffer.intervals[i].transducer {
                samples.push((m.radial[n], *v));
            }
        }
        if samples.is_empty() {
            return Err(CalibrationError::DegenerateMotion);
        }
        let var = problem.add_variable(Value::Vec2(Vector2::new(nominal.alpha[n], nominal.beta[n])));
        problem.set_bounds(var, 1e-3, std::f64::consts::FRAC_PI_2 - 1e-3);
        problem.add_factor(Box::new(TransducerAngleFactor::new(
            var,
            signs[n],
            samples,
            buffer.sigma_d,
            config.noise_floor,
        )));
        angle_vars.push(var);
    }
    let report = solve(&mut problem, &config.solver)?;

    let mut geometry = nominal;
    for (n, var) in angle_vars.iter().enumerate() {
        let a = problem.values.vec2(*var);
        geometry.alpha[n] = a.x;
        geometry.beta[n] = a.y;
    }
    let cov = problem.marginal_covariance(&angle_vars).unwrap_or_else(|_| nalgebra::DMatrix::zeros(8, 8));
    let confidence = (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    Ok((geometry, confidence, report))
}

/// Runs the three-stage misalignment pipeline. Extrinsics are known inputs.
pub fn run_misalignment_calibration(
    buffer: &CalibrationBuffer,
    extrinsics: &ExtrinsicSet,
    config: &CalibrationConfig,
) -> Result<MisalignmentReport, CalibrationError> {
    let ba = vision_only_ba(buffer, config)?;
    let mut stages = vec![stage_report("vision_ba", &ba.report)];
    let (velocities, r2) = misalignment_body_velocity_opt(buffer, &ba, extrinsics, config)?;
    stages.push(stage_report("body_velocity_opt", &r2));
    let (geometry, confidence, r3) = misalignment_transducer_opt(buffer, &velocities, config)?;
    stages.push(stage_report("transducer_opt", &r3));
    Ok(MisalignmentReport { geometry, confidence, stages, keyframes: buffer.n_keyframes() })
}
