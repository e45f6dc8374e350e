//! Pre-integrated relative-motion quantities between two keyframes: the gyro
//! rotation increment, the accelerometer velocity/position increments, and
//! the DVL translation increment, each with first-order noise covariance and
//! first-order bias/extrinsic sensitivities.
//!
//! All increments depend only on the raw samples, the linearization biases
//! and (for the DVL term) the IMU-DVL extrinsic rotation; they are
//! independent of the absolute keyframe states. Raw samples are cached so a
//! pre-integration can be rebuilt exactly when the optimizer moves a bias or
//! the extrinsic rotation beyond its linearization threshold.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::dvl::BodyVelocity;
use crate::geometry::{hat, right_jacobian, Rotation};
use crate::imu::{ImuBias, ImuNoise, ImuSample};

pub type Matrix9 = SMatrix<f64, 9, 9>;

/// One integration step kept in the cache: raw measurements and the rotation
/// increment accumulated *before* the step.
#[derive(Debug, Clone, Copy)]
pub struct ImuStep {
    pub omega: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub dt: f64,
    /// Gyro increment from keyframe i to the start of this step.
    pub delta_r_before: Rotation,
}

/// Gyro-only pre-integration with per-step cache.
#[derive(Debug, Clone)]
pub struct GyroPreintegration {
    pub delta_r: Rotation,
    /// Covariance of the right-tangent rotation noise.
    pub cov_rotation: Matrix3<f64>,
    /// d(right-tangent of delta_r) / d(gyro bias).
    pub dr_dbg: Matrix3<f64>,
    pub bias_lin: Vector3<f64>,
    pub dt_total: f64,
    pub steps: Vec<ImuStep>,
    pub gyro_density: f64,
}

/// Full IMU pre-integration (rotation, velocity, position).
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    /// Joint covariance of [rotation, velocity, position] noise.
    pub covariance: Matrix9,
    pub bias_lin: ImuBias,
    pub dt_total: f64,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub steps: Vec<ImuStep>,
    noise: ImuNoise,
}

#[derive(Debug, thiserror::Error)]
pub enum PreintegrationError {
    #[error("cannot pre-integrate an empty sample set")]
    EmptySampleSet,
    #[error("sample timestamps are not strictly increasing at index {index}")]
    NonMonotoneTime { index: usize },
    #[error("no DVL velocity precedes the first IMU step")]
    MissingVelocity,
}

fn check_samples(samples: &[ImuSample]) -> Result<(), PreintegrationError> {
    if samples.is_empty() {
        return Err(PreintegrationError::EmptySampleSet);
    }
    for (i, pair) in samples.windows(2).enumerate() {
        if pair[1].timestamp <= pair[0].timestamp {
            return Err(PreintegrationError::NonMonotoneTime { index: i + 1 });
        }
    }
    Ok(())
}

/// Converts samples into integration steps. Each sample is held constant
/// until the next one; the final sample is held for `end_time - t_last`
/// (or its preceding interval length when `end_time` is `None`).
pub fn sample_steps(
    samples: &[ImuSample],
    end_time: Option<f64>,
) -> Result<Vec<(Vector3<f64>, Vector3<f64>, f64)>, PreintegrationError> {
    check_samples(samples)?;
    let mut steps = Vec::with_capacity(samples.len());
    for k in 0..samples.len() {
        let dt = if k + 1 < samples.len() {
            samples[k + 1].timestamp - samples[k].timestamp
        } else {
            match end_time {
                Some(t_end) => t_end - samples[k].timestamp,
                None => {
                    if samples.len() >= 2 {
                        samples[k].timestamp - samples[k - 1].timestamp
                    } else {
                        return Err(PreintegrationError::EmptySampleSet);
                    }
                }
            }
        };
        if dt > 0.0 {
            steps.push((samples[k].omega, samples[k].accel, dt));
        }
    }
    if steps.is_empty() {
        return Err(PreintegrationError::EmptySampleSet);
    }
    Ok(steps)
}

/// Samples covering the window [t0, t1): everything timestamped inside it,
/// plus the most recent earlier sample re-timestamped to t0 so the window is
/// covered from its very start.
pub fn clip_samples(samples: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let mut out = Vec::new();
    let mut carry: Option<ImuSample> = None;
    for s in samples {
        if s.timestamp < t0 - 1e-12 {
            carry = Some(*s);
        } else if s.timestamp < t1 - 1e-12 {
            if out.is_empty() {
                if let Some(mut c) = carry.take() {
                    if s.timestamp > t0 + 1e-12 {
                        c.timestamp = t0;
                        out.push(c);
                    }
                }
            }
            out.push(*s);
        }
    }
    if out.is_empty() {
        if let Some(mut c) = carry {
            c.timestamp = t0;
            out.push(c);
        }
    }
    out
}

/// Integrates the gyro increment `prod_k Exp((w_k - b^g) dt)` with first-order
/// noise covariance and bias sensitivity.
pub fn integrate_gyro(
    samples: &[ImuSample],
    bias_gyro: &Vector3<f64>,
    noise: &ImuNoise,
    end_time: Option<f64>,
) -> Result<GyroPreintegration, PreintegrationError> {
    let raw = sample_steps(samples, end_time)?;
    let mut delta_r = Rotation::identity();
    let mut cov = Matrix3::zeros();
    let mut dr_dbg = Matrix3::zeros();
    let mut dt_total = 0.0;
    let mut steps = Vec::with_capacity(raw.len());

    for (omega, accel, dt) in raw {
        steps.push(ImuStep { omega, accel, dt, delta_r_before: delta_r });
        let theta = (omega - bias_gyro) * dt;
        let inc = Rotation::exp(&theta);
        let jr = right_jacobian(&theta);
        let inc_t = inc.inverse().matrix().to_owned();
        // Discrete gyro noise: density^2 / dt, entering scaled by Jr dt.
        let gyro_var = noise.gyro_density * noise.gyro_density / dt;
        cov = inc_t * cov * inc_t.transpose() + jr * jr.transpose() * (gyro_var * dt * dt);
        dr_dbg = inc_t * dr_dbg - jr * dt;
        delta_r = (delta_r * inc).renormalized();
        dt_total += dt;
    }

    Ok(GyroPreintegration {
        delta_r,
        cov_rotation: cov,
        dr_dbg,
        bias_lin: *bias_gyro,
        dt_total,
        steps,
        gyro_density: noise.gyro_density,
    })
}

impl GyroPreintegration {
    /// Exact re-integration from the cached raw samples at a new gyro bias.
    pub fn reintegrate(&self, bias_gyro: &Vector3<f64>) -> Self {
        let mut t = 0.0;
        let samples: Vec<ImuSample> = self
            .steps
            .iter()
            .map(|s| {
                let sample = ImuSample { omega: s.omega, accel: s.accel, timestamp: t };
                t += s.dt;
                sample
            })
            .collect();
        let noise = ImuNoise { gyro_density: self.gyro_density, accel_density: 0.0 };
        integrate_gyro(&samples, bias_gyro, &noise, Some(t)).expect("cached steps are valid")
    }
}

/// Integrates the accelerometer velocity/position increments on top of the
/// gyro cache, propagating the joint [rotation, velocity, position]
/// covariance and all bias sensitivities.
pub fn integrate_accel(
    gyro: &GyroPreintegration,
    bias: &ImuBias,
    noise: &ImuNoise,
) -> PreintegratedImu {
    let mut delta_v = Vector3::zeros();
    let mut delta_p = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    let mut dr_dbg = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dp_dba = Matrix3::zeros();

    for step in &gyro.steps {
        let dt = step.dt;
        let dr = step.delta_r_before.matrix().to_owned();
        let a = step.accel - bias.accel;
        let theta = (step.omega - bias.gyro) * dt;
        let inc = Rotation::exp(&theta);
        let inc_t = inc.inverse().matrix().to_owned();
        let jr = right_jacobian(&theta);
        let a_hat = hat(&a);

        // State transition for [dphi, dv, dp].
        let mut a_mat = Matrix9::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc_t);
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-dr * a_hat * dt));
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-dr * a_hat * (0.5 * dt * dt)));
        a_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));

        let gyro_var = noise.gyro_density * noise.gyro_density / dt;
        let accel_var = noise.accel_density * noise.accel_density / dt;
        let mut q = Matrix9::zeros();
        q.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(jr * jr.transpose() * (gyro_var * dt * dt)));
        q.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(dr * dr.transpose() * (accel_var * dt * dt)));
        q.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&(dr * dr.transpose() * (accel_var * 0.25 * dt.powi(4))));
        q.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(dr * dr.transpose() * (accel_var * 0.5 * dt.powi(3))));
        q.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(dr * dr.transpose() * (accel_var * 0.5 * dt.powi(3))));
        cov = a_mat * cov * a_mat.transpose() + q;

        dp_dba += dv_dba * dt - dr * (0.5 * dt * dt);
        dp_dbg += dv_dbg * dt - dr * a_hat * dr_dbg * (0.5 * dt * dt);
        dv_dba -= dr * dt;
        dv_dbg -= dr * a_hat * dr_dbg * dt;
        dr_dbg = inc_t * dr_dbg - jr * dt;

        delta_p += delta_v * dt + dr * a * (0.5 * dt * dt);
        delta_v += dr * a * dt;
    }

    PreintegratedImu {
        delta_r: gyro.delta_r,
        delta_v,
        delta_p,
        covariance: cov,
        bias_lin: ImuBias { gyro: gyro.bias_lin, accel: bias.accel },
        dt_total: gyro.dt_total,
        dr_dbg: gyro.dr_dbg,
        dv_dbg,
        dv_dba,
        dp_dbg,
        dp_dba,
        steps: gyro.steps.clone(),
        noise: *noise,
    }
}

impl PreintegratedImu {
    /// Gyro + accelerometer pre-integration over one keyframe interval.
    pub fn integrate(
        samples: &[ImuSample],
        bias: &ImuBias,
        noise: &ImuNoise,
        end_time: Option<f64>,
    ) -> Result<Self, PreintegrationError> {
        let gyro = integrate_gyro(samples, &bias.gyro, noise, end_time)?;
        Ok(integrate_accel(&gyro, bias, noise))
    }

    /// Exact re-integration from the cached raw samples at a new bias.
    pub fn reintegrate(&self, bias: &ImuBias) -> Self {
        let samples: Vec<ImuSample> = self.to_samples();
        PreintegratedImu::integrate(&samples, bias, &self.noise, Some(self.end_time()))
            .expect("cached steps are valid")
    }

    /// First-order bias-corrected increments at `bias`, linearized about
    /// `bias_lin`.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dba = bias.accel - self.bias_lin.accel;
        let delta_r = self.delta_r * Rotation::exp(&(self.dr_dbg * dbg));
        let delta_v = self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba;
        let delta_p = self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba;
        (delta_r, delta_v, delta_p)
    }

    fn to_samples(&self) -> Vec<ImuSample> {
        let mut t = 0.0;
        self.steps
            .iter()
            .map(|s| {
                let sample = ImuSample { omega: s.omega, accel: s.accel, timestamp: t };
                t += s.dt;
                sample
            })
            .collect()
    }

    fn end_time(&self) -> f64 {
        self.steps.iter().map(|s| s.dt).sum()
    }
}

/// One cached DVL integration step: the gyro increment before the step, the
/// held body velocity and the measurement it came from.
#[derive(Debug, Clone, Copy)]
pub struct DvlStep {
    pub delta_r_before: Rotation,
    pub velocity: Vector3<f64>,
    pub dt: f64,
    /// Index of the zero-order-held DVL measurement this step uses.
    pub measurement: usize,
}

/// DVL translation pre-integration `sum_k dR_ik R_ID v_k dt` with covariance,
/// the extrinsic-rotation and gyro-bias sensitivities, and the per-step cache
/// needed for exact re-integration.
#[derive(Debug, Clone)]
pub struct PreintegratedDvl {
    pub delta_p_bar: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// Extrinsic rotation (IMU from DVL) at the linearization point.
    pub r_id_lin: Rotation,
    /// d(delta_p_bar) / d(phi_ID), left-multiplicative increment on R_ID.
    pub j_rotation: Matrix3<f64>,
    /// d(delta_p_bar) / d(gyro bias).
    pub dpbar_dbg: Matrix3<f64>,
    pub dt_total: f64,
    pub steps: Vec<DvlStep>,
    /// Measurement noise covariances, indexed by `DvlStep::measurement`.
    pub measurement_covs: Vec<Matrix3<f64>>,
}

/// Zero-order hold: assigns to each gyro step the most recent body velocity.
/// Fails if no velocity precedes the first step.
pub fn hold_velocities(
    gyro: &GyroPreintegration,
    velocities: &[BodyVelocity],
    start_time: f64,
) -> Result<Vec<(BodyVelocity, usize)>, PreintegrationError> {
    if velocities.is_empty() {
        return Err(PreintegrationError::MissingVelocity);
    }
    let mut held = Vec::with_capacity(gyro.steps.len());
    let mut t = start_time;
    for step in &gyro.steps {
        let mut idx = None;
        for (i, v) in velocities.iter().enumerate() {
            if v.timestamp <= t + 1e-9 {
                idx = Some(i);
            } else {
                break;
            }
        }
        let i = idx.ok_or(PreintegrationError::MissingVelocity)?;
        held.push((velocities[i], i));
        t += step.dt;
    }
    Ok(held)
}

/// Integrates the DVL translation increment over the gyro cache, one held
/// body velocity per IMU step.
pub fn integrate_dvl(
    gyro: &GyroPreintegration,
    velocities: &[(BodyVelocity, usize)],
    r_id: &Rotation,
) -> Result<PreintegratedDvl, PreintegrationError> {
    if velocities.len() != gyro.steps.len() {
        return Err(PreintegrationError::MissingVelocity);
    }
    let mut measurement_covs: Vec<Matrix3<f64>> = Vec::new();
    let mut held: Vec<(Vector3<f64>, usize)> = Vec::with_capacity(velocities.len());
    for (v, id) in velocities {
        if measurement_covs.len() <= *id {
            measurement_covs.resize(*id + 1, Matrix3::zeros());
        }
        measurement_covs[*id] = v.covariance;
        held.push((v.v, *id));
    }
    Ok(accumulate_dvl(&held, measurement_covs, gyro, r_id))
}

/// Core accumulation; the per-step gyro increments always come from `gyro`
/// so re-integrations at a new bias propagate into the DVL term.
fn accumulate_dvl(
    held: &[(Vector3<f64>, usize)],
    measurement_covs: Vec<Matrix3<f64>>,
    gyro: &GyroPreintegration,
    r_id: &Rotation,
) -> PreintegratedDvl {
    let mut delta_p_bar = Vector3::zeros();
    let mut j_rotation = Matrix3::zeros();
    let mut dpbar_dbg = Matrix3::zeros();
    let mut dt_total = 0.0;

    // Joint propagation of [rotation noise, translation noise]: the gyro
    // noise couples into dp_bar through -dR (R_ID v)^ dphi dt, while the
    // held-velocity noise enters once per DVL measurement so steps sharing a
    // measurement share one draw.
    let mut cov_rr = Matrix3::zeros();
    let mut cov_pr = Matrix3::zeros(); // cov(dp_bar, dphi)
    let mut cov_pp = Matrix3::zeros();
    let mut dr_dbg = Matrix3::zeros();
    let mut hold_accum = Matrix3::zeros();
    let mut hold_id = usize::MAX;
    let mut velocity_noise = Matrix3::zeros();
    let mut steps = Vec::with_capacity(held.len());

    for ((velocity, measurement), gyro_step) in held.iter().zip(&gyro.steps) {
        let dr = gyro_step.delta_r_before.matrix().to_owned();
        let rv = *r_id * *velocity;
        let rv_hat = hat(&rv);
        let dt = gyro_step.dt;
        steps.push(DvlStep {
            delta_r_before: gyro_step.delta_r_before,
            velocity: *velocity,
            dt,
            measurement: *measurement,
        });

        delta_p_bar += dr * rv * dt;
        j_rotation -= dr * rv_hat * dt;
        dpbar_dbg -= dr * rv_hat * dr_dbg * dt;
        dt_total += dt;

        // dp_bar_{k+1} = dp_bar_k + C dphi_k (+ measurement noise, handled below).
        let c = -dr * rv_hat * dt;
        cov_pp += c * cov_rr * c.transpose() + c * cov_pr.transpose() + cov_pr * c.transpose();
        let cov_pr_next = cov_pr + c * cov_rr;

        // dphi_{k+1} = Exp(theta)^T dphi_k + Jr dt eta_g.
        let theta = (gyro_step.omega - gyro.bias_lin) * dt;
        let inc_t = Rotation::exp(&theta).inverse().matrix().to_owned();
        let jr = right_jacobian(&theta);
        let gyro_var = gyro.gyro_density * gyro.gyro_density / dt;
        cov_rr = inc_t * cov_rr * inc_t.transpose() + jr * jr.transpose() * (gyro_var * dt * dt);
        cov_pr = cov_pr_next * inc_t.transpose();
        dr_dbg = inc_t * dr_dbg - jr * dt;

        // Velocity (measurement) noise, grouped per held measurement.
        if *measurement != hold_id {
            if hold_id != usize::MAX {
                let g_m = hold_accum * r_id.matrix();
                velocity_noise += g_m * measurement_covs[hold_id] * g_m.transpose();
            }
            hold_id = *measurement;
            hold_accum = Matrix3::zeros();
        }
        hold_accum += dr * dt;
    }
    if hold_id != usize::MAX {
        let g_m = hold_accum * r_id.matrix();
        velocity_noise += g_m * measurement_covs[hold_id] * g_m.transpose();
    }

    PreintegratedDvl {
        delta_p_bar,
        covariance: cov_pp + velocity_noise,
        r_id_lin: *r_id,
        j_rotation,
        dpbar_dbg,
        dt_total,
        steps,
        measurement_covs,
    }
}

impl PreintegratedDvl {
    /// Exact recomputation of the sum with a new extrinsic rotation (and the
    /// gyro increments of `gyro`, which may itself have been re-integrated at
    /// a new bias); the cache is retained so further updates stay exact.
    pub fn reintegrate_full(&self, new_r_id: &Rotation, gyro: &GyroPreintegration) -> Self {
        let held: Vec<(Vector3<f64>, usize)> =
            self.steps.iter().map(|s| (s.velocity, s.measurement)).collect();
        accumulate_dvl(&held, self.measurement_covs.clone(), gyro, new_r_id)
    }

    /// Eq-level Jacobian of the increment w.r.t. a left-multiplicative
    /// perturbation of the extrinsic rotation.
    pub fn jacobian_wrt_extrinsic_rotation(&self) -> Matrix3<f64> {
        self.j_rotation
    }

    /// Jacobian of the increment w.r.t. the body velocity held over the steps
    /// in `range` (all steps when the whole interval shares one velocity).
    pub fn jacobian_wrt_body_velocity(&self, range: std::ops::Range<usize>) -> Matrix3<f64> {
        let mut j = Matrix3::zeros();
        for step in &self.steps[range] {
            j += step.delta_r_before.matrix() * self.r_id_lin.matrix() * step.dt;
        }
        j
    }

    /// Linear update of the increment for a small extrinsic-rotation change.
    /// Falls back to full re-integration when `|dphi|` reaches `threshold`.
    pub fn approx_update_rotation(
        &self,
        dphi: &Vector3<f64>,
        threshold: f64,
        gyro: &GyroPreintegration,
    ) -> (Vector3<f64>, bool) {
        if dphi.norm() < threshold {
            (self.delta_p_bar + self.j_rotation * dphi, true)
        } else {
            let new_r = Rotation::exp(dphi) * self.r_id_lin;
            (self.reintegrate_full(&new_r, gyro).delta_p_bar, false)
        }
    }

    /// Linear update for a small change of the shared body velocity.
    /// Falls back to exact recomputation when `|dv|` reaches `threshold`.
    pub fn approx_update_velocity(&self, dv: &Vector3<f64>, threshold: f64) -> (Vector3<f64>, bool) {
        let j = self.jacobian_wrt_body_velocity(0..self.steps.len());
        if dv.norm() < threshold {
            (self.delta_p_bar + j * dv, true)
        } else {
            let mut p = Vector3::zeros();
            for step in &self.steps {
                p += step.delta_r_before.matrix() * self.r_id_lin.matrix() * (step.velocity + dv) * step.dt;
            }
            (p, false)
        }
    }

    /// Re-evaluates the sum directly from the cache (oracle for tests).
    pub fn replay(&self) -> Vector3<f64> {
        let mut p = Vector3::zeros();
        for step in &self.steps {
            p += step.delta_r_before.matrix() * self.r_id_lin.matrix() * step.velocity * step.dt;
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn make_samples(omega: &[Vector3<f64>], accel: &[Vector3<f64>], dt: f64) -> Vec<ImuSample> {
        omega
            .iter()
            .zip(accel)
            .enumerate()
            .map(|(k, (w, a))| ImuSample { omega: *w, accel: *a, timestamp: k as f64 * dt })
            .collect()
    }

    fn random_vec(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        )
    }

    /// Naive fine-step integrator, written independently of the production
    /// recursions: plain products and sums over sub-divided hold intervals.
    fn naive_integrate(
        omega: &[Vector3<f64>],
        accel: &[Vector3<f64>],
        dt_coarse: f64,
        substeps: usize,
        bias: &ImuBias,
    ) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dt = dt_coarse / substeps as f64;
        let mut r = Rotation::identity();
        let mut v = Vector3::zeros();
        let mut p = Vector3::zeros();
        for (w, a) in omega.iter().zip(accel) {
            for _ in 0..substeps {
                p += v * dt + *r.matrix() * (a - bias.accel) * (0.5 * dt * dt);
                v += *r.matrix() * (a - bias.accel) * dt;
                r = r * Rotation::exp(&((w - bias.gyro) * dt));
            }
        }
        (r, v, p)
    }

    fn naive_integrate_dvl(
        omega: &[Vector3<f64>],
        velocity: &[Vector3<f64>],
        dt_coarse: f64,
        substeps: usize,
        r_id: &Rotation,
    ) -> Vector3<f64> {
        let dt = dt_coarse / substeps as f64;
        let mut r = Rotation::identity();
        let mut p = Vector3::zeros();
        for (w, vel) in omega.iter().zip(velocity) {
            for _ in 0..substeps {
                p += *r.matrix() * (*r_id.matrix() * vel) * dt;
                r = r * Rotation::exp(&(w * dt));
            }
        }
        p
    }

    fn held(v: Vector3<f64>, n: usize) -> Vec<(BodyVelocity, usize)> {
        (0..n)
            .map(|k| {
                (
                    BodyVelocity { v, covariance: Matrix3::zeros(), timestamp: 0.0 },
                    k, // one measurement per step
                )
            })
            .collect()
    }

    #[test]
    fn gyro_zero_rate_gives_identity() {
        let samples = make_samples(&[Vector3::zeros(); 10], &[Vector3::zeros(); 10], 0.01);
        let g = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), None).unwrap();
        assert_abs_diff_eq!(*g.delta_r.matrix(), *Rotation::identity().matrix(), epsilon = 1e-14);
    }

    #[test]
    fn gyro_constant_rate_closed_form() {
        let n = 2000;
        let dt = 1e-3;
        let w = Vector3::new(0.0, 0.0, 0.5);
        let samples = make_samples(&vec![w; n], &vec![Vector3::zeros(); n], dt);
        let g = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), None).unwrap();
        let expected = Rotation::exp(&Vector3::new(0.0, 0.0, 1.0));
        assert!((g.delta_r.matrix() - expected.matrix()).norm() < 1e-9);
    }

    #[test]
    fn gyro_matches_fine_step_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let n = 1000;
        let dt = 1e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.5)).collect();
        let accel = vec![Vector3::zeros(); n];
        let samples = make_samples(&omega, &accel, dt);
        let g = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(n as f64 * dt)).unwrap();
        let (r_fine, _, _) = naive_integrate(&omega, &accel, dt, 100, &ImuBias::zero());
        assert!((g.delta_r.matrix() - r_fine.matrix()).norm() < 1e-6);
    }

    #[test]
    fn gyro_rejects_bad_sample_sets() {
        assert!(matches!(
            integrate_gyro(&[], &Vector3::zeros(), &ImuNoise::zero(), None),
            Err(PreintegrationError::EmptySampleSet)
        ));
        let mut samples = make_samples(&[Vector3::zeros(); 3], &[Vector3::zeros(); 3], 0.01);
        samples[2].timestamp = samples[1].timestamp;
        assert!(matches!(
            integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), None),
            Err(PreintegrationError::NonMonotoneTime { index: 2 })
        ));
    }

    #[test]
    fn accel_zero_input_is_zero() {
        let samples = make_samples(&[Vector3::zeros(); 50], &[Vector3::zeros(); 50], 0.01);
        let pre = PreintegratedImu::integrate(&samples, &ImuBias::zero(), &ImuNoise::zero(), None).unwrap();
        assert_abs_diff_eq!(pre.delta_v, Vector3::zeros(), epsilon = 0.0);
        assert_abs_diff_eq!(pre.delta_p, Vector3::zeros(), epsilon = 0.0);
    }

    #[test]
    fn accel_constant_no_rotation_kinematics() {
        let n = 1000;
        let dt = 1e-3;
        let a = Vector3::new(1.0, 0.0, 0.0);
        let samples = make_samples(&vec![Vector3::zeros(); n], &vec![a; n], dt);
        let pre =
            PreintegratedImu::integrate(&samples, &ImuBias::zero(), &ImuNoise::zero(), Some(1.0)).unwrap();
        assert_abs_diff_eq!(pre.delta_v, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        // The discrete sum telescopes to exactly a T^2 / 2 for constant input.
        assert_abs_diff_eq!(pre.delta_p, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn accel_matches_fine_step_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 1000;
        let dt = 1e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.05)).collect();
        let accel: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.1)).collect();
        let samples = make_samples(&omega, &accel, dt);
        let pre =
            PreintegratedImu::integrate(&samples, &ImuBias::zero(), &ImuNoise::zero(), Some(n as f64 * dt))
                .unwrap();
        let (r, v, p) = naive_integrate(&omega, &accel, dt, 100, &ImuBias::zero());
        assert!((pre.delta_r.matrix() - r.matrix()).norm() < 1e-5);
        assert!((pre.delta_v - v).norm() < 1e-5, "dv error {}", (pre.delta_v - v).norm());
        assert!((pre.delta_p - p).norm() < 1e-5, "dp error {}", (pre.delta_p - p).norm());
    }

    #[test]
    fn covariances_are_symmetric_psd() {
        let mut rng = StdRng::seed_from_u64(8);
        let n = 400;
        let dt = 2.5e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.4)).collect();
        let accel: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 1.0)).collect();
        let samples = make_samples(&omega, &accel, dt);
        let noise = ImuNoise { gyro_density: 1e-3, accel_density: 1e-2 };
        let pre = PreintegratedImu::integrate(&samples, &ImuBias::zero(), &noise, None).unwrap();
        assert!((pre.covariance - pre.covariance.transpose()).norm() < 1e-15);
        let eig = pre.covariance.symmetric_eigenvalues();
        assert!(eig.min() > -1e-12, "min eigenvalue {}", eig.min());

        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &noise, None).unwrap();
        let vels: Vec<_> = gyro
            .steps
            .iter()
            .enumerate()
            .map(|(k, _)| {
                (
                    BodyVelocity {
                        v: random_vec(&mut rng, 0.3),
                        covariance: Matrix3::identity() * 1e-4,
                        timestamp: 0.0,
                    },
                    k / 20, // 20 steps share one measurement
                )
            })
            .collect();
        let dvl = integrate_dvl(&gyro, &vels, &Rotation::exp(&Vector3::new(0.1, 0.0, -0.2))).unwrap();
        assert!((dvl.covariance - dvl.covariance.transpose()).norm() < 1e-15);
        assert!(dvl.covariance.symmetric_eigenvalues().min() > -1e-12);
    }

    #[test]
    fn bias_correction_is_first_order_accurate() {
        let mut rng = StdRng::seed_from_u64(13);
        let n = 300;
        let dt = 2.5e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.5)).collect();
        let accel: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 1.5)).collect();
        let samples = make_samples(&omega, &accel, dt);
        let pre = PreintegratedImu::integrate(&samples, &ImuBias::zero(), &ImuNoise::zero(), None).unwrap();

        let dir_g = random_vec(&mut rng, 1.0).normalize();
        let dir_a = random_vec(&mut rng, 1.0).normalize();
        let mut errors = Vec::new();
        for scale in [1e-4, 1e-3] {
            let bias = ImuBias { gyro: dir_g * scale, accel: dir_a * scale };
            let exact = pre.reintegrate(&bias);
            let (cr, cv, cp) = pre.corrected(&bias);
            let err = (exact.delta_r.matrix() - cr.matrix()).norm()
                + (exact.delta_v - cv).norm()
                + (exact.delta_p - cp).norm();
            errors.push(err);
        }
        let ratio = errors[1] / errors[0].max(1e-18);
        assert!(
            (20.0..500.0).contains(&ratio),
            "second-order ratio {ratio}, errors {errors:?}"
        );
    }

    #[test]
    fn dvl_constant_velocity_no_rotation() {
        let n = 3000;
        let dt = 1e-3;
        let samples = make_samples(&vec![Vector3::zeros(); n], &vec![Vector3::zeros(); n], dt);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(3.0)).unwrap();
        let dvl = integrate_dvl(&gyro, &held(Vector3::new(0.2, 0.0, 0.0), n), &Rotation::identity()).unwrap();
        assert_abs_diff_eq!(dvl.delta_p_bar, Vector3::new(0.6, 0.0, 0.0), epsilon = 1e-10);
    }

    #[test]
    fn dvl_zero_velocity_is_zero_under_rotation() {
        let mut rng = StdRng::seed_from_u64(17);
        let n = 500;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.8)).collect();
        let samples = make_samples(&omega, &vec![Vector3::zeros(); n], 2e-3);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), None).unwrap();
        let dvl = integrate_dvl(&gyro, &held(Vector3::zeros(), n), &Rotation::exp(&Vector3::x())).unwrap();
        assert_abs_diff_eq!(dvl.delta_p_bar, Vector3::zeros(), epsilon = 0.0);
    }

    #[test]
    fn dvl_matches_cache_replay_and_fine_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let n = 1000;
        let dt = 1e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.05)).collect();
        let vels: Vec<_> = (0..n).map(|_| random_vec(&mut rng, 0.3)).collect();
        let samples = make_samples(&omega, &vec![Vector3::zeros(); n], dt);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(1.0)).unwrap();
        let r_id = Rotation::exp(&Vector3::new(0.05, -0.1, 0.2));
        let held_v: Vec<_> = vels
            .iter()
            .enumerate()
            .map(|(k, v)| (BodyVelocity { v: *v, covariance: Matrix3::zeros(), timestamp: 0.0 }, k))
            .collect();
        let dvl = integrate_dvl(&gyro, &held_v, &r_id).unwrap();
        assert!((dvl.delta_p_bar - dvl.replay()).norm() < 1e-12);
        let fine = naive_integrate_dvl(&omega, &vels, dt, 100, &r_id);
        assert!((dvl.delta_p_bar - fine).norm() < 1e-5);
    }

    fn random_dvl(rng: &mut StdRng, n: usize) -> (GyroPreintegration, PreintegratedDvl, Rotation) {
        let dt = 2e-3;
        let omega: Vec<_> = (0..n).map(|_| random_vec(rng, 0.6)).collect();
        let samples = make_samples(&omega, &vec![Vector3::zeros(); n], dt);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), None).unwrap();
        let r_id = Rotation::exp(&random_vec(rng, 0.4));
        let held_v: Vec<_> = (0..n)
            .map(|k| {
                (
                    BodyVelocity { v: random_vec(rng, 0.4), covariance: Matrix3::zeros(), timestamp: 0.0 },
                    k / 10,
                )
            })
            .collect();
        let dvl = integrate_dvl(&gyro, &held_v, &r_id).unwrap();
        (gyro, dvl, r_id)
    }

    #[test]
    fn reintegration_matches_fresh_integration() {
        let mut rng = StdRng::seed_from_u64(31);
        let (gyro, dvl, r_id) = random_dvl(&mut rng, 200);
        let same = dvl.reintegrate_full(&r_id, &gyro);
        assert_abs_diff_eq!(same.delta_p_bar, dvl.delta_p_bar, epsilon = 0.0);

        let new_r = Rotation::exp(&Vector3::new(0.3, 0.1, -0.2)) * r_id;
        let re = dvl.reintegrate_full(&new_r, &gyro);
        let held_v: Vec<_> = dvl
            .steps
            .iter()
            .map(|s| {
                (
                    BodyVelocity { v: s.velocity, covariance: Matrix3::zeros(), timestamp: 0.0 },
                    s.measurement,
                )
            })
            .collect();
        let fresh = integrate_dvl(&gyro, &held_v, &new_r).unwrap();
        assert_abs_diff_eq!(re.delta_p_bar, fresh.delta_p_bar, epsilon = 0.0);

        // Rotations preserve per-step norms.
        let bound: f64 = dvl.steps.iter().map(|s| s.velocity.norm() * s.dt).sum();
        assert!(re.delta_p_bar.norm() <= bound + 1e-12);
    }

    #[test]
    fn extrinsic_rotation_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(37);
        let (gyro, dvl, r_id) = random_dvl(&mut rng, 150);
        let j = dvl.jacobian_wrt_extrinsic_rotation();
        let eps = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = eps;
            let plus = dvl.reintegrate_full(&(Rotation::exp(&d) * r_id), &gyro).delta_p_bar;
            let minus = dvl.reintegrate_full(&(Rotation::exp(&(-d)) * r_id), &gyro).delta_p_bar;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (fd - j.column(k)).norm() / j.column(k).norm().max(1e-9);
            assert!(rel < 1e-5, "column {k} relative error {rel}");
        }
    }

    #[test]
    fn extrinsic_rotation_jacobian_single_step() {
        let samples = vec![
            ImuSample { omega: Vector3::zeros(), accel: Vector3::zeros(), timestamp: 0.0 },
        ];
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(0.2)).unwrap();
        let r_id = Rotation::exp(&Vector3::new(0.1, 0.2, -0.1));
        let v = Vector3::new(0.3, -0.2, 0.1);
        let dvl = integrate_dvl(&gyro, &held(v, 1), &r_id).unwrap();
        let expected = -hat(&(r_id * v)) * 0.2;
        assert_abs_diff_eq!(dvl.jacobian_wrt_extrinsic_rotation(), expected, epsilon = 1e-14);
    }

    #[test]
    fn body_velocity_jacobian_properties() {
        // No rotation: the Jacobian collapses to R_ID * T.
        let n = 100;
        let samples = make_samples(&vec![Vector3::zeros(); n], &vec![Vector3::zeros(); n], 0.01);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(1.0)).unwrap();
        let r_id = Rotation::exp(&Vector3::new(0.2, -0.1, 0.3));
        let dvl = integrate_dvl(&gyro, &held(Vector3::new(0.1, 0.0, 0.0), n), &r_id).unwrap();
        let j = dvl.jacobian_wrt_body_velocity(0..n);
        assert_abs_diff_eq!(j, r_id.matrix() * 1.0, epsilon = 1e-12);

        // Finite differences over a shared velocity increment.
        let mut rng = StdRng::seed_from_u64(41);
        let (_, dvl, _) = random_dvl(&mut rng, 120);
        let j = dvl.jacobian_wrt_body_velocity(0..dvl.steps.len());
        let eps = 1e-6;
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = eps;
            let (plus, _) = dvl.approx_update_velocity(&d, 0.0);
            let (minus, _) = dvl.approx_update_velocity(&(-d), 0.0);
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (fd - j.column(k)).norm() / j.column(k).norm().max(1e-9);
            assert!(rel < 1e-6, "column {k} relative error {rel}");
        }

        // Column norms bounded by total time (orthogonal factors per step).
        let total: f64 = dvl.steps.iter().map(|s| s.dt).sum();
        for k in 0..3 {
            assert!(j.column(k).norm() <= total + 1e-12);
        }
    }

    #[test]
    fn approx_update_semantics() {
        let mut rng = StdRng::seed_from_u64(43);
        let (gyro, dvl, _) = random_dvl(&mut rng, 200);
        let sigma_phi = 1e-2;

        let (same, fast) = dvl.approx_update_rotation(&Vector3::zeros(), sigma_phi, &gyro);
        assert!(fast);
        assert_abs_diff_eq!(same, dvl.delta_p_bar, epsilon = 0.0);

        let dphi = Vector3::new(1e-4, -0.5e-4, 0.7e-4);
        let (approx, fast) = dvl.approx_update_rotation(&dphi, sigma_phi, &gyro);
        assert!(fast);
        let full = dvl
            .reintegrate_full(&(Rotation::exp(&dphi) * dvl.r_id_lin), &gyro)
            .delta_p_bar;
        assert!((approx - full).norm() < 1e-6 * dvl.delta_p_bar.norm().max(1e-3));

        let big = Vector3::new(2.0 * sigma_phi, 0.0, 0.0);
        let (_, fast) = dvl.approx_update_rotation(&big, sigma_phi, &gyro);
        assert!(!fast);
    }

    #[test]
    fn approx_error_is_second_order() {
        let mut rng = StdRng::seed_from_u64(47);
        let (gyro, dvl, _) = random_dvl(&mut rng, 200);
        let dir = Vector3::new(0.4, -0.7, 0.55).normalize();
        let mut errs = Vec::new();
        for scale in [2e-3, 1e-3] {
            let dphi = dir * scale;
            let (approx, _) = dvl.approx_update_rotation(&dphi, 1.0, &gyro);
            let full = dvl
                .reintegrate_full(&(Rotation::exp(&dphi) * dvl.r_id_lin), &gyro)
                .delta_p_bar;
            errs.push((approx - full).norm());
        }
        let ratio = errs[0] / errs[1].max(1e-18);
        assert!((3.0..5.5).contains(&ratio), "halving ratio {ratio} (expected ~4)");
    }

    #[test]
    fn hold_velocities_zero_order_hold() {
        let samples = make_samples(&vec![Vector3::zeros(); 10], &vec![Vector3::zeros(); 10], 0.1);
        let gyro = integrate_gyro(&samples, &Vector3::zeros(), &ImuNoise::zero(), Some(1.0)).unwrap();
        let mk = |t: f64, x: f64| BodyVelocity {
            v: Vector3::new(x, 0.0, 0.0),
            covariance: Matrix3::zeros(),
            timestamp: t,
        };
        assert!(matches!(
            hold_velocities(&gyro, &[mk(0.5, 1.0)], 0.0),
            Err(PreintegrationError::MissingVelocity)
        ));
        let held = hold_velocities(&gyro, &[mk(0.0, 1.0), mk(0.45, 2.0)], 0.0).unwrap();
        assert_eq!(held.len(), 10);
        assert_eq!(held[0].0.v.x, 1.0);
        assert_eq!(held[4].0.v.x, 1.0);
        assert_eq!(held[5].0.v.x, 2.0);
        assert_eq!(held[9].0.v.x, 2.0);
    }
}
