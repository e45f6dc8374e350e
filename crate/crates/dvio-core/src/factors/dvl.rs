//! DVL factors: the velocity residual tying the state velocity to the
//! measured body velocity, the translation residual built on the DVL
//! pre-integration (with the rapid linear-approximation update path), and
//! the two calibration-only factors for body-velocity and transducer-angle
//! estimation.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::geometry::{hat, Rotation};
use crate::preintegration::{GyroPreintegration, PreintegratedDvl};

use super::{dmat3, dvec3, Evaluation, Factor, FactorError, SqrtInformation, Value, Values, VarId};

/// r = v_measured - v_state, Jacobian -I.
pub struct DvlVelocityFactor {
    vars: [VarId; 1],
    measured: Vector3<f64>,
    sqrt_info: SqrtInformation,
}

impl DvlVelocityFactor {
    pub fn new(velocity_var: VarId, measured: Vector3<f64>, covariance: &Matrix3<f64>, floor: f64) -> Self {
        DvlVelocityFactor {
            vars: [velocity_var],
            measured,
            sqrt_info: SqrtInformation::from_covariance3(covariance, floor),
        }
    }
}

impl Factor for DvlVelocityFactor {
    fn kind(&self) -> &'static str {
        "dvl_velocity"
    }

    fn dim(&self) -> usize {
        3
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let r = self.measured - values.vec3(self.vars[0]);
        let residual = self.sqrt_info.whiten_vector(&dvec3(&r));
        if !residual.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }
        let jacobians = if with_jacobians {
            vec![self.sqrt_info.whiten_matrix(&dmat3(&(-Matrix3::identity())))]
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual, jacobians })
    }
}

/// DVL translation measurement model h_Dt and its Jacobians w.r.t. the two
/// poses and the extrinsic parameters.
pub struct DvlTranslationModel {
    pub h: Vector3<f64>,
    pub dh_rot_i: Matrix3<f64>,
    pub dh_pos_i: Matrix3<f64>,
    pub dh_rot_j: Matrix3<f64>,
    pub dh_pos_j: Matrix3<f64>,
    pub dh_phi_id: Matrix3<f64>,
    pub dh_phi_dc: Matrix3<f64>,
    pub dh_trans_dc: Matrix3<f64>,
}

/// Evaluates `h_Dt = R_ID (p_DC - R_DC Ri^T Rj R_DC^T p_DC + R_DC (Ri^T pj - Ri^T pi))`.
pub fn dvl_translation_model(
    r_i: &Rotation,
    p_i: &Vector3<f64>,
    r_j: &Rotation,
    p_j: &Vector3<f64>,
    r_id: &Rotation,
    r_dc: &Rotation,
    p_dc: &Vector3<f64>,
) -> DvlTranslationModel {
    let a = r_i.inverse() * *r_j;
    let b_q = *r_dc * a * r_dc.inverse();
    let w = r_i.inverse() * (p_j - p_i);
    let bq_q = b_q * *p_dc;
    let rdc_w = *r_dc * w;
    let h = *r_id * (p_dc - bq_q + rdc_w);

    let rid = r_id.matrix();
    let rdc = r_dc.matrix();
    let dh_rot_i = rid * (-hat(&bq_q) * rdc + rdc * hat(&w));
    let dh_rot_j = rid * (rdc * a.matrix() * hat(&(r_dc.inverse() * *p_dc)));
    let dh_pos_i = -(rid * rdc * r_i.inverse().matrix());
    let dh_pos_j = rid * rdc * r_i.inverse().matrix();
    let dh_phi_id = -hat(&h);
    let dh_phi_dc = rid * (hat(&bq_q) - b_q.matrix() * hat(p_dc) - hat(&rdc_w));
    let dh_trans_dc = rid * (Matrix3::identity() - b_q.matrix());

    DvlTranslationModel {
        h,
        dh_rot_i,
        dh_pos_i,
        dh_rot_j,
        dh_pos_j,
        dh_phi_id,
        dh_phi_dc,
        dh_trans_dc,
    }
}

/// r = dp_bar(R_ID, b^g) - h_Dt(x_i, x_j, E).
///
/// The pre-integrated increment is refreshed lazily: small extrinsic-rotation
/// moves use the linearized update of the increment, larger ones (or bias
/// moves past the re-linearization threshold) trigger an exact
/// re-integration from the cached samples.
pub struct DvlTranslationFactor {
    vars: [VarId; 8],
    gyro: GyroPreintegration,
    preint: PreintegratedDvl,
    sqrt_info: SqrtInformation,
    pub sigma_phi: f64,
    pub bias_threshold: f64,
    pub approx_enabled: bool,
    hits: u64,
    misses: u64,
}

/// Variable handles of a [`DvlTranslationFactor`], in declaration order.
pub struct DvlTranslationVars {
    pub rot_i: VarId,
    pub pos_i: VarId,
    pub rot_j: VarId,
    pub pos_j: VarId,
    pub rot_id: VarId,
    pub rot_dc: VarId,
    pub trans_dc: VarId,
    pub bg_i: VarId,
}

impl DvlTranslationFactor {
    pub fn new(
        vars: DvlTranslationVars,
        gyro: GyroPreintegration,
        preint: PreintegratedDvl,
        floor: f64,
    ) -> Self {
        let sqrt_info = SqrtInformation::from_covariance3(&preint.covariance, floor);
        DvlTranslationFactor {
            vars: [
                vars.rot_i, vars.pos_i, vars.rot_j, vars.pos_j, vars.rot_id, vars.rot_dc,
                vars.trans_dc, vars.bg_i,
            ],
            gyro,
            preint,
            sqrt_info,
            sigma_phi: 1e-2,
            bias_threshold: 1e-3,
            approx_enabled: true,
            hits: 0,
            misses: 0,
        }
    }

    /// Current linearization point of the extrinsic rotation.
    pub fn r_id_lin(&self) -> Rotation {
        self.preint.r_id_lin
    }
}

impl Factor for DvlTranslationFactor {
    fn kind(&self) -> &'static str {
        "dvl_translation"
    }

    fn dim(&self) -> usize {
        3
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let r_i = values.rot(self.vars[0]);
        let p_i = values.vec3(self.vars[1]);
        let r_j = values.rot(self.vars[2]);
        let p_j = values.vec3(self.vars[3]);
        let r_id = values.rot(self.vars[4]);
        let r_dc = values.rot(self.vars[5]);
        let p_dc = values.vec3(self.vars[6]);
        let bg = values.vec3(self.vars[7]);

        // Bias re-linearization: past the threshold the gyro chain and the
        // DVL increment are rebuilt exactly from the cached samples.
        let db = bg - self.gyro.bias_lin;
        if db.amax() > self.bias_threshold {
            self.gyro = self.gyro.reintegrate(&bg);
            self.preint = self.preint.reintegrate_full(&r_id, &self.gyro);
            self.misses += 1;
        }
        let db = bg - self.gyro.bias_lin;

        // Extrinsic-rotation update (left-multiplicative increment).
        let dphi = (r_id * self.preint.r_id_lin.inverse()).log();
        let p_bar = if dphi.norm() < f64::EPSILON {
            self.preint.delta_p_bar + self.preint.dpbar_dbg * db
        } else if self.approx_enabled && dphi.norm() < self.sigma_phi {
            self.hits += 1;
            self.preint.delta_p_bar + self.preint.j_rotation * dphi + self.preint.dpbar_dbg * db
        } else {
            self.preint = self.preint.reintegrate_full(&r_id, &self.gyro);
            self.misses += 1;
            self.preint.delta_p_bar + self.preint.dpbar_dbg * db
        };

        let model = dvl_translation_model(&r_i, &p_i, &r_j, &p_j, &r_id, &r_dc, &p_dc);
        let residual = self.sqrt_info.whiten_vector(&dvec3(&(p_bar - model.h)));
        if !residual.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }

        let jacobians = if with_jacobians {
            vec![
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_rot_i))),
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_pos_i))),
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_rot_j))),
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_pos_j))),
                self.sqrt_info
                    .whiten_matrix(&dmat3(&(self.preint.j_rotation - model.dh_phi_id))),
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_phi_dc))),
                self.sqrt_info.whiten_matrix(&dmat3(&(-model.dh_trans_dc))),
                self.sqrt_info.whiten_matrix(&dmat3(&self.preint.dpbar_dbg)),
            ]
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual, jacobians })
    }

    fn approx_stats(&self) -> Option<(u64, u64)> {
        Some((self.hits, self.misses))
    }
}

/// Calibration-only: fits one body velocity per keyframe interval against the
/// fixed (vision-derived) relative translation, r = h_const - dp_bar(v).
pub struct BodyVelocityFitFactor {
    vars: [VarId; 1],
    preint: PreintegratedDvl,
    h_const: Vector3<f64>,
    v_lin: Vector3<f64>,
    j_v: Matrix3<f64>,
    sqrt_info: SqrtInformation,
    pub sigma_v: f64,
    hits: u64,
    misses: u64,
}

impl BodyVelocityFitFactor {
    /// `preint` must be built with the linearization velocity `v_lin` held
    /// over every step of the interval.
    pub fn new(
        velocity_var: VarId,
        preint: PreintegratedDvl,
        h_const: Vector3<f64>,
        v_lin: Vector3<f64>,
        floor: f64,
    ) -> Self {
        let j_v = preint.jacobian_wrt_body_velocity(0..preint.steps.len());
        let sqrt_info = SqrtInformation::from_covariance3(&preint.covariance, floor);
        BodyVelocityFitFactor {
            vars: [velocity_var],
            preint,
            h_const,
            v_lin,
            j_v,
            sqrt_info,
            sigma_v: 1e-2,
            hits: 0,
            misses: 0,
        }
    }
}

impl Factor for BodyVelocityFitFactor {
    fn kind(&self) -> &'static str {
        "dvl_body_velocity_fit"
    }

    fn dim(&self) -> usize {
        3
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let v = values.vec3(self.vars[0]);
        let dv = v - self.v_lin;
        let (p_bar, fast) = self.preint.approx_update_velocity(&dv, self.sigma_v);
        if fast {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        let residual = self.sqrt_info.whiten_vector(&dvec3(&(self.h_const - p_bar)));
        if !residual.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }
        let jacobians = if with_jacobians {
            vec![self.sqrt_info.whiten_matrix(&dmat3(&(-self.j_v)))]
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual, jacobians })
    }

    fn approx_stats(&self) -> Option<(u64, u64)> {
        Some((self.hits, self.misses))
    }
}

/// Calibration-only: fits one transducer's tilt/yaw angles to its radial
/// measurements given the estimated body velocities. One residual row per
/// (sample, velocity) pair.
pub struct TransducerAngleFactor {
    vars: [VarId; 1],
    /// Quadrant signs of this transducer's projection row.
    signs: (f64, f64),
    /// (measured radial velocity, estimated body velocity) pairs.
    samples: Vec<(f64, Vector3<f64>)>,
    inv_sigma: f64,
}

impl TransducerAngleFactor {
    pub fn new(
        angles_var: VarId,
        signs: (f64, f64),
        samples: Vec<(f64, Vector3<f64>)>,
        sigma_d: f64,
        floor: f64,
    ) -> Self {
        TransducerAngleFactor {
            vars: [angles_var],
            signs,
            samples,
            inv_sigma: 1.0 / sigma_d.max(floor).max(1e-12),
        }
    }
}

impl Factor for TransducerAngleFactor {
    fn kind(&self) -> &'static str {
        "dvl_transducer_angles"
    }

    fn dim(&self) -> usize {
        self.samples.len()
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let angles = values.vec2(self.vars[0]);
        let (alpha, beta) = (angles.x, angles.y);
        let (sx, sy) = self.signs;
        let (ca, sa) = (alpha.cos(), alpha.sin());
        let (cb, sb) = (beta.cos(), beta.sin());
        let e = Vector3::new(sx * cb * ca, sy * sb * ca, sa);
        let de_dalpha = Vector3::new(-sx * cb * sa, -sy * sb * sa, ca);
        let de_dbeta = Vector3::new(-sx * sb * ca, sy * cb * ca, 0.0);

        let mut residual = DVector::zeros(self.samples.len());
        let mut jac = DMatrix::zeros(self.samples.len(), 2);
        for (row, (radial, v)) in self.samples.iter().enumerate() {
            residual[row] = (radial - e.dot(v)) * self.inv_sigma;
            if with_jacobians {
                jac[(row, 0)] = -de_dalpha.dot(v) * self.inv_sigma;
                jac[(row, 1)] = -de_dbeta.dot(v) * self.inv_sigma;
            }
        }
        if !residual.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }
        let jacobians = if with_jacobians { vec![jac] } else { Vec::new() };
        Ok(Evaluation::Active { residual, jacobians })
    }
}

/// Convenience constructor for the values of a pose pair plus extrinsics used
/// by tests and the calibration pipeline.
pub fn add_extrinsic_values(
    values: &mut Values,
    r_id: Rotation,
    p_id: Vector3<f64>,
    r_dc: Rotation,
    p_dc: Vector3<f64>,
    r_wi0: Rotation,
) -> (VarId, VarId, VarId, VarId, VarId) {
    let rot_id = values.add(Value::Rot(r_id, super::RotationConvention::LeftMultiply));
    let trans_id = values.add(Value::Vec3(p_id));
    let rot_dc = values.add(Value::Rot(r_dc, super::RotationConvention::LeftMultiply));
    let trans_dc = values.add(Value::Vec3(p_dc));
    let rot_wi0 = values.add(Value::Rot(r_wi0, super::RotationConvention::LeftMultiply));
    (rot_id, trans_id, rot_dc, trans_dc, rot_wi0)
}
