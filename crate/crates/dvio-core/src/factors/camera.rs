//! Stereo reprojection factor: r = project(T_i^-1 l) - observed, with an
//! optional right-image row and an optional Huber loss.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::camera::{CameraModel, MIN_DEPTH};
use crate::geometry::hat;
use crate::state::CameraObservation;

use super::{Evaluation, Factor, FactorError, Values, VarId};

pub struct ReprojectionFactor {
    vars: [VarId; 3],
    obs: CameraObservation,
    cam: CameraModel,
    inv_sigma: f64,
    /// Huber threshold on the whitened residual norm, if enabled.
    pub huber: Option<f64>,
}

impl ReprojectionFactor {
    pub fn new(
        rot_i: VarId,
        pos_i: VarId,
        landmark: VarId,
        obs: CameraObservation,
        cam: CameraModel,
        floor: f64,
    ) -> Self {
        let inv_sigma = 1.0 / obs.sigma.max(floor).max(1e-12);
        ReprojectionFactor { vars: [rot_i, pos_i, landmark], obs, cam, inv_sigma, huber: None }
    }
}

impl Factor for ReprojectionFactor {
    fn kind(&self) -> &'static str {
        "reprojection"
    }

    fn dim(&self) -> usize {
        if self.obs.u_right.is_some() {
            3
        } else {
            2
        }
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let r_i = values.rot(self.vars[0]);
        let p_i = values.vec3(self.vars[1]);
        let l = values.vec3(self.vars[2]);
        let x = r_i.inverse() * (l - p_i); // camera-frame point

        // Points at or behind the image plane drop out of this iteration.
        if x.z < MIN_DEPTH {
            return Ok(Evaluation::Inactive);
        }

        let dim = self.dim();
        let mut residual = DVector::zeros(dim);
        let px = self.cam.project(&x).expect("depth already checked");
        residual[0] = px.x - self.obs.u;
        residual[1] = px.y - self.obs.v;
        if let Some(ur_obs) = self.obs.u_right {
            residual[2] = self.cam.project_right_u(&x).expect("depth already checked") - ur_obs;
        }
        residual *= self.inv_sigma;
        if !residual.iter().all(|v| v.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }

        // Huber: scale residual and Jacobians by sqrt of the IRLS weight.
        let scale = match self.huber {
            Some(delta) => {
                let s = residual.norm();
                if s > delta {
                    (delta / s).sqrt()
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        residual *= scale;

        let jacobians = if with_jacobians {
            // d(pixel)/d(camera point), stacked with the right-image row.
            let mut dpx = DMatrix::zeros(dim, 3);
            let j_left = self.cam.projection_jacobian(&x);
            dpx.view_mut((0, 0), (2, 3)).copy_from(&j_left);
            if self.obs.u_right.is_some() {
                let j_right = self.cam.right_u_jacobian(&x);
                dpx.view_mut((2, 0), (1, 3)).copy_from(&j_right.transpose());
            }
            dpx *= self.inv_sigma * scale;

            let dx_drot: Matrix3<f64> = hat(&x);
            let dx_dpos: Matrix3<f64> = -r_i.inverse().matrix();
            let dx_dl: Matrix3<f64> = r_i.inverse().matrix().into_owned();
            let to_d = |m: &Matrix3<f64>| DMatrix::from_column_slice(3, 3, m.as_slice());
            vec![&dpx * to_d(&dx_drot), &dpx * to_d(&dx_dpos), &dpx * to_d(&dx_dl)]
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual, jacobians })
    }
}

/// Projects a landmark expressed in the reference frame into keyframe i.
pub fn predict_observation(
    r_i: &crate::geometry::Rotation,
    p_i: &Vector3<f64>,
    landmark: &Vector3<f64>,
    cam: &CameraModel,
) -> Option<(f64, f64, f64)> {
    let x = r_i.inverse() * (landmark - p_i);
    let px = cam.project(&x)?;
    let ur = cam.project_right_u(&x)?;
    Some((px.x, px.y, ur))
}
