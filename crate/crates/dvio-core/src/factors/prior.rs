//! Prior and bias random-walk factors.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::geometry::{right_jacobian_inv, Rotation};

use super::{dmat3, dvec3, Evaluation, Factor, FactorError, SqrtInformation, Value, Values, VarId};

/// Prior mean for one variable.
#[derive(Debug, Clone, Copy)]
pub enum PriorComponent {
    /// Manifold difference `Log(mean^T R)` for right-multiply rotations.
    Rotation(Rotation),
    Vector(Vector3<f64>),
}

impl PriorComponent {
    fn dim(&self) -> usize {
        3
    }
}

/// Joint prior over a list of variables, whitened by one covariance.
pub struct PriorFactor {
    vars: Vec<VarId>,
    means: Vec<PriorComponent>,
    sqrt_info: SqrtInformation,
}

impl PriorFactor {
    pub fn new(
        vars: Vec<VarId>,
        means: Vec<PriorComponent>,
        covariance: &DMatrix<f64>,
        floor: f64,
    ) -> Self {
        assert_eq!(vars.len(), means.len());
        let dim: usize = means.iter().map(|m| m.dim()).sum();
        assert_eq!(covariance.nrows(), dim);
        PriorFactor { vars, means, sqrt_info: SqrtInformation::from_covariance(covariance, floor) }
    }

    /// Isotropic prior with one standard deviation per component.
    pub fn isotropic(vars: Vec<VarId>, means: Vec<PriorComponent>, sigmas: &[f64], floor: f64) -> Self {
        let dim = 3 * means.len();
        let mut cov = DMatrix::zeros(dim, dim);
        for (k, s) in sigmas.iter().enumerate() {
            for i in 0..3 {
                cov[(3 * k + i, 3 * k + i)] = s * s;
            }
        }
        Self::new(vars, means, &cov, floor)
    }
}

impl Factor for PriorFactor {
    fn kind(&self) -> &'static str {
        "prior"
    }

    fn dim(&self) -> usize {
        3 * self.means.len()
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let dim = self.dim();
        let mut residual = DVector::zeros(dim);
        let mut raw_jacs: Vec<Matrix3<f64>> = Vec::with_capacity(self.means.len());
        for (k, (var, mean)) in self.vars.iter().zip(&self.means).enumerate() {
            match (values.get(*var), mean) {
                (Value::Rot(r, _), PriorComponent::Rotation(mean_r)) => {
                    let e = (mean_r.inverse() * *r).log();
                    residual.fixed_rows_mut::<3>(3 * k).copy_from(&e);
                    raw_jacs.push(right_jacobian_inv(&e));
                }
                (Value::Vec3(v), PriorComponent::Vector(mean_v)) => {
                    residual.fixed_rows_mut::<3>(3 * k).copy_from(&(v - mean_v));
                    raw_jacs.push(Matrix3::identity());
                }
                _ => panic!("prior component does not match variable type"),
            }
        }
        let whitened = self.sqrt_info.whiten_vector(&residual);
        if !whitened.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }
        let jacobians = if with_jacobians {
            let mut out = Vec::with_capacity(self.vars.len());
            for (k, jk) in raw_jacs.iter().enumerate() {
                let mut j = DMatrix::zeros(dim, 3);
                j.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(jk);
                out.push(self.sqrt_info.whiten_matrix(&j));
            }
            out
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual: whitened, jacobians })
    }
}

/// r = b_j - b_i, weighting from the random-walk density over the interval.
pub struct BiasRandomWalkFactor {
    vars: [VarId; 2],
    sqrt_info: SqrtInformation,
}

impl BiasRandomWalkFactor {
    /// `sigma = density * sqrt(dt)` is the expected drift over the interval.
    pub fn new(bias_i: VarId, bias_j: VarId, sigma: f64, floor: f64) -> Self {
        BiasRandomWalkFactor {
            vars: [bias_i, bias_j],
            sqrt_info: SqrtInformation::isotropic(3, sigma, floor),
        }
    }
}

impl Factor for BiasRandomWalkFactor {
    fn kind(&self) -> &'static str {
        "bias_random_walk"
    }

    fn dim(&self) -> usize {
        3
    }

    fn variables(&self) -> &[VarId] {
        &self.vars
    }

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let r = values.vec3(self.vars[1]) - values.vec3(self.vars[0]);
        let residual = self.sqrt_info.whiten_vector(&dvec3(&r));
        if !residual.iter().all(|x| x.is_finite()) {
            return Err(FactorError::NonFinite { kind: self.kind() });
        }
        let jacobians = if with_jacobians {
            vec![
                self.sqrt_info.whiten_matrix(&dmat3(&(-Matrix3::identity()))),
                self.sqrt_info.whiten_matrix(&dmat3(&Matrix3::identity())),
            ]
        } else {
            Vec::new()
        };
        Ok(Evaluation::Active { residual, jacobians })
    }
}
