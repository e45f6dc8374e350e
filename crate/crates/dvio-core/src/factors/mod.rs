//! Factor-graph building blocks: typed variables, the factor trait, and the
//! residual functions (with analytic Jacobians) for every factor type in the
//! estimation problem — DVL velocity and translation, IMU rotation, velocity
//! and translation, camera reprojection, priors and bias random walks.

mod camera;
mod dvl;
mod imu;
mod prior;

pub use camera::{predict_observation, ReprojectionFactor};
pub use dvl::{
    add_extrinsic_values, dvl_translation_model, BodyVelocityFitFactor, DvlTranslationFactor,
    DvlTranslationModel, DvlTranslationVars, DvlVelocityFactor, TransducerAngleFactor,
};
pub use imu::{ImuFactor, ImuRotationFactor, ImuTranslationFactor, ImuVars, ImuVelocityFactor};
pub use prior::{BiasRandomWalkFactor, PriorComponent, PriorFactor};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

use crate::geometry::Rotation;

/// How a rotation variable consumes its tangent increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationConvention {
    /// `R <- R * Exp(delta)` — keyframe rotations.
    RightMultiply,
    /// `R <- Exp(delta) * R` — extrinsic and gravity rotations.
    LeftMultiply,
}

/// A variable value on its manifold.
#[derive(Debug, Clone, Copy)]
pub enum Value {
    Rot(Rotation, RotationConvention),
    Vec3(Vector3<f64>),
    Vec2(Vector2<f64>),
}

impl Value {
    pub fn dim(&self) -> usize {
        match self {
            Value::Rot(..) | Value::Vec3(_) => 3,
            Value::Vec2(_) => 2,
        }
    }

    /// Applies a tangent increment and re-orthonormalizes rotations.
    pub fn retract(&self, delta: &[f64]) -> Value {
        match self {
            Value::Rot(r, conv) => {
                let phi = Vector3::new(delta[0], delta[1], delta[2]);
                let updated = match conv {
                    RotationConvention::RightMultiply => *r * Rotation::exp(&phi),
                    RotationConvention::LeftMultiply => Rotation::exp(&phi) * *r,
                };
                Value::Rot(updated.renormalized(), *conv)
            }
            Value::Vec3(v) => Value::Vec3(v + Vector3::new(delta[0], delta[1], delta[2])),
            Value::Vec2(v) => Value::Vec2(v + Vector2::new(delta[0], delta[1])),
        }
    }

    pub fn rot(&self) -> Rotation {
        match self {
            Value::Rot(r, _) => *r,
            _ => panic!("variable is not a rotation"),
        }
    }

    pub fn vec3(&self) -> Vector3<f64> {
        match self {
            Value::Vec3(v) => *v,
            _ => panic!("variable is not a 3-vector"),
        }
    }

    pub fn vec2(&self) -> Vector2<f64> {
        match self {
            Value::Vec2(v) => *v,
            _ => panic!("variable is not a 2-vector"),
        }
    }
}

/// Handle of a variable inside a [`Values`] container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// Flat container of variable values, indexed by [`VarId`].
#[derive(Debug, Clone, Default)]
pub struct Values {
    vals: Vec<Value>,
}

impl Values {
    pub fn new() -> Self {
        Values { vals: Vec::new() }
    }

    pub fn add(&mut self, v: Value) -> VarId {
        self.vals.push(v);
        VarId(self.vals.len() - 1)
    }

    pub fn get(&self, id: VarId) -> &Value {
        &self.vals[id.0]
    }

    pub fn set(&mut self, id: VarId, v: Value) {
        self.vals[id.0] = v;
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn rot(&self, id: VarId) -> Rotation {
        self.get(id).rot()
    }

    pub fn vec3(&self, id: VarId) -> Vector3<f64> {
        self.get(id).vec3()
    }

    pub fn vec2(&self, id: VarId) -> Vector2<f64> {
        self.get(id).vec2()
    }
}

/// Result of evaluating a factor at the current values. Residuals and
/// Jacobians are already whitened by the factor's square-root information.
pub enum Evaluation {
    Active {
        residual: DVector<f64>,
        /// One block per referenced variable, empty when Jacobians were not
        /// requested. Block shape: `dim x variable_dim`.
        jacobians: Vec<DMatrix<f64>>,
    },
    /// Excluded from this iteration (e.g. a landmark behind the camera).
    Inactive,
}

#[derive(Debug, thiserror::Error)]
pub enum FactorError {
    #[error("non-finite residual in {kind} factor")]
    NonFinite { kind: &'static str },
}

/// A measurement term of the least-squares problem.
pub trait Factor {
    fn kind(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn variables(&self) -> &[VarId];
    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError>;
    /// (fast-path hits, full re-integrations) for factors with a linearized
    /// update path.
    fn approx_stats(&self) -> Option<(u64, u64)> {
        None
    }
}

/// Square root of the information matrix (inverse covariance), used to
/// whiten residuals and Jacobians.
#[derive(Debug, Clone)]
pub struct SqrtInformation(DMatrix<f64>);

impl SqrtInformation {
    /// From a covariance matrix; `floor` is a standard-deviation floor that
    /// keeps zero-noise (synthetic) covariances invertible.
    pub fn from_covariance(cov: &DMatrix<f64>, floor: f64) -> Self {
        let n = cov.nrows();
        let mut c = cov.clone();
        for i in 0..n {
            c[(i, i)] += floor * floor;
        }
        let chol = c
            .clone()
            .cholesky()
            .unwrap_or_else(|| (c + DMatrix::identity(n, n) * 1e-12).cholesky().expect("covariance must be PSD"));
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("triangular solve");
        SqrtInformation(l_inv)
    }

    pub fn from_covariance3(cov: &Matrix3<f64>, floor: f64) -> Self {
        let mut d = DMatrix::zeros(3, 3);
        d.fixed_view_mut::<3, 3>(0, 0).copy_from(cov);
        Self::from_covariance(&d, floor)
    }

    /// Isotropic with standard deviation `sigma` (floored).
    pub fn isotropic(dim: usize, sigma: f64, floor: f64) -> Self {
        let s = sigma.max(floor).max(1e-12);
        SqrtInformation(DMatrix::identity(dim, dim) / s)
    }

    pub fn whiten_vector(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.0 * r
    }

    pub fn whiten_matrix(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * j
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Converts a fixed-size 3x3 block into the dynamic Jacobian layout.
pub(crate) fn dmat3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

pub(crate) fn dvec3(v: &Vector3<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}
