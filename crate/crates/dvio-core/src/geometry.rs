//! SO(3)/SE(3) primitives: hat/vee, exponential and logarithm maps, the
//! right Jacobian of SO(3), and rigid-transform composition.
//!
//! Rotations are stored as 3x3 orthonormal matrices throughout. Optimizer
//! retractions re-orthonormalize after every update so that long composition
//! chains do not drift off the manifold.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Angle threshold below which Taylor expansions replace the closed forms.
const SMALL_ANGLE: f64 = 1e-8;
/// Threshold on pi - angle below which the symmetric-part log branch is used.
const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric (cross-product) matrix of `v`: `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; extracts the vector from a skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// A 3D rotation matrix, kept orthonormal with det +1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already known to be a valid rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Wraps a matrix after verifying orthonormality and unit determinant.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (m * m.transpose() - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation { ortho, det });
        }
        Ok(Rotation(m))
    }

    /// Exponential map from an axis-angle vector (Rodrigues formula).
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta2 = phi.norm_squared();
        let phi_hat = hat(phi);
        if theta2 < SMALL_ANGLE * SMALL_ANGLE {
            // sin(t)/t ~ 1 - t^2/6, (1-cos(t))/t^2 ~ 1/2 - t^2/24
            let a = 1.0 - theta2 / 6.0;
            let b = 0.5 - theta2 / 24.0;
            return Rotation(Matrix3::identity() + phi_hat * a + phi_hat * phi_hat * b).renormalized();
        }
        let theta = theta2.sqrt();
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / theta2;
        Rotation(Matrix3::identity() + phi_hat * a + phi_hat * phi_hat * b)
    }

    /// Logarithm map to an axis-angle vector.
    ///
    /// At exactly pi the axis sign is ambiguous; the tie-break makes the
    /// largest-magnitude axis component nonnegative so results are
    /// deterministic.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let antisym = vee(&(m - m.transpose())) * 0.5; // = sin(theta) * axis

        if theta < SMALL_ANGLE {
            // log(R) ~ antisym * (1 + theta^2/6)
            return antisym * (1.0 + theta * theta / 6.0);
        }
        if std::f64::consts::PI - theta > NEAR_PI {
            return antisym * (theta / theta.sin());
        }

        // Near pi: recover the axis from the symmetric part, R ~ I + 2(aa^T - I).
        let s = (m + Matrix3::identity()) * 0.5; // ~ a a^T near pi
        let (i, _) = (0..3)
            .map(|i| (i, s[(i, i)]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let mut axis = Vector3::new(s[(0, i)], s[(1, i)], s[(2, i)]) / s[(i, i)].max(1e-12).sqrt();
        axis.normalize_mut();
        // Tie-break: largest-magnitude component nonnegative.
        let (j, _) = (0..3)
            .map(|j| (j, axis[j].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if axis[j] < 0.0 {
            axis = -axis;
        }
        // Keep consistency with the antisymmetric part when it is still usable.
        if antisym.norm() > 1e-12 && axis.dot(&antisym) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn transpose(&self) -> Self {
        self.inverse()
    }

    /// Rotation angle in radians, in [0, pi]. atan2 form keeps full
    /// precision for small angles where acos degrades.
    pub fn angle(&self) -> f64 {
        let s = vee(&(self.0 - self.0.transpose())).norm() * 0.5;
        let c = (self.0.trace() - 1.0) * 0.5;
        s.atan2(c).abs()
    }

    /// Geodesic distance to another rotation.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Projects back onto SO(3) via Newton iterations for the polar factor.
    pub fn renormalized(&self) -> Self {
        let mut x = self.0;
        for _ in 0..4 {
            let xt_inv = x.try_inverse().unwrap_or_else(Matrix3::identity).transpose();
            x = (x + xt_inv) * 0.5;
        }
        Rotation(x)
    }

    /// Rotation taking direction `a` to direction `b` (shortest arc).
    pub fn between_vectors(a: &Vector3<f64>, b: &Vector3<f64>) -> Self {
        let an = a.normalize();
        let bn = b.normalize();
        let c = an.cross(&bn);
        let d = an.dot(&bn).clamp(-1.0, 1.0);
        if c.norm() < 1e-12 {
            if d > 0.0 {
                return Rotation::identity();
            }
            // Opposite directions: rotate pi about any axis orthogonal to a.
            let ortho = if an.x.abs() < 0.9 {
                an.cross(&Vector3::x()).normalize()
            } else {
                an.cross(&Vector3::y()).normalize()
            };
            return Rotation::exp(&(ortho * std::f64::consts::PI));
        }
        let axis = c.normalize();
        Rotation::exp(&(axis * d.acos()))
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl std::ops::Mul<&Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Right Jacobian of SO(3): `exp(phi + d) ~ exp(phi) * exp(Jr(phi) * d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let phi_hat = hat(phi);
    if theta2 < 1e-10 {
        // 1e-5 angle threshold; coefficients from the series expansion.
        return Matrix3::identity() - phi_hat * 0.5 + phi_hat * phi_hat * (1.0 / 6.0 - theta2 / 120.0);
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - phi_hat * a + phi_hat * phi_hat * b
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let phi_hat = hat(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() + phi_hat * 0.5 + phi_hat * phi_hat * (1.0 / 12.0 + theta2 / 720.0);
    }
    let theta = theta2.sqrt();
    let b = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + phi_hat * 0.5 + phi_hat * phi_hat * b
}

/// Inverse of the left Jacobian, `Jl^-1(phi) = Jr^-1(-phi)`.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&(-phi))
}

/// Rigid transform from frame B to frame A: `x_A = R * x_B + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        RigidTransform {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// Applies the transform to a point.
    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality residual {ortho:.3e}, det {det:.6})")]
    NotARotation { ortho: f64, det: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_vec(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
            rng.gen_range(-scale..scale),
        )
    }

    #[test]
    fn hat_zero_and_basis() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(hat(&Vector3::z()), expected);
    }

    #[test]
    fn hat_cross_product_identity() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let u = random_vec(&mut rng, 2.0);
            let v = random_vec(&mut rng, 2.0);
            assert_abs_diff_eq!(hat(&u) * v, u.cross(&v), epsilon = 1e-14);
            assert_abs_diff_eq!(hat(&u) * v, -(hat(&v) * u), epsilon = 1e-14);
            assert_abs_diff_eq!(hat(&u).transpose(), -hat(&u), epsilon = 0.0);
        }
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_abs_diff_eq!(*Rotation::exp(&Vector3::zeros()).matrix(), Matrix3::identity(), epsilon = 1e-15);
        let r = Rotation::exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert_abs_diff_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn exp_inverse_symmetry() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let phi = random_vec(&mut rng, 2.5);
            let r = Rotation::exp(&phi) * Rotation::exp(&(-phi));
            assert_abs_diff_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_identity_and_round_trip() {
        assert_abs_diff_eq!(Rotation::identity().log(), Vector3::zeros(), epsilon = 0.0);
        let phi = Vector3::new(0.1, -0.2, 0.3);
        assert_abs_diff_eq!(Rotation::exp(&phi).log(), phi, epsilon = 1e-12);
    }

    #[test]
    fn log_near_pi_round_trip() {
        // 179.9 degrees about a skewed axis.
        let axis = Vector3::new(1.0, -0.4, 0.55).normalize();
        let phi = axis * 179.9_f64.to_radians();
        let r = Rotation::exp(&phi);
        let back = Rotation::exp(&r.log());
        assert!((r.inverse() * back).angle() < 1e-6);
    }

    #[test]
    fn log_at_pi_tie_break_is_deterministic() {
        let axis = Vector3::new(0.3, -0.9, 0.2).normalize();
        let r = Rotation::exp(&(axis * std::f64::consts::PI));
        let l = r.log();
        let (i, _) = (0..3).map(|i| (i, l[i].abs())).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(l[i] >= 0.0);
        assert!((Rotation::exp(&l).inverse() * r).angle() < 1e-6);
    }

    #[test]
    fn right_jacobian_limit_and_symmetry() {
        assert_abs_diff_eq!(right_jacobian(&Vector3::zeros()), Matrix3::identity(), epsilon = 0.0);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let phi = random_vec(&mut rng, 2.0);
            let jr = right_jacobian(&phi);
            let jr_neg = right_jacobian(&(-phi));
            assert_abs_diff_eq!(jr_neg, jr.transpose(), epsilon = 1e-12);
            assert_abs_diff_eq!(right_jacobian_inv(&phi) * jr, Matrix3::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn right_jacobian_defining_property() {
        // exp(phi + d) ~ exp(phi) * exp(Jr(phi) d) to second order in |d|.
        let mut rng = StdRng::seed_from_u64(19);
        for _ in 0..20 {
            let phi = random_vec(&mut rng, 2.0);
            let delta = random_vec(&mut rng, 1.0).normalize() * 1e-6;
            let lhs = Rotation::exp(&(phi + delta));
            let rhs = Rotation::exp(&phi) * Rotation::exp(&(right_jacobian(&phi) * delta));
            assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn right_jacobian_matches_central_differences() {
        // d/de Log(exp(phi)^T exp(phi + e d)) at e = 0 equals Jr(phi) d.
        let mut rng = StdRng::seed_from_u64(23);
        let eps = 1e-6;
        for _ in 0..20 {
            let phi = random_vec(&mut rng, 2.0);
            let jr = right_jacobian(&phi);
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = eps;
                let plus = (Rotation::exp(&phi).inverse() * Rotation::exp(&(phi + d))).log();
                let minus = (Rotation::exp(&phi).inverse() * Rotation::exp(&(phi - d))).log();
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (fd - jr.column(k)).norm() / jr.column(k).norm().max(1.0);
                assert!(rel < 1e-5, "relative error {rel}");
            }
        }
    }

    #[test]
    fn composition_chain_stays_orthonormal() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut r = Rotation::identity();
        for i in 0..10_000 {
            r = r * Rotation::exp(&random_vec(&mut rng, 0.1));
            if i % 128 == 0 {
                r = r.renormalized();
            }
        }
        r = r.renormalized();
        let drift = (r.matrix() * r.matrix().transpose() - Matrix3::identity()).norm();
        assert!(drift < 1e-7, "orthonormality drift {drift}");
    }

    #[test]
    fn rigid_transform_compose_inverse() {
        let t = RigidTransform::new(
            Rotation::exp(&Vector3::new(0.2, -0.7, 0.4)),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let id = t * t.inverse();
        assert_abs_diff_eq!(*id.rotation.matrix(), Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn between_vectors_aligns() {
        let a = Vector3::new(0.3, -0.2, 0.9);
        let b = Vector3::new(-0.5, 0.1, 0.2);
        let r = Rotation::between_vectors(&a, &b);
        assert_abs_diff_eq!(r * a.normalize(), b.normalize(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(x in -1.7_f64..1.7, y in -1.7_f64..1.7, z in -1.7_f64..1.7) {
            let phi = Vector3::new(x, y, z);
            prop_assume!(phi.norm() <= 3.0);
            let r = Rotation::exp(&phi);
            let back = Rotation::exp(&r.log());
            prop_assert!((r.matrix() - back.matrix()).norm() < 1e-9);
        }

        #[test]
        fn exp_produces_valid_rotation(x in -3.0_f64..3.0, y in -3.0_f64..3.0, z in -3.0_f64..3.0) {
            let r = Rotation::exp(&Vector3::new(x, y, z));
            prop_assert!(Rotation::from_matrix(*r.matrix()).is_ok());
        }
    }
}
