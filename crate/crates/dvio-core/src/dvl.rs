//! Four-transducer DVL geometry: projection vectors from per-transducer
//! tilt/yaw angles, closed-form body-velocity recovery from the four radial
//! measurements, forward synthesis for the simulator, and the linear-Gaussian
//! noise propagation of the closed-form solve.

use nalgebra::{Matrix3, Matrix4x3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Condition-number limit on E^T E beyond which the geometry is rejected.
const MAX_CONDITION: f64 = 1e8;

/// Sign pattern of the transducer yaw terms: transducer n points into its own
/// quadrant of the x-y plane.
const SIGNS: [(f64, f64); 4] = [(-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (1.0, 1.0)];

/// Per-transducer tilt (`alpha`, from the horizontal plane) and yaw
/// (`beta`, about the DVL z axis), radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransducerGeometry {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl TransducerGeometry {
    /// Janus-style default: all transducers tilted 67.5 deg, yawed 45 deg.
    pub fn nominal() -> Self {
        TransducerGeometry {
            alpha: [67.5_f64.to_radians(); 4],
            beta: [45.0_f64.to_radians(); 4],
        }
    }

    pub fn uniform(alpha: f64, beta: f64) -> Self {
        TransducerGeometry { alpha: [alpha; 4], beta: [beta; 4] }
    }

    /// Unit projection vector of transducer `n` mapping a body velocity to
    /// that transducer's radial direction.
    pub fn projection_row(&self, n: usize) -> Vector3<f64> {
        let (sx, sy) = SIGNS[n];
        let (ca, sa) = (self.alpha[n].cos(), self.alpha[n].sin());
        let (cb, sb) = (self.beta[n].cos(), self.beta[n].sin());
        Vector3::new(sx * cb * ca, sy * sb * ca, sa)
    }

    /// Largest per-angle deviation from `other`, radians.
    pub fn max_angle_error(&self, other: &TransducerGeometry) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..4 {
            worst = worst
                .max((self.alpha[n] - other.alpha[n]).abs())
                .max((self.beta[n] - other.beta[n]).abs());
        }
        worst
    }
}

/// Stacked 4x3 projection matrix E of all transducers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix4x3<f64>);

/// Builds the projection matrix row by row from the transducer angles.
pub fn projection_vectors(geom: &TransducerGeometry) -> ProjectionMatrix {
    let mut e = Matrix4x3::zeros();
    for n in 0..4 {
        e.set_row(n, &geom.projection_row(n).transpose());
    }
    ProjectionMatrix(e)
}

/// Radial velocities measured by the four transducers at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransducerMeasurement {
    pub radial: [f64; 4],
    pub timestamp: f64,
    /// Per-transducer white-noise standard deviation, m/s.
    pub sigma_d: f64,
}

/// Body velocity of the DVL frame recovered from one transducer measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub v: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub timestamp: f64,
}

/// Closed-form body velocity `(E^T E)^-1 E^T r` with covariance
/// `sigma_d^2 (E^T E)^-1`.
pub fn solve_body_velocity(
    m: &TransducerMeasurement,
    e: &ProjectionMatrix,
) -> Result<BodyVelocity, DvlError> {
    let ete = e.0.transpose() * e.0;
    let eig = ete.symmetric_eigenvalues();
    let max_ev = eig.max();
    let min_ev = eig.min();
    if min_ev <= 0.0 || max_ev / min_ev > MAX_CONDITION {
        return Err(DvlError::RankDeficientGeometry {
            condition: if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY },
        });
    }
    let ete_inv = ete.try_inverse().ok_or(DvlError::RankDeficientGeometry {
        condition: f64::INFINITY,
    })?;
    let r = Vector4::from_row_slice(&m.radial);
    let v = ete_inv * (e.0.transpose() * r);
    Ok(BodyVelocity {
        v,
        covariance: ete_inv * (m.sigma_d * m.sigma_d),
        timestamp: m.timestamp,
    })
}

/// Forward model: projects a body velocity onto each transducer direction and
/// adds seeded Gaussian noise. `sigma_d = 0` gives the exact projections.
pub fn synthesize_transducer_velocities<R: Rng>(
    v_body: &Vector3<f64>,
    geom: &TransducerGeometry,
    sigma_d: f64,
    timestamp: f64,
    rng: &mut R,
) -> TransducerMeasurement {
    let mut radial = [0.0; 4];
    let noise = Normal::new(0.0, sigma_d.max(0.0)).expect("sigma_d must be finite");
    for (n, r) in radial.iter_mut().enumerate() {
        *r = geom.projection_row(n).dot(v_body);
        if sigma_d > 0.0 {
            *r += noise.sample(rng);
        }
    }
    TransducerMeasurement { radial, timestamp, sigma_d }
}

#[derive(Debug, thiserror::Error)]
pub enum DvlError {
    #[error("transducer geometry is rank deficient (condition number {condition:.3e})")]
    RankDeficientGeometry { condition: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn vertical_transducers_project_to_z() {
        let geom = TransducerGeometry::uniform(std::f64::consts::FRAC_PI_2, 0.4);
        let e = projection_vectors(&geom);
        for n in 0..4 {
            assert_abs_diff_eq!(
                Vector3::from(e.0.row(n).transpose()),
                Vector3::z(),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn planar_geometry_sign_pattern() {
        let geom = TransducerGeometry::uniform(0.0, 0.0);
        let e = projection_vectors(&geom);
        let expected = [-1.0, -1.0, 1.0, 1.0];
        for n in 0..4 {
            assert_abs_diff_eq!(
                Vector3::from(e.0.row(n).transpose()),
                Vector3::new(expected[n], 0.0, 0.0),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn solve_recovers_noiseless_velocity() {
        let geom = TransducerGeometry::nominal();
        let e = projection_vectors(&geom);
        let v = Vector3::new(0.3, -0.1, 0.05);
        let mut rng = StdRng::seed_from_u64(0);
        let m = synthesize_transducer_velocities(&v, &geom, 0.0, 0.0, &mut rng);
        let solved = solve_body_velocity(&m, &e).unwrap();
        assert_abs_diff_eq!(solved.v, v, epsilon = 1e-13);
    }

    #[test]
    fn vertical_geometry_is_rank_deficient() {
        let geom = TransducerGeometry::uniform(std::f64::consts::FRAC_PI_2, 0.0);
        let e = projection_vectors(&geom);
        let m = TransducerMeasurement { radial: [0.1; 4], timestamp: 0.0, sigma_d: 0.0 };
        assert!(matches!(
            solve_body_velocity(&m, &e),
            Err(DvlError::RankDeficientGeometry { .. })
        ));
    }

    #[test]
    fn z_only_velocity_projects_by_sin_alpha() {
        let geom = TransducerGeometry::nominal();
        let mut rng = StdRng::seed_from_u64(1);
        let m = synthesize_transducer_velocities(&Vector3::z(), &geom, 0.0, 0.0, &mut rng);
        for n in 0..4 {
            assert_abs_diff_eq!(m.radial[n], geom.alpha[n].sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let geom = TransducerGeometry::nominal();
        let v = Vector3::new(0.2, 0.1, -0.3);
        let a = synthesize_transducer_velocities(&v, &geom, 0.05, 1.0, &mut StdRng::seed_from_u64(42));
        let b = synthesize_transducer_velocities(&v, &geom, 0.05, 1.0, &mut StdRng::seed_from_u64(42));
        assert_eq!(a.radial, b.radial);
    }

    #[test]
    fn solve_matches_pseudo_inverse_oracle() {
        // Independent route: SVD least squares over the full 4x3 system.
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let geom = TransducerGeometry {
                alpha: std::array::from_fn(|_| rng.gen_range(0.5..1.4)),
                beta: std::array::from_fn(|_| rng.gen_range(0.2..1.3)),
            };
            let e = projection_vectors(&geom);
            let radial = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
            let m = TransducerMeasurement { radial, timestamp: 0.0, sigma_d: 0.01 };
            let solved = solve_body_velocity(&m, &e).unwrap();
            let svd = e.0.svd(true, true);
            let oracle = svd.solve(&Vector4::from_row_slice(&m.radial), 1e-14).unwrap();
            assert!((solved.v - oracle).norm() < 1e-10);
        }
    }

    #[test]
    fn empirical_covariance_matches_model() {
        let geom = TransducerGeometry::nominal();
        let e = projection_vectors(&geom);
        let sigma = 0.05;
        let v_true = Vector3::new(0.25, -0.15, 0.05);
        let mut rng = StdRng::seed_from_u64(77);
        let n = 10_000;
        let mut sum = Vector3::zeros();
        let mut sum_sq = Matrix3::zeros();
        for _ in 0..n {
            let m = synthesize_transducer_velocities(&v_true, &geom, sigma, 0.0, &mut rng);
            let s = solve_body_velocity(&m, &e).unwrap();
            let d = s.v - v_true;
            sum += d;
            sum_sq += d * d.transpose();
        }
        let mean = sum / n as f64;
        let emp = sum_sq / n as f64 - mean * mean.transpose();
        let model = solve_body_velocity(
            &TransducerMeasurement { radial: [0.0; 4], timestamp: 0.0, sigma_d: sigma },
            &e,
        )
        .unwrap()
        .covariance;
        for i in 0..3 {
            for j in 0..3 {
                let tol = 0.10 * model[(i, i)].sqrt() * model[(j, j)].sqrt();
                assert!(
                    (emp[(i, j)] - model[(i, j)]).abs() <= tol,
                    "entry ({i},{j}): empirical {} vs model {}",
                    emp[(i, j)],
                    model[(i, j)]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn projection_rows_are_unit_norm(
            a0 in 0.1_f64..1.4, a1 in 0.1_f64..1.4, a2 in 0.1_f64..1.4, a3 in 0.1_f64..1.4,
            b0 in 0.0_f64..1.5, b1 in 0.0_f64..1.5, b2 in 0.0_f64..1.5, b3 in 0.0_f64..1.5,
        ) {
            let geom = TransducerGeometry { alpha: [a0, a1, a2, a3], beta: [b0, b1, b2, b3] };
            for n in 0..4 {
                prop_assert!((geom.projection_row(n).norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn synthesize_then_solve_round_trip(
            vx in -0.6_f64..0.6, vy in -0.6_f64..0.6, vz in -0.6_f64..0.6,
            alpha in 0.4_f64..1.3, beta in 0.2_f64..1.3,
        ) {
            let geom = TransducerGeometry::uniform(alpha, beta);
            let e = projection_vectors(&geom);
            let v = Vector3::new(vx, vy, vz);
            let mut rng = StdRng::seed_from_u64(0);
            let m = synthesize_transducer_velocities(&v, &geom, 0.0, 0.0, &mut rng);
            let solved = solve_body_velocity(&m, &e).unwrap();
            prop_assert!((solved.v - v).norm() < 1e-12);
        }
    }
}
