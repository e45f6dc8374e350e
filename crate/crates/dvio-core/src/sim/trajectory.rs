//! Smooth ground-truth trajectories with analytic first and second
//! derivatives for both position and orientation, so synthesized IMU and DVL
//! streams are exactly consistent with the pose stream.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{hat, Rotation};

/// `value(t) = offset + slope t + amplitude sin(2 pi f t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub offset: f64,
    pub slope: f64,
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn constant(c: f64) -> Self {
        Sinusoid { offset: c, slope: 0.0, amplitude: 0.0, frequency_hz: 0.0, phase: 0.0 }
    }

    pub fn oscillation(amplitude: f64, frequency_hz: f64, phase: f64) -> Self {
        Sinusoid { offset: 0.0, slope: 0.0, amplitude, frequency_hz, phase }
    }

    pub fn value(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.frequency_hz;
        self.offset + self.slope * t + self.amplitude * (w * t + self.phase).sin()
    }

    pub fn d1(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.frequency_hz;
        self.slope + self.amplitude * w * (w * t + self.phase).cos()
    }

    pub fn d2(&self, t: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.frequency_hz;
        -self.amplitude * w * w * (w * t + self.phase).sin()
    }
}

/// Natural cubic spline through waypoints, C^2 everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline3 {
    times: Vec<f64>,
    points: Vec<Vector3<f64>>,
    /// Second derivatives at the knots (natural boundary: zero at the ends).
    second: Vec<Vector3<f64>>,
}

impl CubicSpline3 {
    pub fn natural(times: Vec<f64>, points: Vec<Vector3<f64>>) -> Self {
        assert!(times.len() >= 2 && times.len() == points.len());
        let n = times.len();
        let mut second = vec![Vector3::zeros(); n];
        if n > 2 {
            // Tridiagonal solve for interior second derivatives.
            let m = n - 2;
            let mut a = vec![0.0; m];
            let mut b = vec![0.0; m];
            let mut c = vec![0.0; m];
            let mut d = vec![Vector3::zeros(); m];
            for i in 0..m {
                let h0 = times[i + 1] - times[i];
                let h1 = times[i + 2] - times[i + 1];
                a[i] = h0;
                b[i] = 2.0 * (h0 + h1);
                c[i] = h1;
                d[i] = ((points[i + 2] - points[i + 1]) / h1 - (points[i + 1] - points[i]) / h0) * 6.0;
            }
            // Thomas algorithm.
            for i in 1..m {
                let w = a[i] / b[i - 1];
                b[i] -= w * c[i - 1];
                d[i] = d[i] - d[i - 1] * w;
            }
            second[m] = d[m - 1] / b[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (d[i] - second[i + 2] * c[i]) / b[i];
            }
        }
        CubicSpline3 { times, points, second }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        if t <= self.times[0] {
            return 0;
        }
        if t >= self.times[n - 1] {
            return n - 2;
        }
        match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        }
    }

    pub fn value(&self, t: f64) -> Vector3<f64> {
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        self.points[i] * a
            + self.points[i + 1] * b
            + (self.second[i] * (a * a * a - a) + self.second[i + 1] * (b * b * b - b)) * (h * h / 6.0)
    }

    pub fn d1(&self, t: f64) -> Vector3<f64> {
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        (self.points[i + 1] - self.points[i]) / h
            + (self.second[i] * (1.0 - 3.0 * a * a) + self.second[i + 1] * (3.0 * b * b - 1.0)) * (h / 6.0)
    }

    pub fn d2(&self, t: f64) -> Vector3<f64> {
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        self.second[i] * a + self.second[i + 1] * b
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Position path with analytic derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PositionPath {
    Fixed(Vector3<f64>),
    /// Horizontal circle with an optional vertical oscillation.
    Circle { center: Vector3<f64>, radius: f64, angular_rate: f64, phase: f64, z: Sinusoid },
    Lissajous { center: Vector3<f64>, x: Sinusoid, y: Sinusoid, z: Sinusoid },
    Spline(CubicSpline3),
}

impl PositionPath {
    pub fn value(&self, t: f64) -> Vector3<f64> {
        match self {
            PositionPath::Fixed(p) => *p,
            PositionPath::Circle { center, radius, angular_rate, phase, z } => {
                let a = angular_rate * t + phase;
                center + Vector3::new(radius * a.cos(), radius * a.sin(), z.value(t))
            }
            PositionPath::Lissajous { center, x, y, z } => {
                center + Vector3::new(x.value(t), y.value(t), z.value(t))
            }
            PositionPath::Spline(s) => s.value(t),
        }
    }

    pub fn d1(&self, t: f64) -> Vector3<f64> {
        match self {
            PositionPath::Fixed(_) => Vector3::zeros(),
            PositionPath::Circle { radius, angular_rate, phase, z, .. } => {
                let a = angular_rate * t + phase;
                Vector3::new(-radius * angular_rate * a.sin(), radius * angular_rate * a.cos(), z.d1(t))
            }
            PositionPath::Lissajous { x, y, z, .. } => Vector3::new(x.d1(t), y.d1(t), z.d1(t)),
            PositionPath::Spline(s) => s.d1(t),
        }
    }

    pub fn d2(&self, t: f64) -> Vector3<f64> {
        match self {
            PositionPath::Fixed(_) => Vector3::zeros(),
            PositionPath::Circle { radius, angular_rate, phase, z, .. } => {
                let a = angular_rate * t + phase;
                let w2 = angular_rate * angular_rate;
                Vector3::new(-radius * w2 * a.cos(), -radius * w2 * a.sin(), z.d2(t))
            }
            PositionPath::Lissajous { x, y, z, .. } => Vector3::new(x.d2(t), y.d2(t), z.d2(t)),
            PositionPath::Spline(s) => s.d2(t),
        }
    }
}

/// Orientation as yaw-pitch-roll sinusoids composed with the fixed
/// camera-axes convention (camera z forward along world x at zero angles,
/// y down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationPath {
    pub roll: Sinusoid,
    pub pitch: Sinusoid,
    pub yaw: Sinusoid,
}

/// Camera axes in the world at zero Euler angles: z_cam -> +x_w (forward),
/// x_cam -> -y_w, y_cam -> -z_w.
pub fn camera_convention() -> Rotation {
    Rotation::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

impl OrientationPath {
    /// Rotation W<-C, body angular velocity and its derivative, all analytic.
    pub fn sample(&self, t: f64) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let (phi, dphi, ddphi) = (self.roll.value(t), self.roll.d1(t), self.roll.d2(t));
        let (theta, dtheta, ddtheta) = (self.pitch.value(t), self.pitch.d1(t), self.pitch.d2(t));
        let (psi, dpsi, ddpsi) = (self.yaw.value(t), self.yaw.d1(t), self.yaw.d2(t));

        let rx = Rotation::exp(&(Vector3::x() * phi));
        let ry = Rotation::exp(&(Vector3::y() * theta));
        let rz = Rotation::exp(&(Vector3::z() * psi));
        let c0 = camera_convention();
        let r_wc = rz * ry * rx * c0;

        let e1 = Vector3::x();
        let e2 = Vector3::y();
        let e3 = Vector3::z();
        let xt = rx.inverse().matrix().to_owned();
        let yt = ry.inverse().matrix().to_owned();
        let yx_t = xt * yt; // (Ry Rx)^T

        // Body rate in the Euler frame (before the camera convention).
        let omega_e = yx_t * e3 * dpsi + xt * e2 * dtheta + e1 * dphi;

        // d/dt of each term.
        let dxt = -hat(&(e1 * dphi)) * xt;
        let dyx_t = dxt * yt + xt * (-hat(&(e2 * dtheta)) * yt);
        let domega_e = dyx_t * e3 * dpsi
            + yx_t * e3 * ddpsi
            + dxt * e2 * dtheta
            + xt * e2 * ddtheta
            + e1 * ddphi;

        let c0t = c0.inverse();
        (r_wc, c0t * omega_e, c0t * domega_e)
    }
}

/// One evaluated trajectory instant.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub r_wc: Rotation,
    pub p_wc: Vector3<f64>,
    /// World-frame velocity and acceleration of the camera origin.
    pub v_wc: Vector3<f64>,
    pub a_wc: Vector3<f64>,
    /// Body angular velocity in the camera frame and its time derivative.
    pub omega_c: Vector3<f64>,
    pub alpha_c: Vector3<f64>,
}

/// A full trajectory: position path plus orientation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub position: PositionPath,
    pub orientation: OrientationPath,
    pub duration: f64,
}

impl Trajectory {
    pub fn sample(&self, t: f64) -> TrajectorySample {
        let (r_wc, omega_c, alpha_c) = self.orientation.sample(t);
        TrajectorySample {
            r_wc,
            p_wc: self.position.value(t),
            v_wc: self.position.d1(t),
            a_wc: self.position.d2(t),
            omega_c,
            alpha_c,
        }
    }
}

/// High-level trajectory presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Static,
    Circle {
        radius: f64,
        speed: f64,
    },
    Lissajous {
        amplitude: [f64; 3],
        frequency_hz: [f64; 3],
    },
    Waypoints {
        points: Vec<[f64; 3]>,
    },
}

/// Trajectory specification: path kind, duration and rotational excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    /// Roll/pitch/yaw oscillation amplitudes, radians.
    pub rotation_amplitude: [f64; 3],
    /// Roll/pitch/yaw oscillation frequencies, Hz.
    pub rotation_frequency: [f64; 3],
}

impl TrajectorySpec {
    pub fn build(&self) -> Trajectory {
        let [ar, ap, ay] = self.rotation_amplitude;
        let [fr, fp, fy] = self.rotation_frequency;
        let mut roll = Sinusoid::oscillation(ar, fr, 0.0);
        let mut pitch = Sinusoid::oscillation(ap, fp, 1.0);
        let mut yaw = Sinusoid::oscillation(ay, fy, 2.0);

        let position = match &self.kind {
            TrajectoryKind::Static => PositionPath::Fixed(Vector3::zeros()),
            TrajectoryKind::Circle { radius, speed } => {
                let angular_rate = speed / radius;
                // Heading follows the path tangent.
                yaw.slope = angular_rate;
                yaw.offset = std::f64::consts::FRAC_PI_2;
                PositionPath::Circle {
                    center: Vector3::zeros(),
                    radius: *radius,
                    angular_rate,
                    phase: 0.0,
                    z: Sinusoid::constant(0.0),
                }
            }
            TrajectoryKind::Lissajous { amplitude, frequency_hz } => PositionPath::Lissajous {
                center: Vector3::zeros(),
                x: Sinusoid::oscillation(amplitude[0], frequency_hz[0], 0.0),
                y: Sinusoid::oscillation(amplitude[1], frequency_hz[1], 0.7),
                z: Sinusoid::oscillation(amplitude[2], frequency_hz[2], 1.4),
            },
            TrajectoryKind::Waypoints { points } => {
                let n = points.len().max(2);
                let times: Vec<f64> =
                    (0..n).map(|i| self.duration * i as f64 / (n - 1) as f64).collect();
                let pts: Vec<Vector3<f64>> = points
                    .iter()
                    .map(|p| Vector3::new(p[0], p[1], p[2]))
                    .chain(std::iter::repeat(Vector3::zeros()))
                    .take(n)
                    .collect();
                PositionPath::Spline(CubicSpline3::natural(times, pts))
            }
        };

        // Small mean tilt makes the gravity direction generic.
        roll.offset += 0.02;
        pitch.offset += -0.03;

        Trajectory { position, orientation: OrientationPath { roll, pitch, yaw }, duration: self.duration }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sinusoid_derivatives_match_finite_differences() {
        let s = Sinusoid { offset: 1.0, slope: 0.3, amplitude: 0.5, frequency_hz: 0.7, phase: 0.4 };
        let h = 1e-6;
        for t in [0.0, 0.31, 1.7] {
            let fd1 = (s.value(t + h) - s.value(t - h)) / (2.0 * h);
            let fd2 = (s.value(t + h) - 2.0 * s.value(t) + s.value(t - h)) / (h * h);
            assert_abs_diff_eq!(s.d1(t), fd1, epsilon = 1e-8);
            assert_abs_diff_eq!(s.d2(t), fd2, epsilon = 1e-3);
        }
    }

    #[test]
    fn orientation_rates_match_finite_differences() {
        let path = OrientationPath {
            roll: Sinusoid::oscillation(0.2, 0.3, 0.1),
            pitch: Sinusoid::oscillation(0.15, 0.25, 0.9),
            yaw: Sinusoid { offset: 0.5, slope: 0.2, amplitude: 0.3, frequency_hz: 0.15, phase: 0.0 },
        };
        let h = 1e-6;
        for t in [0.2, 1.1, 3.7] {
            let (r, omega, alpha) = path.sample(t);
            let (rp, omega_p, _) = path.sample(t + h);
            let (_, omega_m, _) = path.sample(t - h);
            // omega = vee(R^T dR/dt)
            let fd = (r.inverse() * rp).log() / h;
            assert!((fd - omega).norm() < 1e-6, "omega error {}", (fd - omega).norm());
            let fd_alpha = (omega_p - omega_m) / (2.0 * h);
            assert!((fd_alpha - alpha).norm() < 1e-6, "alpha error {}", (fd_alpha - alpha).norm());
        }
    }

    #[test]
    fn spline_is_c2_and_interpolates() {
        let times = vec![0.0, 1.0, 2.0, 3.5, 5.0];
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.5, -0.2),
            Vector3::new(2.0, -0.3, 0.1),
            Vector3::new(2.5, 0.8, 0.4),
            Vector3::new(3.0, 0.0, 0.0),
        ];
        let s = CubicSpline3::natural(times.clone(), pts.clone());
        for (t, p) in times.iter().zip(&pts) {
            assert_abs_diff_eq!(s.value(*t), *p, epsilon = 1e-9);
        }
        // Derivative continuity at an interior knot.
        let h = 1e-7;
        for knot in &times[1..4] {
            let left = s.d1(knot - h);
            let right = s.d1(knot + h);
            assert!((left - right).norm() < 1e-4);
            let l2 = s.d2(knot - h);
            let r2 = s.d2(knot + h);
            assert!((l2 - r2).norm() < 1e-3);
        }
    }

    #[test]
    fn circle_velocity_magnitude() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Circle { radius: 2.0, speed: 0.2 },
            duration: 10.0,
            rotation_amplitude: [0.0; 3],
            rotation_frequency: [0.0; 3],
        };
        let traj = spec.build();
        for t in [0.0, 2.5, 7.9] {
            let s = traj.sample(t);
            assert_abs_diff_eq!(s.v_wc.norm(), 0.2, epsilon = 1e-12);
            // Centripetal acceleration v^2 / r.
            assert_abs_diff_eq!(s.a_wc.norm(), 0.2 * 0.2 / 2.0, epsilon = 1e-12);
        }
    }
}
