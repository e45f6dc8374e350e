//! Trajectory evaluation: timestamp association, first-pose alignment and
//! RMSE/STD error statistics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, Rotation};

/// One timestamped pose.
#[derive(Debug, Clone, Copy)]
pub struct TimedPose {
    pub t: f64,
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

/// Per-pose error sample of the aligned trajectory.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ErrorSample {
    pub t: f64,
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub translation_rmse: f64,
    pub rotation_rmse_deg: f64,
    pub translation_std: f64,
    pub rotation_std_deg: f64,
    pub matched: usize,
    pub series: Vec<ErrorSample>,
    /// SE(3) transform applied to the estimate (first-pose alignment).
    pub alignment_rotation: [f64; 9],
    pub alignment_translation: [f64; 3],
}

#[derive(Debug, thiserror::Error)]
pub enum EvaluationError {
    #[error("no overlapping timestamps within {tolerance} s")]
    NoOverlap { tolerance: f64 },
}

/// Associates estimate poses to ground truth by nearest timestamp (within
/// `tolerance`), aligns the first matched pose, and reports RMSE/STD.
pub fn evaluate(
    estimate: &[TimedPose],
    ground_truth: &[TimedPose],
    tolerance: f64,
) -> Result<EvaluationReport, EvaluationError> {
    let mut pairs = Vec::new();
    for e in estimate {
        let nearest = ground_truth
            .iter()
            .min_by(|a, b| (a.t - e.t).abs().total_cmp(&(b.t - e.t).abs()));
        if let Some(g) = nearest {
            if (g.t - e.t).abs() <= tolerance {
                pairs.push((*e, *g));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(EvaluationError::NoOverlap { tolerance });
    }

    // Single SE(3) alignment of the first matched pose onto ground truth.
    let (e0, g0) = pairs[0];
    let t_e0 = RigidTransform::new(e0.rotation, e0.position);
    let t_g0 = RigidTransform::new(g0.rotation, g0.position);
    let align = t_g0 * t_e0.inverse();

    let mut series = Vec::with_capacity(pairs.len());
    let mut sum_t2 = 0.0;
    let mut sum_r2 = 0.0;
    for (e, g) in &pairs {
        let aligned = align * RigidTransform::new(e.rotation, e.position);
        let dp = aligned.translation - g.position;
        let rot_err = g.rotation.angle_to(&aligned.rotation).to_degrees();
        sum_t2 += dp.norm_squared();
        sum_r2 += rot_err * rot_err;
        series.push(ErrorSample {
            t: e.t,
            ex: dp.x,
            ey: dp.y,
            ez: dp.z,
            translation: dp.norm(),
            rotation_deg: rot_err,
        });
    }
    let n = pairs.len() as f64;
    let translation_rmse = (sum_t2 / n).sqrt();
    let rotation_rmse_deg = (sum_r2 / n).sqrt();
    let t_mean = series.iter().map(|s| s.translation).sum::<f64>() / n;
    let r_mean = series.iter().map(|s| s.rotation_deg).sum::<f64>() / n;
    let translation_std =
        (series.iter().map(|s| (s.translation - t_mean).powi(2)).sum::<f64>() / n).sqrt();
    let rotation_std_deg =
        (series.iter().map(|s| (s.rotation_deg - r_mean).powi(2)).sum::<f64>() / n).sqrt();

    Ok(EvaluationReport {
        translation_rmse,
        rotation_rmse_deg,
        translation_std,
        rotation_std_deg,
        matched: pairs.len(),
        series,
        alignment_rotation: {
            let m = align.rotation.matrix();
            [
                m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)],
                m[(2, 1)], m[(2, 2)],
            ]
        },
        alignment_translation: [align.translation.x, align.translation.y, align.translation.z],
    })
}

/// Per-axis error series as CSV (for external plotting).
pub fn series_to_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("t,ex,ey,ez,translation,rotation_deg\n");
    for s in &report.series {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.t, s.ex, s.ey, s.ez, s.translation, s.rotation_deg
        ));
    }
    out
}

/// Human-readable summary.
pub fn report_text(report: &EvaluationReport) -> String {
    format!(
        "matched poses:      {}\n\
         translation RMSE:   {:.6} m (std {:.6})\n\
         rotation RMSE:      {:.6} deg (std {:.6})\n",
        report.matched,
        report.translation_rmse,
        report.translation_std,
        report.rotation_rmse_deg,
        report.rotation_std_deg
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight_line(n: usize) -> Vec<TimedPose> {
        (0..n)
            .map(|k| TimedPose {
                t: k as f64 * 0.1,
                rotation: Rotation::exp(&Vector3::new(0.0, 0.0, 0.01 * k as f64)),
                position: Vector3::new(0.2 * k as f64, 0.05 * k as f64, 0.0),
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = straight_line(50);
        let r = evaluate(&gt, &gt, 0.005).unwrap();
        assert!(r.translation_rmse < 1e-12);
        assert!(r.rotation_rmse_deg < 1e-10);
    }

    #[test]
    fn rigid_transform_is_removed_by_alignment() {
        let gt = straight_line(50);
        let t = RigidTransform::new(
            Rotation::exp(&Vector3::new(0.3, -0.2, 0.8)),
            Vector3::new(5.0, -2.0, 1.0),
        );
        let est: Vec<TimedPose> = gt
            .iter()
            .map(|p| {
                let moved = t * RigidTransform::new(p.rotation, p.position);
                TimedPose { t: p.t, rotation: moved.rotation, position: moved.translation }
            })
            .collect();
        let r = evaluate(&est, &gt, 0.005).unwrap();
        assert!(r.translation_rmse < 1e-10);
        assert!(r.rotation_rmse_deg < 1e-8);
    }

    #[test]
    fn constant_offset_gives_closed_form_rmse() {
        let gt = straight_line(40);
        let mut est = gt.clone();
        for p in est.iter_mut().skip(1) {
            p.position += Vector3::new(0.1, 0.0, 0.0);
        }
        let r = evaluate(&est, &gt, 0.005).unwrap();
        let n: f64 = 40.0;
        let expected = 0.1 * ((n - 1.0) / n).sqrt();
        assert_abs_diff_eq!(r.translation_rmse, expected, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_timestamps_error() {
        let gt = straight_line(10);
        let mut est = straight_line(10);
        for p in est.iter_mut() {
            p.t += 100.0;
        }
        assert!(matches!(evaluate(&est, &gt, 0.005), Err(EvaluationError::NoOverlap { .. })));
    }
}
