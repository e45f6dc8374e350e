//! Central finite-difference verification of factor Jacobians, with manifold
//! perturbations matching each variable's retraction.
//!
//! Used by unit tests, the acceptance suite and the `check-jacobians` CLI
//! subcommand.

use nalgebra::DMatrix;

use crate::factors::{Evaluation, Factor, Values};

/// Result of checking one factor.
#[derive(Debug, Clone)]
pub struct JacobianCheck {
    /// Worst relative error over all variable blocks.
    pub max_relative_error: f64,
    /// Relative error per variable block, factor order.
    pub per_variable: Vec<f64>,
}

/// Compares the factor's analytic Jacobians against central finite
/// differences of its residual. Returns `None` when the factor is inactive
/// at the given values.
pub fn check_factor(factor: &mut dyn Factor, values: &Values, step: f64) -> Option<JacobianCheck> {
    let (residual0, jacobians) = match factor.evaluate(values, true).ok()? {
        Evaluation::Active { residual, jacobians } => (residual, jacobians),
        Evaluation::Inactive => return None,
    };
    let dim = residual0.len();
    let vars = factor.variables().to_vec();
    let mut per_variable = Vec::with_capacity(vars.len());

    for (slot, var) in vars.iter().enumerate() {
        let vdim = values.get(*var).dim();
        let mut fd = DMatrix::zeros(dim, vdim);
        for k in 0..vdim {
            let mut delta = vec![0.0; vdim];
            delta[k] = step;
            let mut plus = values.clone();
            plus.set(*var, values.get(*var).retract(&delta));
            delta[k] = -step;
            let mut minus = values.clone();
            minus.set(*var, values.get(*var).retract(&delta));

            let rp = match factor.evaluate(&plus, false).ok()? {
                Evaluation::Active { residual, .. } => residual,
                Evaluation::Inactive => return None,
            };
            let rm = match factor.evaluate(&minus, false).ok()? {
                Evaluation::Active { residual, .. } => residual,
                Evaluation::Inactive => return None,
            };
            fd.set_column(k, &((rp - rm) / (2.0 * step)));
        }
        let analytic = &jacobians[slot];
        let err = (&fd - analytic).norm() / analytic.norm().max(1.0);
        per_variable.push(err);
    }

    // Restore any internal linearization state moved by the probing.
    let _ = factor.evaluate(values, false);

    let max_relative_error = per_variable.iter().cloned().fold(0.0_f64, f64::max);
    Some(JacobianCheck { max_relative_error, per_variable })
}
