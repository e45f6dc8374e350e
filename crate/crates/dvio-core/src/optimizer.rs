//! Nonlinear least-squares solver on the product manifold of keyframe
//! states, landmarks, extrinsics and the gravity orientation.
//!
//! Levenberg-Marquardt (default) or Gauss-Newton with LM fallback; landmark
//! variables are Schur-eliminated and the reduced system solved by dense
//! Cholesky. Fixed variables receive no updates and contribute no columns.

use std::collections::{BTreeMap, HashMap};
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::factors::{Evaluation, Factor, FactorError, Value, Values, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    GaussNewton,
    LevenbergMarquardt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverSettings {
    pub algorithm: Algorithm,
    pub max_iterations: usize,
    /// Relative cost-decrease tolerance.
    pub cost_tolerance: f64,
    /// Step-norm tolerance.
    pub step_tolerance: f64,
    pub lm_lambda_init: f64,
    pub lm_lambda_factor: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            algorithm: Algorithm::LevenbergMarquardt,
            max_iterations: 50,
            cost_tolerance: 1e-9,
            step_tolerance: 1e-10,
            lm_lambda_init: 1e-6,
            lm_lambda_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    CostTolerance,
    StepTolerance,
    MaxIterations,
    /// LM could not find any cost-decreasing step.
    StalledLambda,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub reason: ConvergenceReason,
    /// Final cost split by factor kind.
    pub cost_breakdown: BTreeMap<&'static str, f64>,
    /// Fast linearized-update hits accumulated during this solve.
    pub approx_hits: u64,
    /// Full re-integrations during this solve.
    pub approx_misses: u64,
    pub rejected_steps: usize,
    /// Factors excluded at the final evaluation (e.g. behind-camera).
    pub inactive_factors: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("normal equations are singular; is the gauge fixed?")]
    SingularNormalEquations,
    #[error("cost is not finite: {0}")]
    NonFiniteCost(String),
    #[error("problem has no free variables")]
    NoFreeVariables,
    #[error(transparent)]
    Factor(#[from] FactorError),
}

#[derive(Debug, Clone, Copy, Default)]
struct VariableMeta {
    fixed: bool,
    eliminable: bool,
    bounds: Option<(f64, f64)>,
}

/// Variables, factors and solver state of one least-squares problem.
#[derive(Default)]
pub struct Problem {
    pub values: Values,
    meta: Vec<VariableMeta>,
    factors: Vec<Box<dyn Factor>>,
}

impl Problem {
    pub fn new() -> Self {
        Problem::default()
    }

    pub fn add_variable(&mut self, v: Value) -> VarId {
        let id = self.values.add(v);
        self.meta.push(VariableMeta::default());
        id
    }

    pub fn add_fixed_variable(&mut self, v: Value) -> VarId {
        let id = self.add_variable(v);
        self.meta[id.0].fixed = true;
        id
    }

    pub fn set_fixed(&mut self, id: VarId, fixed: bool) {
        self.meta[id.0].fixed = fixed;
    }

    pub fn is_fixed(&self, id: VarId) -> bool {
        self.meta[id.0].fixed
    }

    /// Marks a dim-3 variable for Schur elimination (landmarks).
    pub fn set_eliminable(&mut self, id: VarId) {
        assert_eq!(self.values.get(id).dim(), 3, "only dim-3 variables can be eliminated");
        self.meta[id.0].eliminable = true;
    }

    /// Box constraint applied to every component after each retraction.
    pub fn set_bounds(&mut self, id: VarId, lo: f64, hi: f64) {
        self.meta[id.0].bounds = Some((lo, hi));
    }

    pub fn add_factor(&mut self, f: Box<dyn Factor>) {
        debug_assert!(f.variables().iter().all(|v| v.0 < self.values.len()));
        self.factors.push(f);
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factors_mut(&mut self) -> &mut [Box<dyn Factor>] {
        &mut self.factors
    }

    fn approx_totals(&self) -> (u64, u64) {
        self.factors.iter().filter_map(|f| f.approx_stats()).fold((0, 0), |acc, s| {
            (acc.0 + s.0, acc.1 + s.1)
        })
    }

    /// Total cost and per-kind breakdown at the current values.
    pub fn cost(&mut self) -> Result<(f64, BTreeMap<&'static str, f64>, usize), SolveError> {
        let mut total = 0.0;
        let mut breakdown = BTreeMap::new();
        let mut inactive = 0;
        for f in &mut self.factors {
            match f.evaluate(&self.values, false)? {
                Evaluation::Active { residual, .. } => {
                    let c = residual.norm_squared();
                    total += c;
                    *breakdown.entry(f.kind()).or_insert(0.0) += c;
                }
                Evaluation::Inactive => inactive += 1,
            }
        }
        if !total.is_finite() {
            return Err(SolveError::NonFiniteCost(format!("cost {total}")));
        }
        Ok((total, breakdown, inactive))
    }

    fn cost_of(&mut self, values: &Values) -> Result<f64, SolveError> {
        let mut total = 0.0;
        for f in &mut self.factors {
            if let Evaluation::Active { residual, .. } = f.evaluate(values, false)? {
                total += residual.norm_squared();
            }
        }
        if !total.is_finite() {
            return Err(SolveError::NonFiniteCost(format!("cost {total}")));
        }
        Ok(total)
    }

    fn layout(&self) -> Layout {
        let mut dense_offset = vec![None; self.values.len()];
        let mut landmark_index = vec![None; self.values.len()];
        let mut n_dense = 0;
        let mut landmarks = Vec::new();
        for i in 0..self.values.len() {
            let m = self.meta[i];
            if m.fixed {
                continue;
            }
            if m.eliminable {
                landmark_index[i] = Some(landmarks.len());
                landmarks.push(i);
            } else {
                dense_offset[i] = Some(n_dense);
                n_dense += self.values.get(VarId(i)).dim();
            }
        }
        Layout { dense_offset, landmark_index, n_dense, landmarks }
    }

    /// Assembles the full (undamped) normal equations over the free
    /// variables, landmarks included, in layout order: dense block first,
    /// then landmarks. Used for marginal covariances and gauge diagnostics.
    pub fn full_normal_equations(&mut self) -> Result<(DMatrix<f64>, DVector<f64>, Vec<(VarId, usize)>), SolveError> {
        let layout = self.layout();
        let n = layout.n_dense + 3 * layout.landmarks.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let dims: Vec<usize> = (0..self.values.len()).map(|i| self.values.get(VarId(i)).dim()).collect();
        let col_of = move |layout: &Layout, var: usize| -> Option<(usize, usize)> {
            if let Some(c) = layout.dense_offset[var] {
                Some((c, dims[var]))
            } else {
                layout.landmark_index[var].map(|li| (layout.n_dense + 3 * li, 3))
            }
        };
        for f in &mut self.factors {
            let vars = f.variables().to_vec();
            if let Evaluation::Active { residual, jacobians } = f.evaluate(&self.values, true)? {
                for (a, va) in vars.iter().enumerate() {
                    let Some((ca, da)) = col_of(&layout, va.0) else { continue };
                    let ja = &jacobians[a];
                    g.rows_mut(ca, da).add_assign(&(ja.transpose() * &residual));
                    for (b, vb) in vars.iter().enumerate() {
                        let Some((cb, db)) = col_of(&layout, vb.0) else { continue };
                        let jb = &jacobians[b];
                        let block = ja.transpose() * jb;
                        h.view_mut((ca, cb), (da, db)).add_assign(&block);
                    }
                }
            }
        }
        let mut index = Vec::new();
        for (i, off) in layout.dense_offset.iter().enumerate() {
            if let Some(c) = *off {
                index.push((VarId(i), c));
            }
        }
        for (li, var) in layout.landmarks.iter().enumerate() {
            index.push((VarId(*var), layout.n_dense + 3 * li));
        }
        Ok((h, g, index))
    }

    /// Marginal covariance block of `vars` from the current linearization.
    pub fn marginal_covariance(&mut self, vars: &[VarId]) -> Result<DMatrix<f64>, SolveError> {
        let (mut h, _, index) = self.full_normal_equations()?;
        let n = h.nrows();
        for i in 0..n {
            h[(i, i)] += 1e-12;
        }
        let chol = h.cholesky().ok_or(SolveError::SingularNormalEquations)?;
        let offsets: Vec<(usize, usize)> = vars
            .iter()
            .map(|v| {
                let col = index
                    .iter()
                    .find(|(id, _)| id == v)
                    .map(|(_, c)| *c)
                    .expect("variable must be free");
                (col, self.values.get(*v).dim())
            })
            .collect();
        let total: usize = offsets.iter().map(|(_, d)| d).sum();
        let mut cov = DMatrix::zeros(total, total);
        let mut row_out = 0;
        for (ca, da) in &offsets {
            for k in 0..*da {
                let mut e = DVector::zeros(n);
                e[ca + k] = 1.0;
                let col = chol.solve(&e);
                let mut col_out = 0;
                for (cb, db) in &offsets {
                    for l in 0..*db {
                        cov[(row_out + k, col_out + l)] = col[cb + l];
                    }
                    col_out += db;
                }
            }
            row_out += da;
        }
        // Symmetrize against round-off.
        cov = (cov.clone() + cov.transpose()) * 0.5;
        Ok(cov)
    }
}

struct Layout {
    dense_offset: Vec<Option<usize>>,
    landmark_index: Vec<Option<usize>>,
    n_dense: usize,
    landmarks: Vec<usize>,
}

/// Linearized system with landmarks kept separate for Schur elimination.
struct Linearization {
    h_cc: DMatrix<f64>,
    g_c: DVector<f64>,
    /// Per-landmark 3x3 Hessian and gradient.
    h_ll: Vec<Matrix3<f64>>,
    g_l: Vec<Vector3<f64>>,
    /// Per-landmark cross blocks: dense variable index -> (col, J_c^T J_l).
    cross: Vec<HashMap<usize, DMatrix<f64>>>,
    inactive: usize,
}

fn linearize(problem: &mut Problem, layout: &Layout) -> Result<Linearization, SolveError> {
    let n_l = layout.landmarks.len();
    let mut lin = Linearization {
        h_cc: DMatrix::zeros(layout.n_dense, layout.n_dense),
        g_c: DVector::zeros(layout.n_dense),
        h_ll: vec![Matrix3::zeros(); n_l],
        g_l: vec![Vector3::zeros(); n_l],
        cross: vec![HashMap::new(); n_l],
        inactive: 0,
    };
    for f in &mut problem.factors {
        let vars = f.variables().to_vec();
        match f.evaluate(&problem.values, true)? {
            Evaluation::Inactive => lin.inactive += 1,
            Evaluation::Active { residual, jacobians } => {
                for (a, va) in vars.iter().enumerate() {
                    let ja = &jacobians[a];
                    if let Some(ca) = layout.dense_offset[va.0] {
                        let da = problem.values.get(*va).dim();
                        lin.g_c.rows_mut(ca, da).add_assign(&(ja.transpose() * &residual));
                        for (b, vb) in vars.iter().enumerate() {
                            if let Some(cb) = layout.dense_offset[vb.0] {
                                let db = problem.values.get(*vb).dim();
                                lin.h_cc
                                    .view_mut((ca, cb), (da, db))
                                    .add_assign(&(ja.transpose() * &jacobians[b]));
                            } else if let Some(li) = layout.landmark_index[vb.0] {
                                let block = ja.transpose() * &jacobians[b];
                                lin.cross[li]
                                    .entry(ca)
                                    .and_modify(|m| *m += &block)
                                    .or_insert(block);
                            }
                        }
                    } else if let Some(li) = layout.landmark_index[va.0] {
                        let grad = ja.transpose() * &residual;
                        for k in 0..3 {
                            lin.g_l[li][k] += grad[k];
                        }
                        for (b, vb) in vars.iter().enumerate() {
                            if layout.landmark_index[vb.0] == Some(li) && a == b {
                                let block = ja.transpose() * &jacobians[b];
                                for r in 0..3 {
                                    for c in 0..3 {
                                        lin.h_ll[li][(r, c)] += block[(r, c)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(lin)
}

/// Solves the damped system via Schur elimination of the landmarks.
/// Returns (dense step, landmark steps) or None when Cholesky fails.
fn solve_step(
    lin: &Linearization,
    layout: &Layout,
    lambda: f64,
) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n_c = layout.n_dense;
    let mut s = lin.h_cc.clone();
    let mut rhs = -lin.g_c.clone();
    for i in 0..n_c {
        s[(i, i)] += lambda * s[(i, i)].max(1e-6);
    }

    let mut h_ll_inv = Vec::with_capacity(lin.h_ll.len());
    for li in 0..lin.h_ll.len() {
        let mut h = lin.h_ll[li];
        for i in 0..3 {
            h[(i, i)] += lambda * h[(i, i)].max(1e-6) + 1e-12;
        }
        let inv = h.try_inverse()?;
        h_ll_inv.push(inv);
        let inv_d = DMatrix::from_column_slice(3, 3, inv.as_slice());
        let gl_d = DVector::from_column_slice(lin.g_l[li].as_slice());

        let entries: Vec<(usize, &DMatrix<f64>)> = lin.cross[li].iter().map(|(c, m)| (*c, m)).collect();
        for (ca, ma) in &entries {
            let da = ma.nrows();
            let a_inv: DMatrix<f64> = *ma * &inv_d;
            // rhs_c -= H_cl H_ll^-1 g_l (rhs already holds -g_c).
            let contrib = &a_inv * &gl_d;
            for r in 0..da {
                rhs[ca + r] += contrib[r];
            }
            for (cb, mb) in &entries {
                let db = mb.nrows();
                let block = &a_inv * mb.transpose();
                for r in 0..da {
                    for c in 0..db {
                        s[(ca + r, cb + c)] -= block[(r, c)];
                    }
                }
            }
        }
    }
    // rhs currently holds -g_c + H_cl H_ll^-1 g_l, which is the Schur rhs.
    let chol = s.cholesky()?;
    let dx_c = chol.solve(&rhs);

    let mut dx_l = Vec::with_capacity(lin.h_ll.len());
    for li in 0..lin.h_ll.len() {
        let mut rhs_l = -lin.g_l[li];
        for (ca, ma) in &lin.cross[li] {
            let da = ma.nrows();
            let mut xa = DVector::zeros(da);
            for r in 0..da {
                xa[r] = dx_c[ca + r];
            }
            rhs_l -= Vector3::from_iterator((ma.transpose() * xa).iter().cloned());
        }
        dx_l.push(h_ll_inv[li] * rhs_l);
    }
    Some((dx_c, dx_l))
}

fn apply_step(
    problem: &Problem,
    layout: &Layout,
    dx_c: &DVector<f64>,
    dx_l: &[Vector3<f64>],
) -> Values {
    let mut out = problem.values.clone();
    for i in 0..problem.values.len() {
        let delta: Vec<f64> = if let Some(c) = layout.dense_offset[i] {
            let d = problem.values.get(VarId(i)).dim();
            (0..d).map(|k| dx_c[c + k]).collect()
        } else if let Some(li) = layout.landmark_index[i] {
            dx_l[li].iter().cloned().collect()
        } else {
            continue;
        };
        let mut v = problem.values.get(VarId(i)).retract(&delta);
        if let Some((lo, hi)) = problem.meta[i].bounds {
            v = clamp_value(v, lo, hi);
        }
        out.set(VarId(i), v);
    }
    out
}

fn clamp_value(v: Value, lo: f64, hi: f64) -> Value {
    match v {
        Value::Vec2(x) => Value::Vec2(nalgebra::Vector2::new(x.x.clamp(lo, hi), x.y.clamp(lo, hi))),
        Value::Vec3(x) => {
            Value::Vec3(Vector3::new(x.x.clamp(lo, hi), x.y.clamp(lo, hi), x.z.clamp(lo, hi)))
        }
        other => other,
    }
}

/// Runs the solver to convergence, updating the problem values in place.
pub fn solve(problem: &mut Problem, settings: &SolverSettings) -> Result<SolveReport, SolveError> {
    let layout = problem.layout();
    if layout.n_dense == 0 && layout.landmarks.is_empty() {
        return Err(SolveError::NoFreeVariables);
    }
    let (hits0, misses0) = problem.approx_totals();
    let (initial_cost, _, _) = problem.cost()?;
    let mut cost = initial_cost;
    let mut lambda = match settings.algorithm {
        Algorithm::GaussNewton => 0.0,
        Algorithm::LevenbergMarquardt => settings.lm_lambda_init,
    };
    let mut gn_mode = settings.algorithm == Algorithm::GaussNewton;
    let mut rejected_steps = 0;
    let mut iterations = 0;
    let mut reason = ConvergenceReason::MaxIterations;

    'outer: for _ in 0..settings.max_iterations {
        iterations += 1;
        let lin = linearize(problem, &layout)?;

        // Inner damping loop: grow lambda until a step is accepted.
        let mut attempts = 0;
        loop {
            let solved = solve_step(&lin, &layout, lambda);
            let (dx_c, dx_l) = match solved {
                Some(s) => s,
                None if gn_mode => return Err(SolveError::SingularNormalEquations),
                None => {
                    lambda = (lambda * settings.lm_lambda_factor).max(1e-9);
                    attempts += 1;
                    if attempts > 60 {
                        return Err(SolveError::SingularNormalEquations);
                    }
                    continue;
                }
            };
            let step_norm = (dx_c.norm_squared()
                + dx_l.iter().map(|d| d.norm_squared()).sum::<f64>())
            .sqrt();
            let candidate = apply_step(problem, &layout, &dx_c, &dx_l);
            let new_cost = problem.cost_of(&candidate)?;

            if step_norm < settings.step_tolerance {
                if new_cost <= cost {
                    problem.values = candidate;
                }
                reason = ConvergenceReason::StepTolerance;
                break 'outer;
            }
            if new_cost <= cost {
                let decrease = cost - new_cost;
                problem.values = candidate;
                cost = new_cost;
                if !gn_mode {
                    lambda = (lambda / settings.lm_lambda_factor).max(1e-12);
                }
                if decrease <= settings.cost_tolerance * cost.max(1e-12) {
                    reason = ConvergenceReason::CostTolerance;
                    break 'outer;
                }
                break;
            }

            // Cost increased: Gauss-Newton falls back to damping.
            rejected_steps += 1;
            if gn_mode {
                gn_mode = false;
                lambda = settings.lm_lambda_init.max(1e-9);
            } else {
                lambda *= settings.lm_lambda_factor;
            }
            attempts += 1;
            if lambda > 1e14 || attempts > 60 {
                reason = ConvergenceReason::StalledLambda;
                break 'outer;
            }
        }
    }

    let (final_cost, cost_breakdown, inactive) = problem.cost()?;
    let (hits1, misses1) = problem.approx_totals();
    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost,
        reason,
        cost_breakdown,
        approx_hits: hits1 - hits0,
        approx_misses: misses1 - misses0,
        rejected_steps,
        inactive_factors: inactive,
    })
}
