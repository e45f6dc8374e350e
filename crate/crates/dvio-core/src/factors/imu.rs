//! IMU factors: rotation, velocity and translation residuals against the
//! pre-integrated increments, individually or stacked into one 9-dimensional
//! factor whitened by the joint pre-integration covariance.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::geometry::{hat, left_jacobian_inv, right_jacobian_inv, Rotation};
use crate::imu::ImuBias;
use crate::preintegration::PreintegratedImu;
use crate::state::GravityModel;

use super::{Evaluation, Factor, FactorError, SqrtInformation, Values, VarId};

/// Variable handles shared by all IMU factor variants.
#[derive(Debug, Clone, Copy)]
pub struct ImuVars {
    pub rot_i: VarId,
    pub pos_i: VarId,
    pub rot_j: VarId,
    pub pos_j: VarId,
    pub vel_i: VarId,
    pub vel_j: VarId,
    pub rot_id: VarId,
    pub rot_dc: VarId,
    pub trans_id: VarId,
    pub trans_dc: VarId,
    pub rot_wi0: VarId,
    pub bg_i: VarId,
    pub ba_i: VarId,
}

impl ImuVars {
    fn list(&self) -> [VarId; 13] {
        [
            self.rot_i, self.pos_i, self.rot_j, self.pos_j, self.vel_i, self.vel_j, self.rot_id,
            self.rot_dc, self.trans_id, self.trans_dc, self.rot_wi0, self.bg_i, self.ba_i,
        ]
    }
}

/// Index of each variable inside [`ImuVars::list`].
#[derive(Clone, Copy)]
enum Slot {
    RotI = 0,
    PosI = 1,
    RotJ = 2,
    PosJ = 3,
    VelI = 4,
    VelJ = 5,
    RotId = 6,
    RotDc = 7,
    TransId = 8,
    TransDc = 9,
    RotWi0 = 10,
    BgI = 11,
    BaI = 12,
}

/// One residual block (rotation, velocity or translation) with its Jacobians
/// laid out per [`ImuVars::list`].
struct Block {
    residual: Vector3<f64>,
    jac: [Option<Matrix3<f64>>; 13],
}

impl Block {
    fn new(residual: Vector3<f64>) -> Self {
        Block { residual, jac: [None; 13] }
    }

    fn set(&mut self, slot: Slot, m: Matrix3<f64>) {
        self.jac[slot as usize] = Some(m);
    }
}

struct StateInputs {
    r_i: Rotation,
    p_i: Vector3<f64>,
    r_j: Rotation,
    p_j: Vector3<f64>,
    v_i: Vector3<f64>,
    v_j: Vector3<f64>,
    r_id: Rotation,
    r_dc: Rotation,
    p_id: Vector3<f64>,
    p_dc: Vector3<f64>,
    r_wi0: Rotation,
    bias: ImuBias,
}

fn read_inputs(vars: &ImuVars, values: &Values) -> StateInputs {
    StateInputs {
        r_i: values.rot(vars.rot_i),
        p_i: values.vec3(vars.pos_i),
        r_j: values.rot(vars.rot_j),
        p_j: values.vec3(vars.pos_j),
        v_i: values.vec3(vars.vel_i),
        v_j: values.vec3(vars.vel_j),
        r_id: values.rot(vars.rot_id),
        r_dc: values.rot(vars.rot_dc),
        p_id: values.vec3(vars.trans_id),
        p_dc: values.vec3(vars.trans_dc),
        r_wi0: values.rot(vars.rot_wi0),
        bias: ImuBias { gyro: values.vec3(vars.bg_i), accel: values.vec3(vars.ba_i) },
    }
}

/// r = Log(R_IC Ri^T Rj R_IC^T dR^T) with the bias-corrected increment.
fn rotation_block(s: &StateInputs, pre: &PreintegratedImu) -> Block {
    let r_ic = s.r_id * s.r_dc;
    let (delta_r, _, _) = pre.corrected(&s.bias);
    let b = r_ic * s.r_i.inverse() * s.r_j * r_ic.inverse();
    let residual = (b * delta_r.inverse()).log();

    let jr_inv = right_jacobian_inv(&residual);
    let jl_inv = left_jacobian_inv(&residual);
    let mut blk = Block::new(residual);
    blk.set(Slot::RotI, -jl_inv * r_ic.matrix());
    blk.set(Slot::RotJ, jr_inv * delta_r.matrix() * r_ic.matrix());
    // The bias correction enters inside Exp(dr_dbg db); differentiating at a
    // bias away from the linearization point picks up Jr of that argument.
    let e = pre.dr_dbg * (s.bias.gyro - pre.bias_lin.gyro);
    blk.set(Slot::BgI, -jr_inv * delta_r.matrix() * crate::geometry::right_jacobian(&e) * pre.dr_dbg);
    let j_f = jl_inv * (Matrix3::identity() - b.matrix());
    blk.set(Slot::RotId, j_f);
    blk.set(Slot::RotDc, j_f * s.r_id.matrix());
    blk
}

/// r = dv - R_IC Ri^T (Rj R_DC^T vj - Ri R_DC^T vi - (R_WI0 R_IC)^T g dt).
fn velocity_block(s: &StateInputs, pre: &PreintegratedImu, gravity: &GravityModel) -> Block {
    let dt = pre.dt_total;
    let g_w = gravity.vector();
    let f = s.r_id * s.r_dc; // R_IC
    let g = s.r_dc;
    let a = s.r_i.inverse() * s.r_j;
    let g_i = f.inverse() * (s.r_wi0.inverse() * g_w); // gravity seen through R_IC
    let (_, delta_v, _) = pre.corrected(&s.bias);

    let gt_vj = g.inverse() * s.v_j;
    let gt_vi = g.inverse() * s.v_i;
    let h = f * (a * gt_vj - gt_vi - (s.r_i.inverse() * g_i) * dt);
    let residual = delta_v - h;

    let fm = f.matrix();
    let mut blk = Block::new(residual);
    blk.set(
        Slot::RotI,
        -(fm * (hat(&(a * gt_vj)) - hat(&(s.r_i.inverse() * g_i)) * dt)),
    );
    blk.set(Slot::RotJ, fm * a.matrix() * hat(&gt_vj));
    blk.set(Slot::VelI, fm * g.inverse().matrix());
    blk.set(Slot::VelJ, -(fm * a.matrix() * g.inverse().matrix()));
    blk.set(
        Slot::RotWi0,
        fm * s.r_i.inverse().matrix() * f.inverse().matrix() * s.r_wi0.inverse().matrix()
            * hat(&g_w)
            * dt,
    );
    // R_IC and R_DC sensitivities, chained onto the extrinsic variables.
    let m = fm * s.r_i.inverse().matrix() * f.inverse().matrix();
    let w0 = s.r_wi0.inverse() * g_w * dt;
    let dh_df = -hat(&h) - m * hat(&w0);
    let dh_dg = fm * (a.matrix() * hat(&gt_vj) - hat(&gt_vi)) * g.inverse().matrix();
    blk.set(Slot::RotId, -dh_df);
    blk.set(Slot::RotDc, -(dh_df * s.r_id.matrix() + dh_dg));
    blk.set(Slot::BgI, pre.dv_dbg);
    blk.set(Slot::BaI, pre.dv_dba);
    blk
}

/// r = dp - R_IC Ri^T (Rj p_CI + pj - Ri p_CI - pi - Ri R_DC^T vi dt
///       - 1/2 (R_WI0 R_IC)^T g dt^2).
fn translation_block(s: &StateInputs, pre: &PreintegratedImu, gravity: &GravityModel) -> Block {
    let dt = pre.dt_total;
    let g_w = gravity.vector();
    let f = s.r_id * s.r_dc; // R_IC
    let g = s.r_dc;
    let a = s.r_i.inverse() * s.r_j;
    let u = s.r_wi0.inverse() * g_w;
    let c = -(f.inverse() * s.p_id) - g.inverse() * s.p_dc; // p_CI
    let dp = s.p_j - s.p_i;
    let (_, _, delta_p) = pre.corrected(&s.bias);

    let h = f * (a * c - c + s.r_i.inverse() * dp)
        - f * (g.inverse() * s.v_i) * dt
        - f * (s.r_i.inverse() * (f.inverse() * u)) * (0.5 * dt * dt);
    let residual = delta_p - h;

    let fm = f.matrix();
    let k = fm * s.r_i.inverse().matrix();
    let y = a * c + s.r_i.inverse() * dp;
    let r_diff = s.r_j.matrix() - s.r_i.matrix();

    let mut blk = Block::new(residual);
    blk.set(
        Slot::RotI,
        -(fm * (hat(&y) - hat(&(s.r_i.inverse() * (f.inverse() * u))) * (0.5 * dt * dt))),
    );
    blk.set(Slot::RotJ, k * s.r_j.matrix() * hat(&c));
    blk.set(Slot::PosI, k);
    blk.set(Slot::PosJ, -k);
    blk.set(Slot::VelI, fm * g.inverse().matrix() * dt);
    blk.set(
        Slot::RotWi0,
        k * f.inverse().matrix() * s.r_wi0.inverse().matrix() * hat(&g_w) * (0.5 * dt * dt),
    );
    let dh_dpid = -(k * r_diff * f.inverse().matrix());
    let dh_dq = -(k * r_diff * g.inverse().matrix());
    blk.set(Slot::TransId, -dh_dpid);
    blk.set(Slot::TransDc, -dh_dq);
    let dh_df = -hat(&h) - k * r_diff * f.inverse().matrix() * hat(&s.p_id)
        - k * f.inverse().matrix() * hat(&u) * (0.5 * dt * dt);
    let dh_dg = -(k * r_diff * g.inverse().matrix() * hat(&s.p_dc))
        - fm * g.inverse().matrix() * hat(&s.v_i) * dt;
    blk.set(Slot::RotId, -dh_df);
    blk.set(Slot::RotDc, -(dh_df * s.r_id.matrix() + dh_dg));
    blk.set(Slot::BgI, pre.dp_dbg);
    blk.set(Slot::BaI, pre.dp_dba);
    blk
}

fn assemble(
    blocks: &[Block],
    sqrt_info: &SqrtInformation,
    vars: &[VarId],
    with_jacobians: bool,
    kind: &'static str,
) -> Result<Evaluation, FactorError> {
    let dim = 3 * blocks.len();
    let mut residual = DVector::zeros(dim);
    for (b, blk) in blocks.iter().enumerate() {
        residual.fixed_rows_mut::<3>(3 * b).copy_from(&blk.residual);
    }
    let residual = sqrt_info.whiten_vector(&residual);
    if !residual.iter().all(|x| x.is_finite()) {
        return Err(FactorError::NonFinite { kind });
    }
    let jacobians = if with_jacobians {
        let mut out = Vec::with_capacity(vars.len());
        for slot in 0..vars.len() {
            let mut j = DMatrix::zeros(dim, 3);
            for (b, blk) in blocks.iter().enumerate() {
                if let Some(m) = &blk.jac[slot] {
                    j.fixed_view_mut::<3, 3>(3 * b, 0).copy_from(m);
                }
            }
            out.push(sqrt_info.whiten_matrix(&j));
        }
        out
    } else {
        Vec::new()
    };
    Ok(Evaluation::Active { residual, jacobians })
}

/// Re-linearizes the pre-integration when the bias has moved past the
/// threshold.
fn maybe_reintegrate(pre: &mut PreintegratedImu, bias: &ImuBias, threshold: f64) {
    if bias.max_delta(&pre.bias_lin) > threshold {
        *pre = pre.reintegrate(bias);
    }
}

macro_rules! imu_factor_common {
    () => {
        fn variables(&self) -> &[VarId] {
            &self.vars
        }
    };
}

/// Stacked rotation+velocity+translation factor whitened by the joint 9x9
/// pre-integration covariance. Used by the sliding-window estimator and the
/// full calibration refinement.
pub struct ImuFactor {
    handles: ImuVars,
    vars: [VarId; 13],
    pre: PreintegratedImu,
    gravity: GravityModel,
    sqrt_info: SqrtInformation,
    pub bias_threshold: f64,
}

impl ImuFactor {
    pub fn new(handles: ImuVars, pre: PreintegratedImu, gravity: GravityModel, floor: f64) -> Self {
        let mut cov = DMatrix::zeros(9, 9);
        cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&pre.covariance);
        let sqrt_info = SqrtInformation::from_covariance(&cov, floor);
        ImuFactor {
            handles,
            vars: handles.list(),
            pre,
            gravity,
            sqrt_info,
            bias_threshold: 1e-3,
        }
    }
}

impl Factor for ImuFactor {
    fn kind(&self) -> &'static str {
        "imu"
    }

    fn dim(&self) -> usize {
        9
    }

    imu_factor_common!();

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let s = read_inputs(&self.handles, values);
        maybe_reintegrate(&mut self.pre, &s.bias, self.bias_threshold);
        let blocks = [
            rotation_block(&s, &self.pre),
            velocity_block(&s, &self.pre, &self.gravity),
            translation_block(&s, &self.pre, &self.gravity),
        ];
        assemble(&blocks, &self.sqrt_info, &self.vars, with_jacobians, self.kind())
    }
}

/// Gyro-only relative rotation factor (calibration stages two and three).
pub struct ImuRotationFactor {
    handles: ImuVars,
    vars: [VarId; 13],
    pre: PreintegratedImu,
    sqrt_info: SqrtInformation,
    pub bias_threshold: f64,
}

impl ImuRotationFactor {
    pub fn new(handles: ImuVars, pre: PreintegratedImu, floor: f64) -> Self {
        let cov = pre.covariance.fixed_view::<3, 3>(0, 0).into_owned();
        let sqrt_info = SqrtInformation::from_covariance3(&cov, floor);
        ImuRotationFactor { handles, vars: handles.list(), pre, sqrt_info, bias_threshold: 1e-3 }
    }
}

impl Factor for ImuRotationFactor {
    fn kind(&self) -> &'static str {
        "imu_rotation"
    }

    fn dim(&self) -> usize {
        3
    }

    imu_factor_common!();

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let s = read_inputs(&self.handles, values);
        maybe_reintegrate(&mut self.pre, &s.bias, self.bias_threshold);
        let blocks = [rotation_block(&s, &self.pre)];
        assemble(&blocks, &self.sqrt_info, &self.vars, with_jacobians, self.kind())
    }
}

/// Accelerometer velocity factor (gravity-direction initialization).
pub struct ImuVelocityFactor {
    handles: ImuVars,
    vars: [VarId; 13],
    pre: PreintegratedImu,
    gravity: GravityModel,
    sqrt_info: SqrtInformation,
    pub bias_threshold: f64,
}

impl ImuVelocityFactor {
    pub fn new(handles: ImuVars, pre: PreintegratedImu, gravity: GravityModel, floor: f64) -> Self {
        let cov = pre.covariance.fixed_view::<3, 3>(3, 3).into_owned();
        let sqrt_info = SqrtInformation::from_covariance3(&cov, floor);
        ImuVelocityFactor {
            handles,
            vars: handles.list(),
            pre,
            gravity,
            sqrt_info,
            bias_threshold: 1e-3,
        }
    }
}

impl Factor for ImuVelocityFactor {
    fn kind(&self) -> &'static str {
        "imu_velocity"
    }

    fn dim(&self) -> usize {
        3
    }

    imu_factor_common!();

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let s = read_inputs(&self.handles, values);
        maybe_reintegrate(&mut self.pre, &s.bias, self.bias_threshold);
        let blocks = [velocity_block(&s, &self.pre, &self.gravity)];
        assemble(&blocks, &self.sqrt_info, &self.vars, with_jacobians, self.kind())
    }
}

/// Accelerometer translation factor.
pub struct ImuTranslationFactor {
    handles: ImuVars,
    vars: [VarId; 13],
    pre: PreintegratedImu,
    gravity: GravityModel,
    sqrt_info: SqrtInformation,
    pub bias_threshold: f64,
}

impl ImuTranslationFactor {
    pub fn new(handles: ImuVars, pre: PreintegratedImu, gravity: GravityModel, floor: f64) -> Self {
        let cov = pre.covariance.fixed_view::<3, 3>(6, 6).into_owned();
        let sqrt_info = SqrtInformation::from_covariance3(&cov, floor);
        ImuTranslationFactor {
            handles,
            vars: handles.list(),
            pre,
            gravity,
            sqrt_info,
            bias_threshold: 1e-3,
        }
    }
}

impl Factor for ImuTranslationFactor {
    fn kind(&self) -> &'static str {
        "imu_translation"
    }

    fn dim(&self) -> usize {
        3
    }

    imu_factor_common!();

    fn evaluate(&mut self, values: &Values, with_jacobians: bool) -> Result<Evaluation, FactorError> {
        let s = read_inputs(&self.handles, values);
        maybe_reintegrate(&mut self.pre, &s.bias, self.bias_threshold);
        let blocks = [translation_block(&s, &self.pre, &self.gravity)];
        assemble(&blocks, &self.sqrt_info, &self.vars, with_jacobians, self.kind())
    }
}

