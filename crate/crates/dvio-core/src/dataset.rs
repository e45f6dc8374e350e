//! Dataset files: newline-delimited JSON, one file per stream
//! (`imu.jsonl`, `dvl.jsonl`, `cam.jsonl`, `landmarks.jsonl`, `gt.jsonl`).
//! The first record of each file is a header carrying units, the rig echo,
//! the seed and the format version. Ground truth lives in its own file so
//! estimators cannot accidentally consume it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::dvl::TransducerMeasurement;
use crate::geometry::{RigidTransform, Rotation};
use crate::imu::ImuSample;
use crate::sim::{CameraFrame, GroundTruth, GroundTruthState, SensorRig, SyntheticDataset};
use crate::state::{CameraObservation, Landmark};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: missing or invalid header")]
    Header { path: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

/// Header written as the first record of every stream file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamHeader {
    pub record: String, // always "header"
    pub stream: String,
    pub format_version: u32,
    pub seed: u64,
    pub units: String,
    /// Sensor rates and nominal parameters an estimator is allowed to know.
    pub rig: RigEcho,
}

/// The estimator-visible part of the rig: rates, camera intrinsics, nominal
/// transducer geometry and noise levels. True extrinsics and true geometry
/// stay in the ground-truth file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigEcho {
    pub imu_hz: f64,
    pub dvl_hz: f64,
    pub cam_hz: f64,
    pub cam_t0: f64,
    pub cam_count: usize,
    pub gravity: f64,
    pub camera: CameraModel,
    pub nominal_alpha_deg: f64,
    pub nominal_beta_deg: f64,
    pub sigma_d: f64,
    pub pixel_std: f64,
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub duration: f64,
}

impl RigEcho {
    pub fn from_rig(rig: &SensorRig, cam_t0: f64, cam_count: usize, duration: f64) -> Self {
        RigEcho {
            imu_hz: rig.imu_hz,
            dvl_hz: rig.dvl_hz,
            cam_hz: rig.cam_hz,
            cam_t0,
            cam_count,
            gravity: rig.gravity,
            camera: rig.camera,
            nominal_alpha_deg: 67.5,
            nominal_beta_deg: 45.0,
            sigma_d: rig.noise.sigma_d,
            pixel_std: rig.noise.pixel_std,
            gyro_noise_density: rig.noise.gyro_noise_density,
            accel_noise_density: rig.noise.accel_noise_density,
            gyro_bias_walk: rig.noise.gyro_bias_walk,
            accel_bias_walk: rig.noise.accel_bias_walk,
            duration,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRecord {
    t: f64,
    omega: [f64; 3],
    accel: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct DvlRecord {
    t: f64,
    radial: [f64; 4],
    sigma_d: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CamRecord {
    t: f64,
    obs: Vec<ObsRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObsRecord {
    id: u64,
    u: f64,
    v: f64,
    ur: f64,
    sigma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRecord {
    id: u64,
    p: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRecord {
    t: f64,
    r_wc: [f64; 9],
    p_wc: [f64; 3],
    v_d: [f64; 3],
    bg: [f64; 3],
    ba: [f64; 3],
}

/// Truth header extension: the true calibration parameters.
#[derive(Debug, Serialize, Deserialize)]
struct GtHeader {
    record: String,
    format_version: u32,
    seed: u64,
    r_wi0: [f64; 9],
    t_wc0_r: [f64; 9],
    t_wc0_p: [f64; 3],
    t_id_r: [f64; 9],
    t_id_p: [f64; 3],
    t_dc_r: [f64; 9],
    t_dc_p: [f64; 3],
    alpha: [f64; 4],
    beta: [f64; 4],
}

fn rot_to_array(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    [
        m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)],
        m[(2, 2)],
    ]
}

fn rot_from_array(a: &[f64; 9]) -> Rotation {
    Rotation::from_matrix_unchecked(nalgebra::Matrix3::new(
        a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8],
    ))
    .renormalized()
}

fn vec_to_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    header: &impl Serialize,
    records: impl Iterator<Item = T>,
) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let hdr = serde_json::to_string(header).expect("header serializes");
    writeln!(w, "{hdr}").map_err(|e| io_err(path, e))?;
    for r in records {
        let line = serde_json::to_string(&r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(path, e))
}

fn parse_record<T: for<'de> Deserialize<'de>>(
    path: &Path,
    line_no: usize,
    line: &str,
) -> Result<T, DatasetError> {
    serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        path: path.display().to_string(),
        line: line_no + 1,
        message: e.to_string(),
    })
}

/// Writes all five stream files of a dataset into `dir`.
pub fn write_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let echo = RigEcho::from_rig(&dataset.rig, dataset.cam_t0, dataset.cam_count, dataset.duration);
    let header = |stream: &str, units: &str| StreamHeader {
        record: "header".into(),
        stream: stream.into(),
        format_version: FORMAT_VERSION,
        seed: dataset.seed,
        units: units.into(),
        rig: echo.clone(),
    };

    write_jsonl(
        &dir.join("imu.jsonl"),
        &header("imu", "t:s omega:rad/s accel:m/s^2"),
        dataset.imu.iter().map(|s| ImuRecord {
            t: s.timestamp,
            omega: vec_to_array(&s.omega),
            accel: vec_to_array(&s.accel),
        }),
    )?;
    write_jsonl(
        &dir.join("dvl.jsonl"),
        &header("dvl", "t:s radial:m/s"),
        dataset.dvl.iter().map(|m| DvlRecord { t: m.timestamp, radial: m.radial, sigma_d: m.sigma_d }),
    )?;
    write_jsonl(
        &dir.join("cam.jsonl"),
        &header("cam", "t:s u,v,ur:px"),
        dataset.frames.iter().map(|f| CamRecord {
            t: f.t,
            obs: f
                .observations
                .iter()
                .map(|o| ObsRecord {
                    id: o.landmark_id,
                    u: o.u,
                    v: o.v,
                    ur: o.u_right.unwrap_or(f64::NAN),
                    sigma: o.sigma,
                })
                .collect(),
        }),
    )?;
    write_jsonl(
        &dir.join("landmarks.jsonl"),
        &header("landmarks", "p:m (initial camera frame)"),
        dataset.landmarks.iter().map(|l| LandmarkRecord { id: l.id, p: vec_to_array(&l.position) }),
    )?;

    let gt = &dataset.ground_truth;
    let gt_header = GtHeader {
        record: "header".into(),
        format_version: FORMAT_VERSION,
        seed: dataset.seed,
        r_wi0: rot_to_array(&gt.r_wi0),
        t_wc0_r: rot_to_array(&gt.t_wc0.rotation),
        t_wc0_p: vec_to_array(&gt.t_wc0.translation),
        t_id_r: rot_to_array(&gt.extrinsics.t_id.rotation),
        t_id_p: vec_to_array(&gt.extrinsics.t_id.translation),
        t_dc_r: rot_to_array(&gt.extrinsics.t_dc.rotation),
        t_dc_p: vec_to_array(&gt.extrinsics.t_dc.translation),
        alpha: gt.transducers.alpha,
        beta: gt.transducers.beta,
    };
    write_jsonl(
        &dir.join("gt.jsonl"),
        &gt_header,
        gt.states.iter().map(|s| GtRecord {
            t: s.t,
            r_wc: rot_to_array(&s.r_wc),
            p_wc: vec_to_array(&s.p_wc),
            v_d: vec_to_array(&s.v_d),
            bg: vec_to_array(&s.bias.gyro),
            ba: vec_to_array(&s.bias.accel),
        }),
    )
}

/// Sensor-side dataset view loaded from disk (no ground truth).
#[derive(Debug, Clone)]
pub struct SensorData {
    pub header: RigEcho,
    pub seed: u64,
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<TransducerMeasurement>,
    pub frames: Vec<CameraFrame>,
    pub landmarks: Vec<Landmark>,
}

fn read_header(path: &Path, lines: &[String]) -> Result<StreamHeader, DatasetError> {
    let first = lines.first().ok_or_else(|| DatasetError::Header { path: path.display().to_string() })?;
    let header: StreamHeader = parse_record(path, 0, first)?;
    if header.record != "header" || header.format_version != FORMAT_VERSION {
        return Err(DatasetError::Header { path: path.display().to_string() });
    }
    Ok(header)
}

/// Loads the sensor streams (imu/dvl/cam/landmarks) from `dir`.
pub fn read_sensor_data(dir: &Path) -> Result<SensorData, DatasetError> {
    let imu_path = dir.join("imu.jsonl");
    let imu_lines = read_lines(&imu_path)?;
    let header = read_header(&imu_path, &imu_lines)?;
    let mut imu = Vec::with_capacity(imu_lines.len().saturating_sub(1));
    for (i, line) in imu_lines.iter().enumerate().skip(1) {
        let r: ImuRecord = parse_record(&imu_path, i, line)?;
        imu.push(ImuSample {
            omega: Vector3::from_row_slice(&r.omega),
            accel: Vector3::from_row_slice(&r.accel),
            timestamp: r.t,
        });
    }

    let dvl_path = dir.join("dvl.jsonl");
    let dvl_lines = read_lines(&dvl_path)?;
    read_header(&dvl_path, &dvl_lines)?;
    let mut dvl = Vec::with_capacity(dvl_lines.len().saturating_sub(1));
    for (i, line) in dvl_lines.iter().enumerate().skip(1) {
        let r: DvlRecord = parse_record(&dvl_path, i, line)?;
        dvl.push(TransducerMeasurement { radial: r.radial, timestamp: r.t, sigma_d: r.sigma_d });
    }

    let cam_path = dir.join("cam.jsonl");
    let cam_lines = read_lines(&cam_path)?;
    read_header(&cam_path, &cam_lines)?;
    let mut frames = Vec::with_capacity(cam_lines.len().saturating_sub(1));
    for (i, line) in cam_lines.iter().enumerate().skip(1) {
        let r: CamRecord = parse_record(&cam_path, i, line)?;
        frames.push(CameraFrame {
            t: r.t,
            observations: r
                .obs
                .into_iter()
                .map(|o| CameraObservation {
                    landmark_id: o.id,
                    u: o.u,
                    v: o.v,
                    u_right: if o.ur.is_finite() { Some(o.ur) } else { None },
                    sigma: o.sigma,
                })
                .collect(),
        });
    }

    let lm_path = dir.join("landmarks.jsonl");
    let lm_lines = read_lines(&lm_path)?;
    read_header(&lm_path, &lm_lines)?;
    let mut landmarks = Vec::with_capacity(lm_lines.len().saturating_sub(1));
    for (i, line) in lm_lines.iter().enumerate().skip(1) {
        let r: LandmarkRecord = parse_record(&lm_path, i, line)?;
        landmarks.push(Landmark { id: r.id, position: Vector3::from_row_slice(&r.p) });
    }

    Ok(SensorData { seed: header.seed, header: header.rig, imu, dvl, frames, landmarks })
}

/// Loads the ground-truth file from `dir`.
pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth, DatasetError> {
    let path = dir.join("gt.jsonl");
    let lines = read_lines(&path)?;
    let first = lines.first().ok_or_else(|| DatasetError::Header { path: path.display().to_string() })?;
    let h: GtHeader = parse_record(&path, 0, first)?;
    if h.record != "header" {
        return Err(DatasetError::Header { path: path.display().to_string() });
    }
    let mut states = Vec::with_capacity(lines.len().saturating_sub(1));
    for (i, line) in lines.iter().enumerate().skip(1) {
        let r: GtRecord = parse_record(&path, i, line)?;
        states.push(GroundTruthState {
            t: r.t,
            r_wc: rot_from_array(&r.r_wc),
            p_wc: Vector3::from_row_slice(&r.p_wc),
            v_d: Vector3::from_row_slice(&r.v_d),
            bias: crate::imu::ImuBias {
                gyro: Vector3::from_row_slice(&r.bg),
                accel: Vector3::from_row_slice(&r.ba),
            },
        });
    }
    Ok(GroundTruth {
        r_wi0: rot_from_array(&h.r_wi0),
        t_wc0: RigidTransform::new(rot_from_array(&h.t_wc0_r), Vector3::from_row_slice(&h.t_wc0_p)),
        states,
        extrinsics: crate::state::ExtrinsicSet {
            t_id: RigidTransform::new(rot_from_array(&h.t_id_r), Vector3::from_row_slice(&h.t_id_p)),
            t_dc: RigidTransform::new(rot_from_array(&h.t_dc_r), Vector3::from_row_slice(&h.t_dc_p)),
            r_wi0: rot_from_array(&h.r_wi0),
        },
        transducers: crate::dvl::TransducerGeometry { alpha: h.alpha, beta: h.beta },
    })
}

/// Writes a trajectory estimate as JSONL (`t`, rotation, position, velocity,
/// mode flag).
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub r: [f64; 9],
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub mode: String,
}

pub fn write_estimate(records: &[EstimateRecord], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_estimate(path: &Path) -> Result<Vec<EstimateRecord>, DatasetError> {
    let lines = read_lines(path)?;
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(path, i, l))
        .collect()
}

pub fn estimate_record(t: f64, r: &Rotation, p: &Vector3<f64>, v: &Vector3<f64>, mode: &str) -> EstimateRecord {
    EstimateRecord { t, r: rot_to_array(r), p: vec_to_array(p), v: vec_to_array(v), mode: mode.into() }
}

pub fn estimate_pose(rec: &EstimateRecord) -> (f64, Rotation, Vector3<f64>) {
    (rec.t, rot_from_array(&rec.r), Vector3::from_row_slice(&rec.p))
}
