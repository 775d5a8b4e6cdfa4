//! Scenario bundles on disk: one file per stream plus a manifest holding the
//! configuration and a SHA-256 of every file.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use twinloc::evaluation::{FrameTag, TrajectoryRecord};
use twinloc::geometry::{Pose, Rotation};
use twinloc::gnss::{GnssModels, GpsFix};
use twinloc::simkit::{FrameObservations, ImuSample};
use twinloc::twin::TwinMesh;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::scenario::{GroundTruthSample, Scenario};

pub const MESH_FILE: &str = "mesh.obj";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const OBSERVATIONS_FILE: &str = "observations.json";
pub const GPS_FILE: &str = "gps.csv";
pub const GNSS_MODEL_FILE: &str = "gnss_model.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to check and re-create a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    /// File name to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GpsRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    cxx: f64,
    cxy: f64,
    cxz: f64,
    cyy: f64,
    cyz: f64,
    czz: f64,
    n_sats: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    frame: FrameTag,
}

/// Model file written by the GNSS fitting step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GnssModelFile<D> {
    pub models: GnssModels,
    pub diagnostics: D,
}

fn quat(p: &Pose) -> [f64; 4] {
    let q = p.rotation.to_quaternion();
    [q.w, q.i, q.j, q.k]
}

fn pose_from(x: f64, y: f64, z: f64, q: [f64; 4]) -> Pose {
    Pose::new(Rotation::from_wxyz(q[0], q[1], q[2], q[3]), Vector3::new(x, y, z))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Bundle(format!("CSV encoding failed: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Bundle(format!("CSV encoding failed: {e}")))
}

fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| CliError::Parse { file: path.display().to_string(), message: e.to_string() })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { file: path.display().to_string(), message: e.to_string() })
}

pub fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types always serialize");
    s.push('\n');
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn trajectory_csv(record: &TrajectoryRecord) -> Result<Vec<u8>, CliError> {
    csv_bytes(record.poses.iter().map(|(t, p)| {
        let [qw, qx, qy, qz] = quat(p);
        let v = p.translation;
        TrajectoryRow { t: *t, x: v.x, y: v.y, z: v.z, qw, qx, qy, qz, frame: record.frame }
    }))
}

/// Reads `t,x,y,z,qw,qx,qy,qz,frame` rows; the frame must not change.
pub fn read_trajectory(path: &Path, source: &str) -> Result<TrajectoryRecord, CliError> {
    let rows: Vec<TrajectoryRow> = read_csv(path)?;
    let frame = rows.first().map(|r| r.frame).unwrap_or(FrameTag::World);
    if rows.iter().any(|r| r.frame != frame) {
        return Err(CliError::Parse { file: path.display().to_string(), message: "mixed frame tags".into() });
    }
    let poses = rows.iter().map(|r| (r.t, pose_from(r.x, r.y, r.z, [r.qw, r.qx, r.qy, r.qz]))).collect();
    TrajectoryRecord::new(frame, source, poses)
        .map_err(|e| CliError::Parse { file: path.display().to_string(), message: e.to_string() })
}

/// Ground-truth CSV as a world-frame trajectory record.
pub fn read_ground_truth(path: &Path) -> Result<TrajectoryRecord, CliError> {
    let rows = read_ground_truth_rows(path)?;
    TrajectoryRecord::new(FrameTag::World, "ground-truth", rows.iter().map(|g| (g.t, g.pose)).collect())
        .map_err(|e| CliError::Parse { file: path.display().to_string(), message: e.to_string() })
}

fn read_ground_truth_rows(path: &Path) -> Result<Vec<GroundTruthSample>, CliError> {
    let rows: Vec<GroundTruthRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| GroundTruthSample {
            t: r.t,
            pose: pose_from(r.x, r.y, r.z, [r.qw, r.qx, r.qy, r.qz]),
            velocity: Vector3::new(r.vx, r.vy, r.vz),
        })
        .collect())
}

/// Serialized content of every bundle file, keyed by file name.
fn bundle_files(sc: &Scenario) -> Result<BTreeMap<&'static str, Vec<u8>>, CliError> {
    let mut files = BTreeMap::new();
    files.insert(MESH_FILE, sc.mesh.to_obj_string().into_bytes());
    files.insert(
        GROUND_TRUTH_FILE,
        csv_bytes(sc.ground_truth.iter().map(|g| {
            let [qw, qx, qy, qz] = quat(&g.pose);
            let (p, v) = (g.pose.translation, g.velocity);
            GroundTruthRow { t: g.t, x: p.x, y: p.y, z: p.z, qw, qx, qy, qz, vx: v.x, vy: v.y, vz: v.z }
        }))?,
    );
    files.insert(
        IMU_FILE,
        csv_bytes(sc.imu.iter().map(|s| ImuRow {
            t: s.t,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        }))?,
    );
    files.insert(OBSERVATIONS_FILE, json_string(&sc.frames).into_bytes());
    files.insert(
        GPS_FILE,
        csv_bytes(sc.fixes.iter().map(|f| {
            let c = &f.covariance;
            GpsRow {
                t: f.t,
                x: f.position.x,
                y: f.position.y,
                z: f.position.z,
                cxx: c[(0, 0)],
                cxy: c[(0, 1)],
                cxz: c[(0, 2)],
                cyy: c[(1, 1)],
                cyz: c[(1, 2)],
                czz: c[(2, 2)],
                n_sats: f.n_sats,
            }
        }))?,
    );
    let model = GnssModelFile { models: sc.gnss_models.clone(), diagnostics: serde_json::Value::Null };
    files.insert(GNSS_MODEL_FILE, json_string(&model).into_bytes());
    Ok(files)
}

/// Writes every stream of the scenario plus the manifest into `dir`.
pub fn write_bundle(sc: &Scenario, dir: &Path) -> Result<Manifest, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let files = bundle_files(sc)?;
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: sc.config.seed,
        config_hash: sc.config.hash(),
        config: sc.config.clone(),
        initial_gyro_bias: sc.gyro_bias.into(),
        initial_accel_bias: sc.accel_bias.into(),
        files: hashes,
    };
    write_file(&dir.join(MANIFEST_FILE), json_string(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Loads a bundle after checking every file against the manifest hashes.
pub fn read_bundle(dir: &Path) -> Result<Scenario, CliError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    for (name, expected) in &manifest.files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if &sha256_hex(&bytes) != expected {
            return Err(CliError::Bundle(format!("{} does not match its manifest hash", path.display())));
        }
    }
    let mesh = TwinMesh::load(&dir.join(MESH_FILE))?.mesh;
    let ground_truth = read_ground_truth_rows(&dir.join(GROUND_TRUTH_FILE))?;
    let imu = read_csv::<ImuRow>(&dir.join(IMU_FILE))?
        .into_iter()
        .map(|r| ImuSample { t: r.t, gyro: Vector3::new(r.gx, r.gy, r.gz), accel: Vector3::new(r.ax, r.ay, r.az) })
        .collect();
    let frames: Vec<FrameObservations> = read_json(&dir.join(OBSERVATIONS_FILE))?;
    let fixes = read_csv::<GpsRow>(&dir.join(GPS_FILE))?
        .into_iter()
        .map(|r| GpsFix {
            t: r.t,
            position: Vector3::new(r.x, r.y, r.z),
            covariance: Matrix3::new(r.cxx, r.cxy, r.cxz, r.cxy, r.cyy, r.cyz, r.cxz, r.cyz, r.czz),
            n_sats: r.n_sats,
        })
        .collect();
    let model: GnssModelFile<serde_json::Value> = read_json(&dir.join(GNSS_MODEL_FILE))?;
    Ok(Scenario {
        config: manifest.config,
        mesh,
        ground_truth,
        imu,
        gyro_bias: manifest.initial_gyro_bias.into(),
        accel_bias: manifest.initial_accel_bias.into(),
        frames,
        fixes,
        gnss_models: model.models,
    })
}
