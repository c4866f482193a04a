//! Line-JSON pose datasets, synthetic two-domain generation and the per-epoch
//! source/target pairing sampler.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{project_pose, CameraIntrinsics, GeometryError, RootPosition};
use crate::skeleton::{Pose2D, Pose3D, SkeletonDef};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed JSON: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: field `{field}`: {msg}")]
    SchemaViolation { line: usize, field: String, msg: String },
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// What a dataset file is expected to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Labelled source poses (2D and 3D).
    Source,
    /// Unlabelled target poses: 3D is rejected at load time.
    Target,
    /// Target ground truth sidecar: 3D is mandatory.
    Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub joints_2d: Option<Pose2D>,
    pub joints_3d: Option<Pose3D>,
    pub camera: CameraIntrinsics,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<PoseRecord>,
    pub skeleton: SkeletonDef,
    pub domain: Domain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries both 2D and 3D.
    pub fn is_labelled(&self) -> bool {
        self.records.iter().all(|r| r.joints_2d.is_some() && r.joints_3d.is_some())
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    joints_2d: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    joints_3d: Option<Vec<[f64; 3]>>,
    camera: &'a CameraIntrinsics,
}

const FIELDS: [&str; 4] = ["id", "joints_2d", "joints_3d", "camera"];

fn schema(line: usize, field: &str, msg: impl Into<String>) -> DataError {
    DataError::SchemaViolation { line, field: field.to_string(), msg: msg.into() }
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<Option<T>> {
    match obj.get(name) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|e| schema(line, name, e.to_string())),
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_line(rec: &PoseRecord) -> String {
    let wire = WireOut {
        id: &rec.id,
        joints_2d: rec.joints_2d.as_ref().map(|p| p.joints.iter().map(|j| [j.x, j.y]).collect()),
        joints_3d: rec.joints_3d.as_ref().map(|p| p.joints.iter().map(|j| [j.x, j.y, j.z]).collect()),
        camera: &rec.camera,
    };
    serde_json::to_string(&wire).expect("record serialization is infallible")
}

/// Parses and validates one line. `line` is 1-based and only used for errors.
pub fn record_from_line(text: &str, line: usize, skel: &SkeletonDef, domain: Domain) -> Result<PoseRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| DataError::Parse { line, msg: e.to_string() })?;
    let Value::Object(obj) = value else {
        return Err(schema(line, "<record>", "expected a JSON object"));
    };
    if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(schema(line, k, "unknown field"));
    }
    let id: String = field(&obj, "id", line)?.ok_or_else(|| schema(line, "id", "missing"))?;
    let camera: CameraIntrinsics = field(&obj, "camera", line)?.ok_or_else(|| schema(line, "camera", "missing"))?;
    camera.validate().map_err(|e| schema(line, "camera", e.to_string()))?;
    let j = skel.joint_count();
    let joints_2d = field::<Vec<[f64; 2]>>(&obj, "joints_2d", line)?
        .map(|v| {
            if v.len() != j {
                return Err(schema(line, "joints_2d", format!("expected {j} joints, got {}", v.len())));
            }
            Ok(Pose2D::new(v.into_iter().map(|[x, y]| Vector2::new(x, y)).collect()))
        })
        .transpose()?;
    let joints_3d = field::<Vec<[f64; 3]>>(&obj, "joints_3d", line)?
        .map(|v| {
            if v.len() != j {
                return Err(schema(line, "joints_3d", format!("expected {j} joints, got {}", v.len())));
            }
            Ok(Pose3D::new(v.into_iter().map(|[x, y, z]| Vector3::new(x, y, z)).collect()))
        })
        .transpose()?;
    if joints_2d.is_none() && joints_3d.is_none() {
        return Err(schema(line, "joints_2d", "record has neither joints_2d nor joints_3d"));
    }
    match domain {
        Domain::Source => {}
        Domain::Target => {
            if joints_3d.is_some() {
                return Err(schema(line, "joints_3d", "target datasets must not carry 3D labels"));
            }
        }
        Domain::Truth => {
            if joints_3d.is_none() {
                return Err(schema(line, "joints_3d", "ground-truth records require joints_3d"));
            }
        }
    }
    Ok(PoseRecord { id, joints_2d, joints_3d, camera })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Loads and validates a whole file. Any bad line aborts the load.
pub fn load_dataset(path: impl AsRef<Path>, skel: &SkeletonDef, domain: Domain) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_dataset(&text, skel, domain)
}

pub fn parse_dataset(text: &str, skel: &SkeletonDef, domain: Domain) -> Result<Dataset> {
    let records = text
        .lines()
        .enumerate()
        .map(|(i, l)| record_from_line(l, i + 1, skel, domain))
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(schema(0, "<file>", "dataset must contain at least one record"));
    }
    Ok(Dataset { records, skeleton: skel.clone(), domain })
}

/// Writes one record per line in a fixed field order.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in &ds.records {
        writeln!(w, "{}", record_to_line(rec)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `foo.jsonl` -> `foo.gt.jsonl`.
pub fn truth_sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("data");
    let stem = stem.strip_suffix(".jsonl").unwrap_or(stem);
    path.with_file_name(format!("{stem}.gt.jsonl"))
}

/// Per-limb angle distributions of the synthetic pose family (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseFamily {
    /// Half-angle of the cone around straight-down for each thigh.
    pub leg_cone: f64,
    /// Maximum knee flexion.
    pub knee_max: f64,
    /// Half-angle of the cone around vertical for the spine.
    pub lean_cone: f64,
    /// Mean elevation of the upper arms away from hanging.
    pub arm_raise: f64,
    /// Half-angle of the cone around the mean upper-arm direction.
    pub arm_cone: f64,
    /// Maximum elbow flexion.
    pub elbow_max: f64,
    /// Yaw about the vertical axis is uniform in `[-yaw_max, yaw_max]`.
    pub yaw_max: f64,
    /// Global body scale is uniform in this range.
    pub scale_range: (f64, f64),
}

impl PoseFamily {
    /// Narrow, mostly upright family.
    pub fn source_default() -> Self {
        Self {
            leg_cone: 0.35,
            knee_max: 0.6,
            lean_cone: 0.15,
            arm_raise: 0.3,
            arm_cone: 0.5,
            elbow_max: 1.0,
            yaw_max: PI,
            scale_range: (0.95, 1.05),
        }
    }

    /// Broader family with raised arms, deeper knee flexion and more lean.
    pub fn target_default() -> Self {
        Self {
            leg_cone: 0.7,
            knee_max: 1.6,
            lean_cone: 0.5,
            arm_raise: 1.3,
            arm_cone: 1.0,
            elbow_max: 2.0,
            yaw_max: PI,
            scale_range: (0.85, 1.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub domain: Domain,
    pub camera: CameraIntrinsics,
    /// Root depth is uniform in this range (mm).
    pub depth_range: (f64, f64),
    /// Root pixel is uniform within this distance of the principal point on each axis.
    pub root_jitter_px: f64,
    pub family: PoseFamily,
    pub id_prefix: String,
}

impl SynthConfig {
    pub fn source_default(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            domain: Domain::Source,
            camera: CameraIntrinsics { fx: 1100.0, fy: 1100.0, cx: 500.0, cy: 500.0, width: 1000.0, height: 1000.0 },
            depth_range: (4000.0, 6000.0),
            root_jitter_px: 120.0,
            family: PoseFamily::source_default(),
            id_prefix: "src".into(),
        }
    }

    pub fn target_default(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            domain: Domain::Target,
            camera: CameraIntrinsics { fx: 1500.0, fy: 1500.0, cx: 640.0, cy: 560.0, width: 1200.0, height: 1200.0 },
            depth_range: (2500.0, 3500.0),
            root_jitter_px: 250.0,
            family: PoseFamily::target_default(),
            id_prefix: "tar".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::BadConfig(m.to_string()));
        if self.count == 0 {
            return bad("count must be positive");
        }
        self.camera.validate().map_err(|e| DataError::BadConfig(e.to_string()))?;
        let (lo, hi) = self.depth_range;
        // bodies are under a metre deep, so keep every joint well in front of the camera
        if !(lo >= 1500.0 && lo <= hi && hi.is_finite()) {
            return bad("depth_range must satisfy 1500 <= lo <= hi");
        }
        if !(self.root_jitter_px >= 0.0 && self.root_jitter_px.is_finite()) {
            return bad("root_jitter_px must be finite and non-negative");
        }
        let f = &self.family;
        let angles = [f.leg_cone, f.knee_max, f.lean_cone, f.arm_raise, f.arm_cone, f.elbow_max, f.yaw_max];
        if angles.iter().any(|a| !(*a >= 0.0 && *a <= PI)) {
            return bad("family angles must lie in [0, pi]");
        }
        let (s0, s1) = f.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad("scale_range must satisfy 0 < lo <= hi");
        }
        Ok(())
    }
}

/// Generated dataset plus, for target configs, the hidden 3D sidecar.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub truth: Option<Dataset>,
}

/// Unit vector within `half_angle` of `axis`, uniform over the spherical cap.
fn sample_cone<R: Rng + ?Sized>(rng: &mut R, axis: &Vector3<f64>, half_angle: f64) -> Vector3<f64> {
    let axis = axis.normalize();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - half_angle.cos());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * 2.0 * PI;
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    axis * cos_t + (u * phi.cos() + v * phi.sin()) * sin_t
}

/// Rotates `dir` by up to `max_angle` about an axis perpendicular to it and
/// to `hint`, bending towards `hint`.
fn bend<R: Rng + ?Sized>(rng: &mut R, dir: &Vector3<f64>, hint: &Vector3<f64>, max_angle: f64) -> Vector3<f64> {
    let mut axis = dir.cross(hint);
    if axis.norm() < 1e-9 {
        axis = dir.cross(&Vector3::x());
    }
    let angle = rng.random::<f64>() * max_angle;
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle) * dir
}

// Reference bone lengths (mm) of the default skeleton.
const HIP: f64 = 130.0;
const THIGH: f64 = 450.0;
const SHIN: f64 = 440.0;
const SPINE: f64 = 240.0;
const CHEST: f64 = 250.0;
const HEAD: f64 = 120.0;
const SHOULDER: f64 = 150.0;
const UPPER_ARM: f64 = 280.0;
const FOREARM: f64 = 250.0;

/// Samples a root-relative pose of the default 16-joint skeleton in camera
/// coordinates (y down, z forward).
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, fam: &PoseFamily) -> Pose3D {
    // body frame: x to the subject's left, y up, z forward
    let up = Vector3::y();
    let down = -up;
    let fwd = Vector3::z();
    let left = Vector3::x();
    let mut j = vec![Vector3::zeros(); 16];

    let spine_dir = sample_cone(rng, &up, fam.lean_cone);
    j[7] = spine_dir * SPINE;
    let chest_dir = sample_cone(rng, &spine_dir, 0.5 * fam.lean_cone);
    j[8] = j[7] + chest_dir * CHEST;
    j[9] = j[8] + sample_cone(rng, &chest_dir, 0.3) * HEAD;
    // shoulder line stays roughly perpendicular to the chest
    let across = (left - chest_dir * chest_dir.dot(&left)).normalize();

    for (side, hip, knee, ankle) in [(-1.0, 1, 2, 3), (1.0, 4, 5, 6)] {
        j[hip] = left * (side * HIP);
        let thigh = sample_cone(rng, &down, fam.leg_cone);
        j[knee] = j[hip] + thigh * THIGH;
        // knees flex so the shin swings backwards
        j[ankle] = j[knee] + bend(rng, &thigh, &(-fwd), fam.knee_max) * SHIN;
    }
    for (side, sh, el, wr) in [(1.0, 10, 11, 12), (-1.0, 13, 14, 15)] {
        j[sh] = j[8] + across * (side * SHOULDER);
        let raise = Rotation3::from_axis_angle(&Unit::new_normalize(fwd), -side * fam.arm_raise);
        let mean = raise * down;
        let upper = sample_cone(rng, &mean, fam.arm_cone);
        j[el] = j[sh] + upper * UPPER_ARM;
        j[wr] = j[el] + bend(rng, &upper, &fwd, fam.elbow_max) * FOREARM;
    }

    let scale = rng.random_range(fam.scale_range.0..=fam.scale_range.1);
    let yaw = if fam.yaw_max > 0.0 { rng.random_range(-fam.yaw_max..=fam.yaw_max) } else { 0.0 };
    let r_yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    // body frame to camera frame: half turn about x (y up -> y down, subject faces the camera)
    let to_cam = Rotation3::from_axis_angle(&Vector3::x_axis(), PI);
    let r = to_cam * r_yaw;
    Pose3D::new(j.into_iter().map(|p| r * (p * scale)).collect())
}

/// Procedurally generates a dataset from `cfg`. The default 16-joint skeleton
/// is always used.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let skel = SkeletonDef::h36m16();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cam = cfg.camera;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let pose = sample_pose(&mut rng, &cfg.family);
        let z = rng.random_range(cfg.depth_range.0..=cfg.depth_range.1);
        let jit = cfg.root_jitter_px;
        let (du, dv) = if jit > 0.0 { (rng.random_range(-jit..=jit), rng.random_range(-jit..=jit)) } else { (0.0, 0.0) };
        let root = RootPosition::new(z * du / cam.fx, z * dv / cam.fy, z);
        let joints_2d = project_pose(&pose, &root, &cam)?;
        records.push(PoseRecord {
            id: format!("{}{:06}", cfg.id_prefix, i),
            joints_2d: Some(joints_2d),
            joints_3d: Some(pose),
            camera: cam,
        });
    }
    let make = |records, domain| Dataset { records, skeleton: skel.clone(), domain };
    Ok(match cfg.domain {
        Domain::Source => SynthOutput { dataset: make(records, Domain::Source), truth: None },
        Domain::Target | Domain::Truth => {
            let visible = records.iter().map(|r| PoseRecord { joints_3d: None, ..r.clone() }).collect();
            SynthOutput { dataset: make(visible, Domain::Target), truth: Some(make(records, Domain::Truth)) }
        }
    })
}

/// Source-to-target assignment for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    /// `targets[i]` is the target index paired with source `i`.
    pub targets: Vec<usize>,
    pub epoch: u64,
    pub seed: u64,
}

/// How targets are drawn for the per-epoch pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Shuffled rounds over the targets: every target is used `⌊Ns/Nt⌋` or
    /// `⌈Ns/Nt⌉` times.
    #[default]
    Permutation,
    /// Independent uniform draw per source.
    Replacement,
}

/// Permutation pairing; see [`pairing_plan_with`].
pub fn pairing_plan(source_len: usize, target_len: usize, epoch: u64, seed: u64) -> Result<PairingPlan> {
    pairing_plan_with(Pairing::Permutation, source_len, target_len, epoch, seed)
}

pub fn pairing_plan_with(
    mode: Pairing,
    source_len: usize,
    target_len: usize,
    epoch: u64,
    seed: u64,
) -> Result<PairingPlan> {
    if source_len == 0 || target_len == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let targets = match mode {
        Pairing::Permutation => {
            let mut targets = Vec::with_capacity(source_len + target_len);
            let mut round: Vec<usize> = (0..target_len).collect();
            while targets.len() < source_len {
                round.shuffle(&mut rng);
                targets.extend_from_slice(&round);
            }
            targets.truncate(source_len);
            targets
        }
        Pairing::Replacement => (0..source_len).map(|_| rng.random_range(0..target_len)).collect(),
    };
    Ok(PairingPlan { targets, epoch, seed })
}

pub fn pairing_sampler(src: &Dataset, tar: &Dataset, epoch: u64, seed: u64) -> Result<PairingPlan> {
    pairing_plan(src.len(), tar.len(), epoch, seed)
}
