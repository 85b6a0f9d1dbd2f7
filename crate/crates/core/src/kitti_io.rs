//! SemanticKITTI file formats.
//!
//! Layout of one sequence directory:
//!
//! ```text
//! {seq}/velodyne/{frame:06}.bin    f32 LE quadruples (x, y, z, intensity)
//! {seq}/labels/{frame:06}.label    u32 LE per point, low 16 bits semantic id
//! {seq}/poses.txt                  12 floats per line, camera-frame 3x4 pose
//! {seq}/calib.txt                  line `Tr:` holds the 3x4 camera->LiDAR extrinsic
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use thiserror::Error;

use crate::{CLASS_MOVABLE, CLASS_MOVING, CLASS_STATIC, CLASS_UNLABELED};

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed scan {path} at byte offset {offset}: {reason}")]
    MalformedScan {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("malformed label file {path}: {reason}")]
    MalformedLabel { path: PathBuf, reason: String },
    #[error("label count mismatch in {path}: expected {expected}, found {found}")]
    LabelCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("malformed pose line {line} in {path}: {reason}")]
    MalformedPoseLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("malformed calibration {path}: {reason}")]
    MalformedCalib { path: PathBuf, reason: String },
    #[error("malformed class map line {line}: {reason}")]
    MalformedClassMap { line: usize, reason: String },
    #[error("transform is not rigid: {0}")]
    NonRigid(String),
}

impl KittiError {
    fn io(path: &Path, source: io::Error) -> Self {
        KittiError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KittiError>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }
}

/// One LiDAR sweep. Coordinates are held in `f64`; on disk they are `f32`,
/// so values read from a scan file survive a write/read cycle bit-exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: u64) -> Self {
        Self { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Raw per-point labels: low 16 bits semantic id, high 16 bits instance id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelArray {
    pub raw: Vec<u32>,
}

impl LabelArray {
    pub fn new(raw: Vec<u32>) -> Self {
        Self { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn semantic(&self, i: usize) -> u16 {
        semantic_id(self.raw[i])
    }

    pub fn instance(&self, i: usize) -> u16 {
        instance_id(self.raw[i])
    }
}

#[inline]
pub fn semantic_id(raw: u32) -> u16 {
    (raw & 0xFFFF) as u16
}

#[inline]
pub fn instance_id(raw: u32) -> u16 {
    (raw >> 16) as u16
}

/// Total map from 16-bit semantic id to one of the four output classes.
#[derive(Clone, PartialEq, Eq)]
pub struct ClassMap {
    table: Vec<u8>,
}

impl std::fmt::Debug for ClassMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut counts = [0usize; 4];
        for &c in &self.table {
            counts[c as usize] += 1;
        }
        f.debug_struct("ClassMap").field("class_counts", &counts).finish()
    }
}

pub const MOVABLE_SEMANTIC_IDS: [u16; 9] = [10, 11, 13, 15, 18, 20, 30, 31, 32];

impl Default for ClassMap {
    /// SemanticKITTI-MOS convention: 252..=259 moving, vehicle/person ids
    /// movable, 0 and 1 unlabeled, everything else static.
    fn default() -> Self {
        let mut table = vec![CLASS_STATIC; 1 << 16];
        table[0] = CLASS_UNLABELED;
        table[1] = CLASS_UNLABELED;
        for id in MOVABLE_SEMANTIC_IDS {
            table[id as usize] = CLASS_MOVABLE;
        }
        table[252..=259].fill(CLASS_MOVING);
        Self { table }
    }
}

impl ClassMap {
    /// Every id maps to `default_class` except the listed overrides.
    pub fn from_entries(default_class: u8, entries: &[(u16, u8)]) -> Self {
        assert!(default_class < 4);
        let mut table = vec![default_class; 1 << 16];
        for &(id, class) in entries {
            assert!(class < 4);
            table[id as usize] = class;
        }
        Self { table }
    }

    /// Parses a class map text: `default=<class>` once, then `<id>=<class>`
    /// or `<lo>-<hi>=<class>` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut default_class = None;
        let mut entries: Vec<(u16, u16, u8)> = Vec::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| KittiError::MalformedClassMap {
                line: line_no,
                reason: reason.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let class: u8 = value
                .trim()
                .parse()
                .ok()
                .filter(|c| *c < 4)
                .ok_or_else(|| err("class must be 0..=3"))?;
            let key = key.trim();
            if key == "default" {
                default_class = Some(class);
            } else if let Some((lo, hi)) = key.split_once('-') {
                let lo: u16 = lo.trim().parse().map_err(|_| err("bad range start"))?;
                let hi: u16 = hi.trim().parse().map_err(|_| err("bad range end"))?;
                if lo > hi {
                    return Err(err("empty range"));
                }
                entries.push((lo, hi, class));
            } else {
                let id: u16 = key.parse().map_err(|_| err("bad semantic id"))?;
                entries.push((id, id, class));
            }
        }
        let mut table = vec![default_class.unwrap_or(CLASS_STATIC); 1 << 16];
        for (lo, hi, class) in entries {
            for id in lo..=hi {
                table[id as usize] = class;
            }
        }
        Ok(Self { table })
    }

    #[inline]
    pub fn class_of(&self, semantic: u16) -> u8 {
        self.table[semantic as usize]
    }
}

/// A rigid 4x4 transform, validated on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

const RIGID_TOL: f64 = 1e-6;

impl Pose {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(KittiError::NonRigid("non-finite entry".into()));
        }
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(KittiError::NonRigid(format!("bottom row {bottom:?}")));
        }
        let r = matrix.fixed_view::<3, 3>(0, 0);
        let gram = r.transpose() * r;
        let dev = (gram - nalgebra::Matrix3::identity()).abs().max();
        if dev > RIGID_TOL {
            return Err(KittiError::NonRigid(format!(
                "rotation block deviates from orthonormal by {dev:e}"
            )));
        }
        Ok(Self { matrix })
    }

    /// Builds from the 12 row-major entries of a 3x4 matrix.
    pub fn from_3x4(v: &[f64; 12]) -> Result<Self> {
        #[rustfmt::skip]
        let m = Matrix4::new(
            v[0], v[1], v[2], v[3],
            v[4], v[5], v[6], v[7],
            v[8], v[9], v[10], v[11],
            0.0, 0.0, 0.0, 1.0,
        );
        Self::new(m)
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        let mut m = Matrix4::identity();
        m[(0, 3)] = x;
        m[(1, 3)] = y;
        m[(2, 3)] = z;
        Self { matrix: m }
    }

    /// Rotation by `angle` radians about +z.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut m = Matrix4::identity();
        m[(0, 0)] = c;
        m[(0, 1)] = -s;
        m[(1, 0)] = s;
        m[(1, 1)] = c;
        Self { matrix: m }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    /// Closed-form rigid inverse `[Rᵀ, -Rᵀt]`.
    pub fn inverse(&self) -> Self {
        let r = self.matrix.fixed_view::<3, 3>(0, 0).transpose();
        let t = self.matrix.fixed_view::<3, 1>(0, 3);
        let nt = -(r * t);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&nt);
        Self { matrix: m }
    }

    /// `self · other`.
    pub fn compose(&self, other: &Pose) -> Self {
        let mut m = self.matrix * other.matrix;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Self { matrix: m }
    }

    pub fn to_3x4(&self) -> [f64; 12] {
        let mut out = [0.0f64; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }
}

/// Camera-to-LiDAR extrinsic (`Tr:` in calib.txt).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub tr: Pose,
}

impl Calibration {
    pub fn identity() -> Self {
        Self {
            tr: Pose::identity(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| KittiError::io(path, e))
}

fn frame_id_from_path(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub fn parse_scan(bytes: &[u8], frame_id: u64, path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(KittiError::MalformedScan {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
            reason: format!("size {} is not a multiple of 16 bytes", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let mut vals = [0f32; 4];
        for (k, v) in vals.iter_mut().enumerate() {
            let b = &chunk[k * 4..k * 4 + 4];
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(KittiError::MalformedScan {
                    path: path.to_path_buf(),
                    offset: (i * 16 + k * 4) as u64,
                    reason: format!("non-finite value {v} in point {i}"),
                });
            }
        }
        points.push(Point::new(
            vals[0] as f64,
            vals[1] as f64,
            vals[2] as f64,
            vals[3],
        ));
    }
    Ok(PointCloud::new(points, frame_id))
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    parse_scan(&bytes, frame_id_from_path(path), path)
}

pub fn scan_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
        out.extend_from_slice(&(p.z as f32).to_le_bytes());
        out.extend_from_slice(&p.intensity.to_le_bytes());
    }
    out
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scan_to_bytes(cloud)).map_err(|e| KittiError::io(path, e))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<LabelArray> {
    if !bytes.len().is_multiple_of(4) {
        return Err(KittiError::MalformedLabel {
            path: path.to_path_buf(),
            reason: format!("size {} is not a multiple of 4 bytes", bytes.len()),
        });
    }
    let raw = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(LabelArray { raw })
}

pub fn read_labels(path: impl AsRef<Path>, expected_count: usize) -> Result<LabelArray> {
    let path = path.as_ref();
    let labels = parse_labels(&read_bytes(path)?, path)?;
    if labels.len() != expected_count {
        return Err(KittiError::LabelCountMismatch {
            path: path.to_path_buf(),
            expected: expected_count,
            found: labels.len(),
        });
    }
    Ok(labels)
}

pub fn labels_to_bytes(labels: &LabelArray) -> Vec<u8> {
    labels.raw.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_labels(labels: &LabelArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_bytes(labels)).map_err(|e| KittiError::io(path, e))
}

pub fn remap_labels(labels: &LabelArray, map: &ClassMap) -> Vec<u8> {
    labels
        .raw
        .iter()
        .map(|&r| map.class_of(semantic_id(r)))
        .collect()
}

fn parse_twelve(tokens: &[&str]) -> std::result::Result<[f64; 12], String> {
    if tokens.len() != 12 {
        return Err(format!("expected 12 values, found {}", tokens.len()));
    }
    let mut out = [0.0f64; 12];
    for (o, t) in out.iter_mut().zip(tokens) {
        *o = t.parse().map_err(|_| format!("cannot parse {t:?}"))?;
        if !o.is_finite() {
            return Err(format!("non-finite value {t:?}"));
        }
    }
    Ok(out)
}

pub fn parse_calib(text: &str, path: &Path) -> Result<Calibration> {
    let err = |reason: String| KittiError::MalformedCalib {
        path: path.to_path_buf(),
        reason,
    };
    for line in text.lines() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            let tokens: Vec<&str> = rest.split_whitespace().collect();
            let vals = parse_twelve(&tokens).map_err(err)?;
            let tr = Pose::from_3x4(&vals).map_err(|e| err(e.to_string()))?;
            return Ok(Calibration { tr });
        }
    }
    Err(err("no `Tr:` line".into()))
}

pub fn read_calib(path: impl AsRef<Path>) -> Result<Calibration> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KittiError::io(path, e))?;
    parse_calib(&text, path)
}

pub fn write_calib(calib: &Calibration, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format!("Tr: {}\n", join_floats(&calib.tr.to_3x4()));
    fs::write(path, text).map_err(|e| KittiError::io(path, e))
}

/// Parses camera-frame poses and converts each to the LiDAR frame with
/// `T_velo = Tr⁻¹ · T_cam · Tr`. Blank lines are skipped.
pub fn parse_poses(text: &str, calib: &Calibration, path: &Path) -> Result<Vec<Pose>> {
    let tr_inv = calib.tr.inverse();
    let mut poses = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let err = |reason: String| KittiError::MalformedPoseLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let vals = parse_twelve(&tokens).map_err(err)?;
        let cam = Pose::from_3x4(&vals).map_err(|e| err(e.to_string()))?;
        poses.push(tr_inv.compose(&cam).compose(&calib.tr));
    }
    Ok(poses)
}

pub fn read_poses(poses_path: impl AsRef<Path>, calib: &Calibration) -> Result<Vec<Pose>> {
    let path = poses_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KittiError::io(path, e))?;
    parse_poses(&text, calib, path)
}

/// Writes LiDAR-frame poses back in the camera convention
/// (`T_cam = Tr · T_velo · Tr⁻¹`). Values print in shortest round-trip form.
pub fn poses_to_text(poses: &[Pose], calib: &Calibration) -> String {
    let tr_inv = calib.tr.inverse();
    let mut text = String::new();
    for p in poses {
        let cam = calib.tr.compose(p).compose(&tr_inv);
        text.push_str(&join_floats(&cam.to_3x4()));
        text.push('\n');
    }
    text
}

pub fn write_poses(poses: &[Pose], calib: &Calibration, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, poses_to_text(poses, calib)).map_err(|e| KittiError::io(path, e))
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Paths inside one sequence directory.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub root: PathBuf,
}

impl SequenceDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn velodyne_dir(&self) -> PathBuf {
        self.root.join("velodyne")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn scan_path(&self, frame: u64) -> PathBuf {
        self.velodyne_dir().join(format!("{frame:06}.bin"))
    }

    pub fn label_path(&self, frame: u64) -> PathBuf {
        self.labels_dir().join(format!("{frame:06}.label"))
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    pub fn calib_path(&self) -> PathBuf {
        self.root.join("calib.txt")
    }

    /// Frame ids present under `velodyne/`, ascending.
    pub fn frame_ids(&self) -> Result<Vec<u64>> {
        let dir = self.velodyne_dir();
        let entries = fs::read_dir(&dir).map_err(|e| KittiError::io(&dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| KittiError::io(&dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            if let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok())
            {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

/// A fully loaded labelled sequence in the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSequence {
    pub frames: Vec<PointCloud>,
    pub labels: Vec<LabelArray>,
    pub poses: Vec<Pose>,
    pub calib: Calibration,
}

pub fn load_sequence(dir: &SequenceDir) -> Result<LoadedSequence> {
    let calib = read_calib(dir.calib_path())?;
    let poses = read_poses(dir.poses_path(), &calib)?;
    let ids = dir.frame_ids()?;
    let mut frames = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for &id in &ids {
        let cloud = read_scan(dir.scan_path(id))?;
        let lab = read_labels(dir.label_path(id), cloud.len())?;
        frames.push(cloud);
        labels.push(lab);
    }
    if poses.len() < frames.len() {
        return Err(KittiError::MalformedPoseLine {
            path: dir.poses_path(),
            line: poses.len() + 1,
            reason: format!("{} poses for {} scans", poses.len(), frames.len()),
        });
    }
    Ok(LoadedSequence {
        frames,
        labels,
        poses,
        calib,
    })
}

pub fn write_sequence(dir: &SequenceDir, seq: &LoadedSequence) -> Result<()> {
    for d in [dir.velodyne_dir(), dir.labels_dir()] {
        fs::create_dir_all(&d).map_err(|e| KittiError::io(&d, e))?;
    }
    for (cloud, labels) in seq.frames.iter().zip(&seq.labels) {
        write_scan(cloud, dir.scan_path(cloud.frame_id))?;
        write_labels(labels, dir.label_path(cloud.frame_id))?;
    }
    write_calib(&seq.calib, dir.calib_path())?;
    write_poses(&seq.poses, &seq.calib, dir.poses_path())
}
