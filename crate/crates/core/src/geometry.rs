//! Rigid transforms and alignment of past scans into the current viewpoint.

use rayon::prelude::*;
use thiserror::Error;

use crate::kitti_io::{Point, PointCloud, Pose};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("index {index} out of range for {len} frames")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{frames} frames but {poses} poses")]
    LengthMismatch { frames: usize, poses: usize },
}

/// Past frames expressed in the current frame, ordered by time step
/// (0 = current, increasing into the past).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignedSequence {
    pub frames: Vec<(PointCloud, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatioTemporalPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub t: u32,
}

#[inline]
pub fn transform_point(p: &Point, t: &Pose) -> Point {
    let m = t.matrix();
    let x = m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)];
    let y = m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)];
    let z = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)];
    let w = m[(3, 0)] * p.x + m[(3, 1)] * p.y + m[(3, 2)] * p.z + m[(3, 3)];
    Point::new(x / w, y / w, z / w, p.intensity)
}

pub fn transform_points(cloud: &PointCloud, t: &Pose) -> PointCloud {
    PointCloud::new(
        cloud.points.iter().map(|p| transform_point(p, t)).collect(),
        cloud.frame_id,
    )
}

/// Relative transform taking frame `k` coordinates into frame `current`.
pub fn relative_pose(poses: &[Pose], current: usize, k: usize) -> Pose {
    poses[current].inverse().compose(&poses[k])
}

/// Aligns frames `0..=current` to frame `current`. Frame `k` gets time step
/// `current - k`; the output is ordered by time step.
pub fn align_to_current(
    frames: &[PointCloud],
    poses: &[Pose],
    current: usize,
) -> Result<AlignedSequence, GeometryError> {
    align_window(frames, poses, current, current + 1)
}

/// As [`align_to_current`] but keeps only the `window` most recent frames.
pub fn align_window(
    frames: &[PointCloud],
    poses: &[Pose],
    current: usize,
    window: usize,
) -> Result<AlignedSequence, GeometryError> {
    if frames.len() != poses.len() {
        return Err(GeometryError::LengthMismatch {
            frames: frames.len(),
            poses: poses.len(),
        });
    }
    if current >= frames.len() {
        return Err(GeometryError::IndexOutOfRange {
            index: current,
            len: frames.len(),
        });
    }
    let oldest = (current + 1).saturating_sub(window);
    let aligned = (oldest..=current)
        .rev()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|k| {
            let step = (current - k) as u32;
            if k == current {
                (frames[k].clone(), step)
            } else {
                let rel = relative_pose(poses, current, k);
                (transform_points(&frames[k], &rel), step)
            }
        })
        .collect();
    Ok(AlignedSequence { frames: aligned })
}

/// Flattens an aligned sequence into time-tagged points, frame by frame in
/// sequence order, preserving point order within each frame.
pub fn build_4d_sequence(seq: &AlignedSequence) -> Vec<SpatioTemporalPoint> {
    let total = seq.frames.iter().map(|(c, _)| c.len()).sum();
    let mut out = Vec::with_capacity(total);
    for (cloud, t) in &seq.frames {
        out.extend(cloud.points.iter().map(|p| SpatioTemporalPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            t: *t,
        }));
    }
    out
}

pub fn centroid(points: impl IntoIterator<Item = Point>) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        sum[0] += p.x;
        sum[1] += p.y;
        sum[2] += p.z;
        n += 1;
    }
    (n > 0).then(|| [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}
