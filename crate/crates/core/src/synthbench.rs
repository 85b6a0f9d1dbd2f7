//! Seeded synthetic LiDAR sequences: flat discs of points on a scattered
//! ground plane, some of them moving, seen from a translating sensor.
//!
//! Every disc keeps the same point offsets in every frame, so after alignment
//! static centroids coincide and moving centroids advance by exactly
//! `velocity · Δt`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kitti_io::{Calibration, LabelArray, LoadedSequence, Point, PointCloud, Pose};
use crate::{CLASS_MOVABLE, CLASS_MOVING, CLASS_STATIC};

/// SemanticKITTI ids written for each class so the default class map
/// recovers them.
pub const SEMANTIC_MOVING: u16 = 252;
pub const SEMANTIC_MOVABLE: u16 = 10;
pub const SEMANTIC_STATIC: u16 = 40;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub n_moving: usize,
    pub n_static_movable: usize,
    /// Background ground points.
    pub n_static: usize,
    /// Disc radius range in metres.
    pub radius: (f64, f64),
    /// Moving-disc speed range in metres per frame.
    pub speed: (f64, f64),
    /// Fixed heading (radians) for every moving disc; random when `None`.
    pub heading: Option<f64>,
    pub points_per_disc: usize,
    /// Sensor translation per frame, world frame.
    pub ego_velocity: (f64, f64),
    pub arena_radius: f64,
    /// Keep discs at least this far from the world origin.
    pub min_range: f64,
    pub ground_z: (f64, f64),
    pub object_z: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 8,
            n_moving: 2,
            n_static_movable: 3,
            n_static: 2000,
            radius: (1.5, 2.5),
            speed: (0.5, 1.0),
            heading: None,
            points_per_disc: 50,
            ego_velocity: (0.5, 0.0),
            arena_radius: 40.0,
            min_range: 3.0,
            ground_z: (-1.9, -1.7),
            object_z: (-1.6, 0.2),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        let band_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && -4.0 < lo && lo <= hi && hi < 2.0;
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1 && self.radius.1.is_finite()) {
            return bad("radius range must satisfy 0 < lo <= hi");
        }
        if !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1 && self.speed.1.is_finite()) {
            return bad("speed range must satisfy 0 <= lo <= hi");
        }
        if !(self.arena_radius > 0.0 && self.arena_radius.is_finite()) {
            return bad("arena radius must be positive");
        }
        if !(self.min_range >= 0.0 && self.min_range < self.arena_radius) {
            return bad("min_range must lie in [0, arena radius)");
        }
        if self.points_per_disc == 0 && self.n_moving + self.n_static_movable > 0 {
            return bad("points_per_disc must be positive");
        }
        if !band_ok(self.ground_z) || !band_ok(self.object_z) {
            return bad("z bands must lie inside (-4, 2)");
        }
        if !(self.ego_velocity.0.is_finite() && self.ego_velocity.1.is_finite()) {
            return bad("ego velocity must be finite");
        }
        if self.heading.is_some_and(|h| !h.is_finite()) {
            return bad("heading must be finite");
        }
        Ok(())
    }

    /// The arena must fit inside the projection range.
    pub fn validate_for_range(&self, r_max: f64) -> Result<(), SynthError> {
        self.validate()?;
        if self.arena_radius > r_max {
            return Err(SynthError::Config(format!(
                "arena radius {} exceeds grid range {r_max}",
                self.arena_radius
            )));
        }
        Ok(())
    }
}

/// Ground truth of one disc.
#[derive(Debug, Clone, PartialEq)]
pub struct Disc {
    pub class: u8,
    pub radius: f64,
    /// World-frame centre at frame 0.
    pub center: [f64; 2],
    /// World-frame velocity, metres per frame.
    pub velocity: [f64; 2],
    offsets: Vec<[f64; 3]>,
}

impl Disc {
    pub fn center_at(&self, frame: usize) -> [f64; 2] {
        let t = frame as f64;
        [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t]
    }

    /// Mean of the disc's own offsets; the point centroid is `center_at + this`.
    pub fn offset_mean(&self) -> [f64; 3] {
        let n = self.offsets.len() as f64;
        let mut m = [0.0; 3];
        for o in &self.offsets {
            for k in 0..3 {
                m[k] += o[k];
            }
        }
        m.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSequence {
    /// Sensor-frame clouds.
    pub frames: Vec<PointCloud>,
    /// Per-point class ids.
    pub classes: Vec<Vec<u8>>,
    /// Sensor-to-world poses.
    pub poses: Vec<Pose>,
    pub discs: Vec<Disc>,
    /// Point index range of each disc, identical in every frame.
    pub disc_ranges: Vec<std::ops::Range<usize>>,
}

impl SynthSequence {
    pub fn raw_labels(&self) -> Vec<LabelArray> {
        self.classes
            .iter()
            .map(|cs| {
                LabelArray::new(
                    cs.iter()
                        .map(|&c| match c {
                            CLASS_MOVING => SEMANTIC_MOVING as u32,
                            CLASS_MOVABLE => SEMANTIC_MOVABLE as u32,
                            _ => SEMANTIC_STATIC as u32,
                        })
                        .collect(),
                )
            })
            .collect()
    }

    pub fn to_loaded(&self) -> LoadedSequence {
        LoadedSequence {
            frames: self.frames.clone(),
            labels: self.raw_labels(),
            poses: self.poses.clone(),
            calib: Calibration::identity(),
        }
    }
}

fn uniform_in_disc(rng: &mut ChaCha8Rng, radius: f64) -> [f64; 2] {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(-PI..PI);
    [r * a.cos(), r * a.sin()]
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Closest approach of two linearly moving centres over frames `0..n`.
fn min_distance(a: &Disc, b: &Disc, n_frames: usize) -> f64 {
    (0..n_frames.max(1))
        .map(|k| {
            let (p, q) = (a.center_at(k), b.center_at(k));
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .fold(f64::INFINITY, f64::min)
}

fn inside_arena(d: &Disc, cfg: &SceneConfig) -> bool {
    (0..cfg.n_frames.max(1)).all(|k| {
        let c = d.center_at(k);
        let r = c[0].hypot(c[1]);
        r + d.radius <= cfg.arena_radius && r - d.radius >= cfg.min_range
    })
}

pub fn gen_sequence(cfg: &SceneConfig) -> Result<SynthSequence, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut discs: Vec<Disc> = Vec::new();
    let kinds = std::iter::repeat_n(CLASS_MOVING, cfg.n_moving)
        .chain(std::iter::repeat_n(CLASS_MOVABLE, cfg.n_static_movable));
    for class in kinds {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let radius = sample(&mut rng, cfg.radius);
            let center = uniform_in_disc(&mut rng, cfg.arena_radius);
            let velocity = if class == CLASS_MOVING {
                let s = sample(&mut rng, cfg.speed);
                let h = cfg.heading.unwrap_or_else(|| rng.gen_range(-PI..PI));
                [s * h.cos(), s * h.sin()]
            } else {
                [0.0, 0.0]
            };
            let d = Disc {
                class,
                radius,
                center,
                velocity,
                offsets: Vec::new(),
            };
            let clear = discs
                .iter()
                .all(|o| min_distance(o, &d, cfg.n_frames) > o.radius + d.radius + 0.5);
            if inside_arena(&d, cfg) && clear {
                placed = Some(d);
                break;
            }
        }
        let mut d = placed.ok_or_else(|| {
            SynthError::Config(format!("could not place {} discs without overlap", cfg.n_moving + cfg.n_static_movable))
        })?;
        d.offsets = (0..cfg.points_per_disc)
            .map(|_| {
                let [x, y] = uniform_in_disc(&mut rng, d.radius);
                [x, y, sample(&mut rng, cfg.object_z)]
            })
            .collect();
        discs.push(d);
    }

    let background: Vec<[f64; 3]> = (0..cfg.n_static)
        .map(|_| {
            let [x, y] = uniform_in_disc(&mut rng, cfg.arena_radius);
            [x, y, sample(&mut rng, cfg.ground_z)]
        })
        .collect();
    let intensities: Vec<f32> = (0..cfg.n_static + discs.len() * cfg.points_per_disc)
        .map(|_| rng.gen::<f32>())
        .collect();

    let mut disc_ranges = Vec::with_capacity(discs.len());
    let mut start = 0;
    for _ in &discs {
        disc_ranges.push(start..start + cfg.points_per_disc);
        start += cfg.points_per_disc;
    }

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut classes = Vec::with_capacity(cfg.n_frames);
    let mut poses = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let (ex, ey) = (cfg.ego_velocity.0 * k as f64, cfg.ego_velocity.1 * k as f64);
        poses.push(Pose::translation(ex, ey, 0.0));
        let mut pts = Vec::with_capacity(intensities.len());
        let mut cls = Vec::with_capacity(intensities.len());
        for d in &discs {
            let c = d.center_at(k);
            for o in &d.offsets {
                pts.push([c[0] + o[0] - ex, c[1] + o[1] - ey, o[2]]);
                cls.push(d.class);
            }
        }
        for b in &background {
            pts.push([b[0] - ex, b[1] - ey, b[2]]);
            cls.push(CLASS_STATIC);
        }
        let points = pts
            .iter()
            .zip(&intensities)
            .map(|(p, &i)| Point::new(p[0], p[1], p[2], i))
            .collect();
        frames.push(PointCloud::new(points, k as u64));
        classes.push(cls);
    }

    Ok(SynthSequence {
        frames,
        classes,
        poses,
        discs,
        disc_ranges,
    })
}
