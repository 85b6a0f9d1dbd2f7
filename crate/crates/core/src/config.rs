//! Flat `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown keys are rejected.
//! [`RunConfig::default_text`] prints every key with its default and a short
//! description.

use crate::bev::{BevConfig, BevGrid, GridMode};
use crate::losses::{DistillConfig, NonMovingTerms};
use crate::synthbench::SceneConfig;
use crate::train::TrainConfig;
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line > 0 {
            write!(f, "config line {}: {}", self.line, self.message)
        } else {
            write!(f, "config: {}", self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Synthetic teacher settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherConfig {
    pub kappa: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kappa: 10.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

/// Throughput benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub frames: usize,
    pub points: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            points: 130_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bev: BevConfig,
    pub train: TrainConfig,
    /// Fraction of projected frames held out for per-epoch evaluation.
    pub holdout: f64,
    pub teacher: TeacherConfig,
    pub scene: SceneConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bev: BevConfig::default(),
            train: TrainConfig::default(),
            holdout: 0.25,
            teacher: TeacherConfig::default(),
            scene: SceneConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// `(key, description)` for every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("grid.mode", "polar | cartesian"),
    ("grid.n_radial", "radial bins (rows)"),
    ("grid.n_angular", "angular bins (columns)"),
    ("grid.r_max", "projection range, metres"),
    ("grid.z_min", "lower height bound, exclusive"),
    ("grid.z_max", "upper height bound, exclusive"),
    ("bev.window", "frames per motion tensor"),
    ("bev.split", "frames in the recent window"),
    ("bev.aggregate", "window pooling: max | mean | latest"),
    ("bev.per_frame_residuals", "one residual channel per frame pair"),
    ("bev.appearance_channels", "append per-frame height images to the input"),
    ("distill.temperature", "softmax temperature; losses are scaled by its square"),
    ("distill.beta", "NCKD weight"),
    ("distill.gamma", "WDCD weight in the total loss; 0 disables distillation"),
    ("distill.weight_floor", "class-share floor: auto (1 / valid cells) or a number"),
    ("distill.prob_floor", "probability floor inside the logarithms"),
    ("distill.non_moving", "terms for non-moving cells: nckd | tckd_nckd | tckd | none"),
    ("teacher.kappa", "synthetic teacher confidence"),
    ("teacher.sigma", "synthetic teacher noise"),
    ("teacher.seed", "synthetic teacher seed"),
    ("model.arch", "student | teacher | descriptor such as in=8;c16;c32s2;d2;c16;h4"),
    ("optim.lr", "initial learning rate"),
    ("optim.momentum", "SGD momentum"),
    ("optim.weight_decay", "L2 weight decay"),
    ("optim.epoch_decay", "learning-rate factor applied after each epoch"),
    ("train.epochs", "epochs (150 at full scale)"),
    ("train.batch_size", "frames per optimiser step"),
    ("train.seed", "initialisation and shuffling seed"),
    ("train.wce_weights", "cross-entropy weight per class 0,1,2,3"),
    ("train.lovasz_classes", "classes averaged by Lovász-Softmax"),
    ("train.holdout", "fraction of frames held out for per-epoch IoU"),
    ("scene.n_frames", "frames per synthetic sequence"),
    ("scene.n_moving", "moving discs"),
    ("scene.n_static_movable", "parked (movable, static) discs"),
    ("scene.n_static", "background ground points"),
    ("scene.radius_min", "disc radius range, metres"),
    ("scene.radius_max", ""),
    ("scene.speed_min", "moving disc speed range, metres per frame"),
    ("scene.speed_max", ""),
    ("scene.heading", "moving disc heading in radians, or random"),
    ("scene.points_per_disc", "points per disc"),
    ("scene.ego_vx", "sensor velocity, metres per frame"),
    ("scene.ego_vy", ""),
    ("scene.arena_radius", "scene radius, metres; must not exceed grid.r_max"),
    ("scene.min_range", "minimum disc distance from the origin"),
    ("scene.ground_z_min", "background height band"),
    ("scene.ground_z_max", ""),
    ("scene.object_z_min", "disc height band"),
    ("scene.object_z_max", ""),
    ("scene.seed", "generator seed"),
    ("bench.frames", "frames timed by the throughput benchmark"),
    ("bench.points", "points per synthetic benchmark frame"),
];

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| format!("bad list element {t:?}")))
        .collect()
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.bev.grid;
        let d = &self.train.distill;
        let s = &self.scene;
        let t = &self.train;
        Some(match key {
            "grid.mode" => match g.mode {
                GridMode::Polar => "polar".into(),
                GridMode::Cartesian => "cartesian".into(),
            },
            "grid.n_radial" => g.n_radial.to_string(),
            "grid.n_angular" => g.n_angular.to_string(),
            "grid.r_max" => g.r_max.to_string(),
            "grid.z_min" => g.z_min.to_string(),
            "grid.z_max" => g.z_max.to_string(),
            "bev.window" => self.bev.window.to_string(),
            "bev.split" => self.bev.split.to_string(),
            "bev.aggregate" => self.bev.aggregate.to_string(),
            "bev.per_frame_residuals" => self.bev.per_frame_residuals.to_string(),
            "bev.appearance_channels" => self.bev.appearance_channels.to_string(),
            "distill.temperature" => d.temperature.to_string(),
            "distill.beta" => d.beta.to_string(),
            "distill.gamma" => d.gamma.to_string(),
            "distill.weight_floor" => d.weight_floor.map_or("auto".into(), |w| w.to_string()),
            "distill.prob_floor" => d.prob_floor.to_string(),
            "distill.non_moving" => d.non_moving.to_string(),
            "teacher.kappa" => self.teacher.kappa.to_string(),
            "teacher.sigma" => self.teacher.sigma.to_string(),
            "teacher.seed" => self.teacher.seed.to_string(),
            "model.arch" => t.arch.clone(),
            "optim.lr" => t.lr.to_string(),
            "optim.momentum" => t.momentum.to_string(),
            "optim.weight_decay" => t.weight_decay.to_string(),
            "optim.epoch_decay" => t.epoch_decay.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.wce_weights" => list(&t.wce_weights),
            "train.lovasz_classes" => list(&t.lovasz_classes),
            "train.holdout" => self.holdout.to_string(),
            "scene.n_frames" => s.n_frames.to_string(),
            "scene.n_moving" => s.n_moving.to_string(),
            "scene.n_static_movable" => s.n_static_movable.to_string(),
            "scene.n_static" => s.n_static.to_string(),
            "scene.radius_min" => s.radius.0.to_string(),
            "scene.radius_max" => s.radius.1.to_string(),
            "scene.speed_min" => s.speed.0.to_string(),
            "scene.speed_max" => s.speed.1.to_string(),
            "scene.heading" => s.heading.map_or("random".into(), |h| h.to_string()),
            "scene.points_per_disc" => s.points_per_disc.to_string(),
            "scene.ego_vx" => s.ego_velocity.0.to_string(),
            "scene.ego_vy" => s.ego_velocity.1.to_string(),
            "scene.arena_radius" => s.arena_radius.to_string(),
            "scene.min_range" => s.min_range.to_string(),
            "scene.ground_z_min" => s.ground_z.0.to_string(),
            "scene.ground_z_max" => s.ground_z.1.to_string(),
            "scene.object_z_min" => s.object_z.0.to_string(),
            "scene.object_z_max" => s.object_z.1.to_string(),
            "scene.seed" => s.seed.to_string(),
            "bench.frames" => self.bench.frames.to_string(),
            "bench.points" => self.bench.points.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let g = &mut self.bev.grid;
        let s = &mut self.scene;
        let t = &mut self.train;
        match key {
            "grid.mode" => {
                g.mode = match v {
                    "polar" => GridMode::Polar,
                    "cartesian" => GridMode::Cartesian,
                    _ => return Err(format!("unknown grid mode {v:?}")),
                }
            }
            "grid.n_radial" => g.n_radial = num(v)?,
            "grid.n_angular" => g.n_angular = num(v)?,
            "grid.r_max" => g.r_max = num(v)?,
            "grid.z_min" => g.z_min = num(v)?,
            "grid.z_max" => g.z_max = num(v)?,
            "bev.window" => self.bev.window = num(v)?,
            "bev.split" => self.bev.split = num(v)?,
            "bev.aggregate" => self.bev.aggregate = v.parse()?,
            "bev.per_frame_residuals" => self.bev.per_frame_residuals = boolean(v)?,
            "bev.appearance_channels" => self.bev.appearance_channels = boolean(v)?,
            "distill.temperature" => t.distill.temperature = num(v)?,
            "distill.beta" => t.distill.beta = num(v)?,
            "distill.gamma" => t.distill.gamma = num(v)?,
            "distill.weight_floor" => t.distill.weight_floor = if v == "auto" { None } else { Some(num(v)?) },
            "distill.prob_floor" => t.distill.prob_floor = num(v)?,
            "distill.non_moving" => t.distill.non_moving = v.parse::<NonMovingTerms>()?,
            "teacher.kappa" => self.teacher.kappa = num(v)?,
            "teacher.sigma" => self.teacher.sigma = num(v)?,
            "teacher.seed" => self.teacher.seed = num(v)?,
            "model.arch" => t.arch = v.to_string(),
            "optim.lr" => t.lr = num(v)?,
            "optim.momentum" => t.momentum = num(v)?,
            "optim.weight_decay" => t.weight_decay = num(v)?,
            "optim.epoch_decay" => t.epoch_decay = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.wce_weights" => {
                let w: Vec<f64> = parse_list(v)?;
                t.wce_weights = w
                    .try_into()
                    .map_err(|_| format!("expected {NUM_CLASSES} weights"))?;
            }
            "train.lovasz_classes" => t.lovasz_classes = parse_list(v)?,
            "train.holdout" => self.holdout = num(v)?,
            "scene.n_frames" => s.n_frames = num(v)?,
            "scene.n_moving" => s.n_moving = num(v)?,
            "scene.n_static_movable" => s.n_static_movable = num(v)?,
            "scene.n_static" => s.n_static = num(v)?,
            "scene.radius_min" => s.radius.0 = num(v)?,
            "scene.radius_max" => s.radius.1 = num(v)?,
            "scene.speed_min" => s.speed.0 = num(v)?,
            "scene.speed_max" => s.speed.1 = num(v)?,
            "scene.heading" => s.heading = if v == "random" { None } else { Some(num(v)?) },
            "scene.points_per_disc" => s.points_per_disc = num(v)?,
            "scene.ego_vx" => s.ego_velocity.0 = num(v)?,
            "scene.ego_vy" => s.ego_velocity.1 = num(v)?,
            "scene.arena_radius" => s.arena_radius = num(v)?,
            "scene.min_range" => s.min_range = num(v)?,
            "scene.ground_z_min" => s.ground_z.0 = num(v)?,
            "scene.ground_z_max" => s.ground_z.1 = num(v)?,
            "scene.object_z_min" => s.object_z.0 = num(v)?,
            "scene.object_z_max" => s.object_z.1 = num(v)?,
            "scene.seed" => s.seed = num(v)?,
            "bench.frames" => self.bench.frames = num(v)?,
            "bench.points" => self.bench.points = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|message| ConfigError { line: 0, message })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.bev.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(format!("train.holdout {} must lie in [0, 1)", self.holdout));
        }
        if !(self.teacher.kappa > 0.0) || !(self.teacher.sigma >= 0.0) {
            return Err("teacher.kappa must be > 0 and teacher.sigma >= 0".into());
        }
        self.scene.validate_for_range(self.bev.grid.r_max).map_err(|e| e.to_string())?;
        if self.bench.frames == 0 {
            return Err("bench.frames must be positive".into());
        }
        Ok(())
    }

    /// Every key with its current value, preceded by its description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            if !doc.is_empty() {
                out.push_str(&format!("# {doc}\n"));
            }
            out.push_str(&format!("{k}={}\n", self.get(k).expect("listed key")));
        }
        out
    }

    pub fn default_text() -> String {
        Self::default().to_text()
    }

    /// The grid this config projects onto.
    pub fn grid(&self) -> BevGrid {
        self.bev.grid
    }

    pub fn distill(&self) -> DistillConfig {
        self.train.distill
    }
}
