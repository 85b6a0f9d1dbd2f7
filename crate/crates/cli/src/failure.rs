use std::fmt;

use kdmos_core::bev::BevError;
use kdmos_core::config::ConfigError;
use kdmos_core::kitti_io::KittiError;
use kdmos_core::losses::LossError;
use kdmos_core::nnet::NnetError;
use kdmos_core::synthbench::SynthError;
use kdmos_core::teacher_bridge::TeacherError;
use kdmos_core::train::TrainError;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, usage or I/O (exit 1).
    Config(String),
    /// Malformed input data (exit 2).
    Parse(String),
    /// Non-finite values or a failed verification (exit 3).
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Parse(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Parse(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

pub fn io_failure(what: impl fmt::Display, e: std::io::Error) -> Failure {
    Failure::Config(format!("{what}: {e}"))
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<KittiError> for Failure {
    fn from(e: KittiError) -> Self {
        match e {
            KittiError::Io { .. } => Failure::Config(e.to_string()),
            _ => Failure::Parse(e.to_string()),
        }
    }
}

impl From<BevError> for Failure {
    fn from(e: BevError) -> Self {
        match e {
            BevError::InvalidGrid(_) | BevError::Io(_) => Failure::Config(e.to_string()),
            _ => Failure::Parse(e.to_string()),
        }
    }
}

impl From<NnetError> for Failure {
    fn from(e: NnetError) -> Self {
        match e {
            NnetError::Format(_) => Failure::Parse(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<TeacherError> for Failure {
    fn from(e: TeacherError) -> Self {
        match e {
            TeacherError::Format { .. } => Failure::Parse(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Config(m),
            TrainError::Data(e) => e.into(),
            TrainError::Bev(e) => e.into(),
            TrainError::Net(e) => e.into(),
            TrainError::Loss(e) => e.into(),
            TrainError::Teacher(e) => e.into(),
            TrainError::Synth(e) => e.into(),
            e @ TrainError::NumericFailure { .. } => Failure::Numeric(e.to_string()),
        }
    }
}
