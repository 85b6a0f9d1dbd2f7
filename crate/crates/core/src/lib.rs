//! Moving-object segmentation on polar bird's-eye-view LiDAR grids, trained
//! with weighted decoupled class distillation from a frozen teacher.
//!
//! The crate is organised bottom-up:
//!
//! - [`kitti_io`]: SemanticKITTI scan, label, pose and calibration files.
//! - [`geometry`]: rigid transforms and alignment of past scans.
//! - [`bev`]: polar projection, height images, residual motion channels.
//! - [`losses`]: KD / TCKD / NCKD / DCD / WDCD, weighted CE and Lovász-Softmax,
//!   each with analytic gradients.
//! - [`nnet`]: a hand-differentiated BEV network with DySample upsampling,
//!   SGD and checkpoints. Generic over the scalar type.
//! - [`teacher_bridge`]: per-frame teacher logits files and a synthetic teacher.
//! - [`synthbench`]: a seeded generator of disc scenes with ground truth.
//! - [`eval`]: confusion matrices and IoU.
//! - [`train`]: the training / evaluation loop tying the above together.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bev;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod kitti_io;
pub mod losses;
pub mod nnet;
pub mod scalar;
pub mod synthbench;
pub mod teacher_bridge;
pub mod train;
pub mod verify;

pub use scalar::Scalar;

/// Number of output classes: unlabeled, static, movable, moving.
pub const NUM_CLASSES: usize = 4;

pub const CLASS_UNLABELED: u8 = 0;
pub const CLASS_STATIC: u8 = 1;
pub const CLASS_MOVABLE: u8 = 2;
pub const CLASS_MOVING: u8 = 3;

pub type Tensor3F32 = nnet::Tensor3<f32>;
pub type Tensor3F64 = nnet::Tensor3<f64>;
pub type Conv2dF32 = nnet::Conv2d<f32>;
pub type Conv2dF64 = nnet::Conv2d<f64>;
pub type DySampleF32 = nnet::DySample<f32>;
pub type DySampleF64 = nnet::DySample<f64>;
pub type StudentNetF32 = nnet::SegNet<f32>;
pub type StudentNetF64 = nnet::SegNet<f64>;
pub type SgdF32 = nnet::SgdState<f32>;
pub type SgdF64 = nnet::SgdState<f64>;
