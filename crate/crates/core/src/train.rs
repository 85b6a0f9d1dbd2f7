//! Datasets, the training loop, evaluation, and the distillation benchmark.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::bev::{back_project, project_sequence, BevConfig, BevError, BevGrid, CellIndexMap, CellLabelGrid, ProjectedFrame};
use crate::eval::{ConfusionMatrix, MetricsReport};
use crate::kitti_io::{remap_labels, ClassMap, KittiError, LoadedSequence};
use crate::losses::{total_loss, DistillConfig, LogitGrid, LossError, NonMovingTerms};
use crate::nnet::{ArchSpec, NnetError, SegNet, SgdState, Tensor3};
use crate::synthbench::{gen_sequence, SceneConfig, SynthError};
use crate::teacher_bridge::{logits_file_name, read_logits, synth_teacher, TeacherError};
use crate::{CLASS_UNLABELED, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] KittiError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Net(#[from] NnetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("non-finite loss at frame {frame_id}")]
    NumericFailure { frame_id: u64 },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where distillation targets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSource {
    None,
    /// Directory of `{frame:06}.logits` files.
    Logits(PathBuf),
    /// Label-conditioned synthetic teacher.
    Synth { kappa: f64, sigma: f64, seed: u64 },
}

impl std::str::FromStr for TeacherSource {
    type Err = String;

    /// `none`, `logits:DIR` or `synth:KAPPA,SIGMA`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(Self::None);
        }
        if let Some(dir) = s.strip_prefix("logits:") {
            return Ok(Self::Logits(PathBuf::from(dir)));
        }
        if let Some(rest) = s.strip_prefix("synth:") {
            let (k, sg) = rest.split_once(',').ok_or("expected synth:KAPPA,SIGMA")?;
            let kappa = k.trim().parse().map_err(|_| format!("bad kappa {k:?}"))?;
            let sigma = sg.trim().parse().map_err(|_| format!("bad sigma {sg:?}"))?;
            return Ok(Self::Synth { kappa, sigma, seed: 0 });
        }
        Err(format!("unknown teacher {s:?} (none | logits:DIR | synth:KAPPA,SIGMA)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch_decay: f64,
    pub wce_weights: [f64; NUM_CLASSES],
    pub lovasz_classes: Vec<u8>,
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: "student".into(),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            epoch_decay: 0.99,
            wce_weights: [0.0, 1.0, 1.0, 1.0],
            lovasz_classes: vec![1, 2, 3],
            distill: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(self.epoch_decay > 0.0) {
            return bad("momentum in [0,1), weight_decay >= 0, epoch_decay > 0".into());
        }
        if self.wce_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("wce weights must be finite and non-negative".into());
        }
        if self.lovasz_classes.iter().any(|c| *c as usize >= NUM_CLASSES) {
            return bad("lovasz classes must be < 4".into());
        }
        self.distill.validate().map_err(TrainError::Config)
    }

    fn optimizer(&self) -> SgdState<f32> {
        let mut s = SgdState::new(self.lr);
        s.momentum = self.momentum;
        s.weight_decay = self.weight_decay;
        s.epoch_decay = self.epoch_decay;
        s
    }
}

/// One training / evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame_id: u64,
    pub input: Tensor3<f32>,
    pub labels: CellLabelGrid,
    pub cells: CellIndexMap,
    pub point_classes: Vec<u8>,
    pub teacher: Option<LogitGrid>,
}

impl Sample {
    pub fn from_projected(p: ProjectedFrame) -> Result<Self> {
        let (c, data) = p.input_data();
        let input = Tensor3::<f32>::from_f64(c, p.labels.height, p.labels.width, &data)?;
        Ok(Self {
            frame_id: p.frame_id,
            input,
            labels: p.labels,
            cells: p.cells,
            point_classes: p.point_classes,
            teacher: None,
        })
    }
}

/// Per-point classes of a loaded sequence under the default class map.
pub fn sequence_classes(seq: &LoadedSequence) -> Vec<Vec<u8>> {
    let map = ClassMap::default();
    seq.labels.iter().map(|l| remap_labels(l, &map)).collect()
}

/// Projects a sequence into samples (frames with full history only).
pub fn samples_from_sequence(seq: &LoadedSequence, bev: &BevConfig) -> Result<Vec<Sample>> {
    let classes = sequence_classes(seq);
    project_sequence(&seq.frames, &seq.poses, &classes, bev)?
        .into_iter()
        .map(Sample::from_projected)
        .collect()
}

fn teacher_seed(base: u64, stream: u64, frame_id: u64) -> u64 {
    base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ frame_id.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Attaches teacher logits to every sample. `stream` distinguishes
/// sequences that share frame ids.
pub fn attach_teacher(samples: &mut [Sample], source: &TeacherSource, stream: u64) -> Result<()> {
    for s in samples.iter_mut() {
        s.teacher = match source {
            TeacherSource::None => None,
            TeacherSource::Synth { kappa, sigma, seed } => Some(synth_teacher(
                &s.labels,
                *kappa,
                *sigma,
                teacher_seed(*seed, stream, s.frame_id),
            )?),
            TeacherSource::Logits(dir) => {
                let mut g = read_logits(dir.join(logits_file_name(s.frame_id)))?;
                if g.height != s.labels.height || g.width != s.labels.width {
                    return Err(TrainError::Config(format!(
                        "teacher logits for frame {} are {}x{}, grid is {}x{}",
                        s.frame_id, g.height, g.width, s.labels.height, s.labels.width
                    )));
                }
                g.valid = s.labels.valid.clone();
                Some(g)
            }
        };
    }
    Ok(())
}

/// Network output (`4 × H × W`) as a cell-major logit grid.
pub fn logits_from_output(out: &Tensor3<f32>, valid: &[bool]) -> LogitGrid {
    let (h, w) = (out.h, out.w);
    let mut scores = vec![0.0; h * w * NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        for (cell, v) in out.channel(k).iter().enumerate() {
            scores[cell * NUM_CLASSES + k] = *v as f64;
        }
    }
    LogitGrid {
        height: h,
        width: w,
        scores,
        valid: valid.to_vec(),
    }
}

fn grad_to_tensor(grad: &[f64], h: usize, w: usize) -> Tensor3<f32> {
    let mut t = Tensor3::zeros(NUM_CLASSES, h, w);
    for cell in 0..h * w {
        for k in 0..NUM_CLASSES {
            t.data[k * h * w + cell] = grad[cell * NUM_CLASSES + k] as f32;
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wce: f64,
    pub lovasz: f64,
    pub wdcd: f64,
    /// Point-level moving IoU on the held-out samples, if any.
    pub holdout_moving_iou: Option<f64>,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} lr={:.6e} loss={:.6} wce={:.6} lovasz={:.6} wdcd={:.6}",
            self.epoch, self.lr, self.loss, self.wce, self.lovasz, self.wdcd
        )?;
        if let Some(iou) = self.holdout_moving_iou {
            write!(f, " holdout_moving_iou={iou:.6}")?;
        }
        Ok(())
    }
}

struct FrameOutcome {
    loss: f64,
    wce: f64,
    lovasz: f64,
    wdcd: f64,
    grads: Vec<Vec<f32>>,
}

fn frame_step(net: &SegNet<f32>, s: &Sample, cfg: &TrainConfig) -> Result<FrameOutcome> {
    if s.labels.n_valid() == 0 {
        return Ok(FrameOutcome {
            loss: 0.0,
            wce: 0.0,
            lovasz: 0.0,
            wdcd: 0.0,
            grads: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        });
    }
    let (out, trace) = net.forward_train(&s.input)?;
    let zs = logits_from_output(&out, &s.labels.valid);
    let teacher = s.teacher.as_ref();
    let lb = total_loss(&zs, teacher, &s.labels, &cfg.distill, &cfg.wce_weights, &cfg.lovasz_classes)?;
    if !lb.total.value.is_finite() || lb.total.grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NumericFailure { frame_id: s.frame_id });
    }
    let g = grad_to_tensor(&lb.total.grad, out.h, out.w);
    let (grads, _) = net.backward(&trace, &g)?;
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TrainError::NumericFailure { frame_id: s.frame_id });
    }
    Ok(FrameOutcome {
        loss: lb.total.value,
        wce: lb.wce,
        lovasz: lb.lovasz,
        wdcd: lb.wdcd,
        grads,
    })
}

/// Trains a network from `seed`-initialised weights. `on_epoch` sees each
/// epoch's log line as it completes.
pub fn train(
    train_set: &[Sample],
    holdout: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(SegNet<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    let c = train_set
        .first()
        .map(|s| s.input.c)
        .ok_or_else(|| TrainError::Config("empty training set".into()))?;
    let arch = ArchSpec::resolve(&cfg.arch, c)?;
    let mut net = SegNet::<f32>::init(&arch, cfg.seed);
    let mut opt = cfg.optimizer();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch: epoch + 1,
            lr: opt.lr,
            ..Default::default()
        };
        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<Result<FrameOutcome>> =
                batch.par_iter().map(|&i| frame_step(&net, &train_set[i], cfg)).collect();
            let mut sum: Option<Vec<Vec<f32>>> = None;
            for o in outcomes {
                let o = o?;
                log.loss += o.loss;
                log.wce += o.wce;
                log.lovasz += o.lovasz;
                log.wdcd += o.wdcd;
                match &mut sum {
                    None => sum = Some(o.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&o.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            opt.step_net(&mut net, &grads)?;
        }
        let n = train_set.len() as f64;
        log.loss /= n;
        log.wce /= n;
        log.lovasz /= n;
        log.wdcd /= n;
        if !holdout.is_empty() {
            log.holdout_moving_iou = Some(evaluate(&net, holdout)?.moving_iou());
        }
        opt.end_epoch();
        on_epoch(&log);
        logs.push(log);
    }
    Ok((net, logs))
}

/// Cell predictions (argmax, ties to the lowest class) for one sample.
pub fn predict_cells(net: &SegNet<f32>, s: &Sample) -> Result<Vec<u8>> {
    let out = net.forward(&s.input)?;
    Ok(logits_from_output(&out, &s.labels.valid).argmax())
}

/// Cell- and point-level confusion matrices over `samples`.
pub fn evaluate(net: &SegNet<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    let preds: Vec<Vec<u8>> = samples
        .par_iter()
        .map(|s| predict_cells(net, s))
        .collect::<Result<_>>()?;
    Ok(evaluate_predictions(samples, &preds))
}

pub fn evaluate_predictions(samples: &[Sample], cell_preds: &[Vec<u8>]) -> MetricsReport {
    let mut cell = ConfusionMatrix::new();
    let mut point = ConfusionMatrix::new();
    for (s, p) in samples.iter().zip(cell_preds) {
        cell.accumulate(p, &s.labels.labels, &[CLASS_UNLABELED])
            .expect("grid-sized predictions");
        let pp = back_project(p, &s.cells);
        point
            .accumulate(&pp, &s.point_classes, &[CLASS_UNLABELED])
            .expect("one prediction per point");
    }
    MetricsReport::new(cell, point)
}

/// Splits off the last `fraction` of samples (at least one when
/// `fraction > 0` and there are two or more samples).
pub fn split_holdout(mut samples: Vec<Sample>, fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    if fraction <= 0.0 || samples.len() < 2 {
        return (samples, Vec::new());
    }
    let n = ((samples.len() as f64 * fraction).round() as usize).clamp(1, samples.len() - 1);
    let holdout = samples.split_off(samples.len() - n);
    (samples, holdout)
}

pub fn load_samples(dir: &Path, bev: &BevConfig) -> Result<Vec<Sample>> {
    let seq = crate::kitti_io::load_sequence(&crate::kitti_io::SequenceDir::new(dir))?;
    samples_from_sequence(&seq, bev)
}

/// Settings of the baseline vs. distillation comparison on synthetic scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub scene: SceneConfig,
    pub bev: BevConfig,
    pub train: TrainConfig,
    pub n_train_sequences: usize,
    pub n_test_sequences: usize,
    pub kappa: f64,
    pub sigma: f64,
    pub seeds: Vec<u64>,
}

impl Default for BenchmarkConfig {
    /// The desk-scale distillation benchmark: a 16 x 64 polar grid over a
    /// 24 m arena, five 16-frame training sequences and two test sequences
    /// per seed, twelve epochs at lr 0.01, teacher `κ = 10`, `σ = 1`.
    fn default() -> Self {
        Self {
            scene: SceneConfig {
                n_frames: 16,
                arena_radius: 24.0,
                ..SceneConfig::default()
            },
            bev: BevConfig {
                grid: BevGrid::polar(16, 64, 25.0).expect("valid grid"),
                ..BevConfig::default()
            },
            train: TrainConfig {
                epochs: 12,
                lr: 0.01,
                ..TrainConfig::default()
            },
            n_train_sequences: 5,
            n_test_sequences: 2,
            kappa: 10.0,
            sigma: 1.0,
            seeds: (0..5).collect(),
        }
    }
}

/// Point-level moving IoU of the three variants for one seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub baseline: f64,
    pub wdcd: f64,
    pub dkd_all: f64,
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Builds the train / test samples for one benchmark seed.
pub fn benchmark_data(cfg: &BenchmarkConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train_set = Vec::new();
    let mut test_set = Vec::new();
    let total = cfg.n_train_sequences + cfg.n_test_sequences;
    for i in 0..total {
        let scene = SceneConfig {
            seed: scene_seed(seed, i),
            ..cfg.scene.clone()
        };
        let seq = gen_sequence(&scene)?.to_loaded();
        let mut samples = samples_from_sequence(&seq, &cfg.bev)?;
        samples.retain(|s| s.labels.n_valid() > 0);
        if i < cfg.n_train_sequences {
            attach_teacher(
                &mut samples,
                &TeacherSource::Synth {
                    kappa: cfg.kappa,
                    sigma: cfg.sigma,
                    seed,
                },
                i as u64,
            )?;
            train_set.extend(samples);
        } else {
            test_set.extend(samples);
        }
    }
    Ok((train_set, test_set))
}

/// Trains baseline (`γ = 0`), WDCD, and DKD-on-all-classes students from
/// the same initialisation and reports test moving IoU for each seed.
pub fn run_benchmark(cfg: &BenchmarkConfig, mut on_row: impl FnMut(&BenchmarkRow)) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (train_set, test_set) = benchmark_data(cfg, seed)?;
        let run = |gamma: f64, non_moving: NonMovingTerms| -> Result<f64> {
            let tc = TrainConfig {
                seed,
                distill: DistillConfig {
                    gamma,
                    non_moving,
                    ..cfg.train.distill
                },
                ..cfg.train.clone()
            };
            let (net, _) = train(&train_set, &[], &tc, |_| {})?;
            Ok(evaluate(&net, &test_set)?.moving_iou())
        };
        let row = BenchmarkRow {
            seed,
            baseline: run(0.0, NonMovingTerms::Nckd)?,
            wdcd: run(cfg.train.distill.gamma, NonMovingTerms::Nckd)?,
            dkd_all: run(cfg.train.distill.gamma, NonMovingTerms::TckdNckd)?,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
