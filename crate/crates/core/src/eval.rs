//! Confusion matrices, IoU, and key=value metrics reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::{CLASS_MOVING, CLASS_UNLABELED, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions for {truth} ground-truth labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("metrics line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one count per element whose truth is not in `ignore`.
    pub fn accumulate(&mut self, preds: &[u8], truth: &[u8], ignore: &[u8]) -> Result<(), EvalError> {
        if preds.len() != truth.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                truth: truth.len(),
            });
        }
        for (&p, &t) in preds.iter().zip(truth) {
            if ignore.contains(&t) {
                continue;
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    /// [`accumulate`](Self::accumulate) ignoring only unlabeled elements.
    pub fn accumulate_default(&mut self, preds: &[u8], truth: &[u8]) -> Result<(), EvalError> {
        self.accumulate(preds, truth, &[CLASS_UNLABELED])
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `(TP, FP, FN)` for class `c`.
    pub fn tp_fp_fn(&self, c: u8) -> (u64, u64, u64) {
        let c = c as usize;
        let tp = self.counts[c][c];
        let fp = (0..NUM_CLASSES).filter(|&t| t != c).map(|t| self.counts[t][c]).sum();
        let fn_ = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| self.counts[c][p]).sum();
        (tp, fp, fn_)
    }

    /// Whether `c` neither occurs nor is predicted, in which case IoU is 1.
    pub fn absent(&self, c: u8) -> bool {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        tp + fp + fn_ == 0
    }

    pub fn iou(&self, c: u8) -> f64 {
        let (tp, fp, fn_) = self.tp_fp_fn(c);
        let den = tp + fp + fn_;
        if den == 0 {
            1.0
        } else {
            tp as f64 / den as f64
        }
    }

    pub fn moving_iou(&self) -> f64 {
        self.iou(CLASS_MOVING)
    }
}

/// IoU at one evaluation level (cell or point).
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMetrics {
    pub cm: ConfusionMatrix,
}

impl LevelMetrics {
    fn write(&self, prefix: &str, out: &mut String) {
        for c in 1..NUM_CLASSES as u8 {
            let _ = writeln!(out, "{prefix}.iou.{c}={:.6}", self.cm.iou(c));
            if self.cm.absent(c) {
                let _ = writeln!(out, "{prefix}.absent.{c}=1");
            }
        }
        for t in 0..NUM_CLASSES {
            let row: Vec<String> = self.cm.counts[t].iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{prefix}.cm.{t}={}", row.join(","));
        }
    }
}

/// The evaluation report written by `kdmos eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cell: LevelMetrics,
    pub point: LevelMetrics,
}

impl MetricsReport {
    pub fn new(cell: ConfusionMatrix, point: ConfusionMatrix) -> Self {
        Self {
            cell: LevelMetrics { cm: cell },
            point: LevelMetrics { cm: point },
        }
    }

    /// Point-level moving IoU, the headline number.
    pub fn moving_iou(&self) -> f64 {
        self.point.cm.moving_iou()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "moving_iou={:.6}", self.moving_iou());
        let _ = writeln!(out, "cell_moving_iou={:.6}", self.cell.cm.moving_iou());
        self.point.write("point", &mut out);
        self.cell.write("cell", &mut out);
        out
    }

    /// Rebuilds the report from its confusion-matrix rows.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let kv = parse_kv(text)?;
        let level = |prefix: &str| -> Result<ConfusionMatrix, EvalError> {
            let mut cm = ConfusionMatrix::new();
            for t in 0..NUM_CLASSES {
                let key = format!("{prefix}.cm.{t}");
                let row = kv.get(&key).ok_or_else(|| EvalError::Parse {
                    line: 0,
                    reason: format!("missing {key}"),
                })?;
                let vals: Vec<u64> = row
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| EvalError::Parse {
                        line: 0,
                        reason: format!("bad row {key}={row}"),
                    })?;
                if vals.len() != NUM_CLASSES {
                    return Err(EvalError::Parse {
                        line: 0,
                        reason: format!("{key} has {} entries", vals.len()),
                    });
                }
                cm.counts[t].copy_from_slice(&vals);
            }
            Ok(cm)
        };
        Ok(Self::new(level("cell")?, level("point")?))
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| EvalError::Parse {
            line: i + 1,
            reason: format!("expected key=value, got {line:?}"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
