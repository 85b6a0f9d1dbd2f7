//! Distillation and segmentation losses over 4-class logit grids, each with
//! its analytic gradient with respect to the student logits.
//!
//! Notation per cell: `z` logits, `τ` temperature, `p = softmax(z/τ)`,
//! `t` the cell's ground-truth class. The binary split is `b = (p_t, 1 - p_t)`
//! and the non-target distribution `p̂_i = p_i / (1 - p_t)` for `i ≠ t`.
//!
//! ```text
//! KD   = KL(pᵀ ‖ pˢ) = TCKD + (1 - p_tᵀ) · NCKD
//! TCKD = KL(bᵀ ‖ bˢ)        NCKD = KL(p̂ᵀ ‖ p̂ˢ)
//! DCD  = TCKD + β·NCKD  if t is the moving class,  β·NCKD otherwise
//! WDCD = DCD / W[t],   W[c] = share of the frame's valid cells labelled c
//! ```
//!
//! All loss math runs in `f64`.

use rayon::prelude::*;
use thiserror::Error;

use crate::bev::CellLabelGrid;
use crate::scalar::pairwise_sum;
use crate::{CLASS_MOVING, NUM_CLASSES};

const C: usize = NUM_CLASSES;

pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame has no valid cells")]
    EmptyFrame,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// `H × W × 4` raw scores, cell-major with the class index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LogitGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            scores: vec![0.0; height * width * C],
            valid: vec![true; height * width],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn cell(&self, c: usize) -> [f64; C] {
        let s = &self.scores[c * C..(c + 1) * C];
        [s[0], s[1], s[2], s[3]]
    }

    pub fn with_valid(mut self, valid: &[bool]) -> Self {
        assert_eq!(valid.len(), self.n_cells());
        self.valid = valid.to_vec();
        self
    }

    /// Per-cell argmax; ties go to the lowest class id.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.n_cells())
            .map(|c| {
                let z = self.cell(c);
                let mut best = 0;
                for k in 1..C {
                    if z[k] > z[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.scores.iter().all(|v| v.is_finite())
    }
}

/// Which distillation terms apply to cells whose label is not the moving
/// class. The moving class always gets `TCKD + β·NCKD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonMovingTerms {
    /// `β·NCKD` (decoupled class distillation).
    #[default]
    Nckd,
    /// `TCKD + β·NCKD`, i.e. plain decoupled KD on every class.
    TckdNckd,
    Tckd,
    None,
}

impl std::str::FromStr for NonMovingTerms {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nckd" => Ok(Self::Nckd),
            "tckd_nckd" => Ok(Self::TckdNckd),
            "tckd" => Ok(Self::Tckd),
            "none" => Ok(Self::None),
            _ => Err(format!("unknown non-moving terms {s:?} (nckd|tckd_nckd|tckd|none)")),
        }
    }
}

impl std::fmt::Display for NonMovingTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nckd => "nckd",
            Self::TckdNckd => "tckd_nckd",
            Self::Tckd => "tckd",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub beta: f64,
    pub gamma: f64,
    pub moving_class: u8,
    /// `None` means `1 / #valid cells` of the frame.
    pub weight_floor: Option<f64>,
    pub prob_floor: f64,
    pub non_moving: NonMovingTerms,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            beta: 1.0,
            gamma: 0.25,
            moving_class: CLASS_MOVING,
            weight_floor: None,
            prob_floor: DEFAULT_PROB_FLOOR,
            non_moving: NonMovingTerms::Nckd,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.temperature > 0.0) {
            return Err(format!("temperature {} must be > 0", self.temperature));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err("beta and gamma must be >= 0".into());
        }
        if self.moving_class as usize >= C {
            return Err(format!("moving class {} out of range", self.moving_class));
        }
        if !(self.prob_floor > 0.0) || self.weight_floor.is_some_and(|w| !(w > 0.0)) {
            return Err("floors must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Same layout as [`LogitGrid::scores`].
    pub grad: Vec<f64>,
}

impl LossResult {
    fn zero(n_cells: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n_cells * C],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameClassWeights {
    pub w: [f64; C],
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64; C], tau: f64) -> [f64; C] {
    let s = z.map(|v| v / tau);
    let lse = log_sum_exp(s.iter().copied());
    s.map(|v| v - lse)
}

/// `softmax(z/τ)` with max-subtraction.
pub fn softmax_probs(z: &[f64; C], tau: f64) -> [f64; C] {
    let s = z.map(|v| v / tau);
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = s.map(|v| (v - m).exp());
    let sum: f64 = e.iter().sum();
    e.map(|v| v / sum)
}

/// `(p_t, 1 - p_t)`.
pub fn target_split(p: &[f64; C], t: u8) -> (f64, f64) {
    let pt = p[t as usize];
    (pt, 1.0 - pt)
}

/// Softmax over the non-target logits, in ascending class order with `t`
/// skipped.
pub fn nontarget_probs(z: &[f64; C], t: u8, tau: f64) -> [f64; C - 1] {
    let lp = nontarget_log_probs(z, t, tau);
    lp.map(f64::exp)
}

fn others(t: u8) -> [usize; C - 1] {
    let mut out = [0; C - 1];
    let mut k = 0;
    for i in 0..C {
        if i != t as usize {
            out[k] = i;
            k += 1;
        }
    }
    out
}

fn nontarget_log_probs(z: &[f64; C], t: u8, tau: f64) -> [f64; C - 1] {
    let idx = others(t);
    let s = idx.map(|i| z[i] / tau);
    let lse = log_sum_exp(s.iter().copied());
    s.map(|v| v - lse)
}

/// Log of the binary split `(log p_t, log(1 - p_t))`, computed from logits.
fn binary_log_probs(z: &[f64; C], t: u8, tau: f64) -> (f64, f64) {
    let all = log_sum_exp(z.iter().map(|v| v / tau));
    let rest = log_sum_exp(others(t).into_iter().map(|i| z[i] / tau));
    (z[t as usize] / tau - all, rest - all)
}

/// `Σ a_i (log a_i - max(log b_i, log ε))` plus the per-term "floor inactive"
/// coefficients used by the gradients.
fn kl_terms<const N: usize>(log_a: &[f64; N], log_b: &[f64; N], eps: f64) -> (f64, [f64; N]) {
    let log_eps = eps.ln();
    let mut value = 0.0;
    let mut coeff = [0.0; N];
    for i in 0..N {
        let a = log_a[i].exp();
        if a == 0.0 {
            continue;
        }
        let lb = if log_b[i] < log_eps { log_eps } else { log_b[i] };
        value += a * (log_a[i] - lb);
        if log_b[i] >= log_eps {
            coeff[i] = a;
        }
    }
    (value, coeff)
}

/// `KL(softmax(zT/τ) ‖ softmax(zS/τ))` with the default probability floor.
pub fn kd_kl(zt: &[f64; C], zs: &[f64; C], tau: f64) -> f64 {
    kd_kl_grad(zt, zs, tau, DEFAULT_PROB_FLOOR).0
}

/// KD value and `∂/∂zS`.
pub fn kd_kl_grad(zt: &[f64; C], zs: &[f64; C], tau: f64, eps: f64) -> (f64, [f64; C]) {
    let lt = log_softmax(zt, tau);
    let ls = log_softmax(zs, tau);
    let (value, a) = kl_terms(&lt, &ls, eps);
    let q = ls.map(f64::exp);
    let a_sum: f64 = a.iter().sum();
    let mut g = [0.0; C];
    for j in 0..C {
        g[j] = (q[j] * a_sum - a[j]) / tau;
    }
    (value, g)
}

/// Binary KL between the target/non-target splits.
pub fn tckd(zt: &[f64; C], zs: &[f64; C], t: u8, tau: f64) -> f64 {
    tckd_grad(zt, zs, t, tau, DEFAULT_PROB_FLOOR).0
}

pub fn tckd_grad(zt: &[f64; C], zs: &[f64; C], t: u8, tau: f64, eps: f64) -> (f64, [f64; C]) {
    let (bt_t, bt_n) = binary_log_probs(zt, t, tau);
    let (bs_t, bs_n) = binary_log_probs(zs, t, tau);
    let (value, a) = kl_terms(&[bt_t, bt_n], &[bs_t, bs_n], eps);
    let q = log_softmax(zs, tau).map(f64::exp);
    let phat = nontarget_probs(zs, t, tau);
    let idx = others(t);
    let mut phat_full = [0.0; C];
    for (k, &i) in idx.iter().enumerate() {
        phat_full[i] = phat[k];
    }
    let mut g = [0.0; C];
    for j in 0..C {
        let dt = if j == t as usize { 1.0 } else { 0.0 };
        g[j] = -(a[0] * (dt - q[j]) + a[1] * (phat_full[j] - q[j])) / tau;
    }
    (value, g)
}

/// KL between the renormalised non-target distributions.
pub fn nckd(zt: &[f64; C], zs: &[f64; C], t: u8, tau: f64) -> f64 {
    nckd_grad(zt, zs, t, tau, DEFAULT_PROB_FLOOR).0
}

pub fn nckd_grad(zt: &[f64; C], zs: &[f64; C], t: u8, tau: f64, eps: f64) -> (f64, [f64; C]) {
    let lt = nontarget_log_probs(zt, t, tau);
    let ls = nontarget_log_probs(zs, t, tau);
    let (value, a) = kl_terms(&lt, &ls, eps);
    let a_sum: f64 = a.iter().sum();
    let mut g = [0.0; C];
    for (k, &i) in others(t).iter().enumerate() {
        g[i] = (ls[k].exp() * a_sum - a[k]) / tau;
    }
    (value, g)
}

/// Decoupled class distillation for one cell (no τ² scaling).
pub fn dcd(zt: &[f64; C], zs: &[f64; C], t: u8, cfg: &DistillConfig) -> f64 {
    dcd_grad(zt, zs, t, cfg).0
}

pub fn dcd_grad(zt: &[f64; C], zs: &[f64; C], t: u8, cfg: &DistillConfig) -> (f64, [f64; C]) {
    let tau = cfg.temperature;
    let eps = cfg.prob_floor;
    let (use_tckd, use_nckd) = if t == cfg.moving_class {
        (true, true)
    } else {
        match cfg.non_moving {
            NonMovingTerms::Nckd => (false, true),
            NonMovingTerms::TckdNckd => (true, true),
            NonMovingTerms::Tckd => (true, false),
            NonMovingTerms::None => (false, false),
        }
    };
    let mut value = 0.0;
    let mut g = [0.0; C];
    if use_tckd {
        let (v, gt) = tckd_grad(zt, zs, t, tau, eps);
        value += v;
        for j in 0..C {
            g[j] += gt[j];
        }
    }
    if use_nckd && cfg.beta != 0.0 {
        let (v, gn) = nckd_grad(zt, zs, t, tau, eps);
        value += cfg.beta * v;
        for j in 0..C {
            g[j] += cfg.beta * gn[j];
        }
    }
    (value, g)
}

/// Share of valid cells per class, floored at `ε_w` (default `1 / #valid`).
pub fn frame_weights(labels: &CellLabelGrid, cfg: &DistillConfig) -> Result<FrameClassWeights> {
    let mut counts = [0usize; C];
    for (l, v) in labels.labels.iter().zip(&labels.valid) {
        if *v {
            counts[*l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LossError::EmptyFrame);
    }
    let floor = cfg.weight_floor.unwrap_or(1.0 / total as f64);
    Ok(FrameClassWeights {
        w: counts.map(|n| (n as f64 / total as f64).max(floor)),
    })
}

fn check_labels(grid: &LogitGrid, labels: &CellLabelGrid, what: &str) -> Result<()> {
    if grid.height != labels.height || grid.width != labels.width {
        return Err(LossError::ShapeMismatch(format!(
            "{what} is {}x{}, labels are {}x{}",
            grid.height, grid.width, labels.height, labels.width
        )));
    }
    if grid.scores.len() != grid.n_cells() * C || labels.labels.len() != grid.n_cells() {
        return Err(LossError::ShapeMismatch(format!("{what} buffer length")));
    }
    Ok(())
}

fn check_masks(grid: &LogitGrid, labels: &CellLabelGrid, what: &str) -> Result<()> {
    if grid.valid != labels.valid {
        return Err(LossError::ShapeMismatch(format!("{what} validity mask differs from labels")));
    }
    Ok(())
}

/// Maps `f` over valid cells in index order and reduces the values with
/// pairwise summation; gradients land in the cell's slot.
fn reduce_cells<F>(labels: &CellLabelGrid, f: F) -> (f64, Vec<f64>)
where
    F: Fn(usize, u8) -> (f64, [f64; C]) + Sync,
{
    let n = labels.labels.len();
    let per: Vec<(f64, [f64; C])> = (0..n)
        .into_par_iter()
        .map(|c| {
            if labels.valid[c] {
                f(c, labels.labels[c])
            } else {
                (0.0, [0.0; C])
            }
        })
        .collect();
    let values: Vec<f64> = per.iter().map(|(v, _)| *v).collect();
    let mut grad = vec![0.0; n * C];
    for (c, (_, g)) in per.iter().enumerate() {
        grad[c * C..(c + 1) * C].copy_from_slice(g);
    }
    (pairwise_sum(&values), grad)
}

/// Frame-level weighted decoupled class distillation: mean over valid cells
/// of `DCD / W[label]`, times `τ²`.
pub fn wdcd_frame(
    zt: &LogitGrid,
    zs: &LogitGrid,
    labels: &CellLabelGrid,
    cfg: &DistillConfig,
) -> Result<LossResult> {
    check_labels(zt, labels, "teacher")?;
    check_labels(zs, labels, "student")?;
    check_masks(zt, labels, "teacher")?;
    check_masks(zs, labels, "student")?;
    let weights = frame_weights(labels, cfg)?;
    let n_valid = labels.n_valid() as f64;
    let tau2 = cfg.temperature * cfg.temperature;
    let (sum, mut grad) = reduce_cells(labels, |c, t| {
        let (v, g) = dcd_grad(&zt.cell(c), &zs.cell(c), t, cfg);
        let inv_w = 1.0 / weights.w[t as usize];
        (v * inv_w, g.map(|x| x * inv_w))
    });
    let scale = tau2 / n_valid;
    for g in &mut grad {
        *g *= scale;
    }
    Ok(LossResult {
        value: sum * scale,
        grad,
    })
}

/// Mean over valid cells of `-w[t] · log pˢ_t`.
pub fn weighted_cross_entropy(
    zs: &LogitGrid,
    labels: &CellLabelGrid,
    class_weights: &[f64; C],
) -> Result<LossResult> {
    check_labels(zs, labels, "student")?;
    let n_valid = labels.n_valid();
    if n_valid == 0 {
        return Ok(LossResult::zero(zs.n_cells()));
    }
    let (sum, mut grad) = reduce_cells(labels, |c, t| {
        let ls = log_softmax(&zs.cell(c), 1.0);
        let w = class_weights[t as usize];
        let mut g = ls.map(|v| w * v.exp());
        g[t as usize] -= w;
        (-w * ls[t as usize], g)
    });
    let inv = 1.0 / n_valid as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(LossResult {
        value: sum * inv,
        grad,
    })
}

/// Lovász hinge weights for one class: given errors already sorted in
/// descending order with their ground-truth indicators, returns `δ_k`.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|g| **g).count() as f64;
    let mut cum_fg = 0.0;
    let mut cum_bg = 0.0;
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(gt_sorted.len());
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-Softmax over the valid cells, averaged over the listed classes
/// that occur in the labels.
pub fn lovasz_softmax(zs: &LogitGrid, labels: &CellLabelGrid, classes: &[u8]) -> Result<LossResult> {
    check_labels(zs, labels, "student")?;
    let cells: Vec<usize> = (0..labels.labels.len()).filter(|&c| labels.valid[c]).collect();
    let probs: Vec<[f64; C]> = cells.iter().map(|&c| softmax_probs(&zs.cell(c), 1.0)).collect();
    let present: Vec<u8> = classes
        .iter()
        .copied()
        .filter(|&k| cells.iter().any(|&c| labels.labels[c] == k))
        .collect();
    let mut out = LossResult::zero(zs.n_cells());
    if present.is_empty() {
        return Ok(out);
    }
    let n_present = present.len() as f64;
    // ∂loss/∂p per valid cell
    let mut gp = vec![[0.0; C]; cells.len()];
    let mut losses = Vec::with_capacity(present.len());
    for &k in &present {
        let fg: Vec<bool> = cells.iter().map(|&c| labels.labels[c] == k).collect();
        let err: Vec<f64> = probs
            .iter()
            .zip(&fg)
            .map(|(p, &f)| if f { 1.0 - p[k as usize] } else { p[k as usize] })
            .collect();
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let delta = lovasz_grad(&gt_sorted);
        let terms: Vec<f64> = order.iter().zip(&delta).map(|(&i, d)| err[i] * d).collect();
        losses.push(pairwise_sum(&terms));
        for (&i, d) in order.iter().zip(&delta) {
            let sign = if fg[i] { -1.0 } else { 1.0 };
            gp[i][k as usize] += sign * d / n_present;
        }
    }
    out.value = pairwise_sum(&losses) / n_present;
    for (slot, &c) in cells.iter().enumerate() {
        let p = probs[slot];
        let dot: f64 = (0..C).map(|k| gp[slot][k] * p[k]).sum();
        for j in 0..C {
            out.grad[c * C + j] = p[j] * (gp[slot][j] - dot);
        }
    }
    Ok(out)
}

/// Per-component values of the composed training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: LossResult,
    pub wce: f64,
    pub lovasz: f64,
    /// Unscaled WDCD value (before γ); 0 without a teacher or with γ = 0.
    pub wdcd: f64,
}

/// `wce + lovász + γ·WDCD`. Without a teacher, or with `γ = 0`, the
/// distillation term is skipped entirely.
pub fn total_loss(
    zs: &LogitGrid,
    zt: Option<&LogitGrid>,
    labels: &CellLabelGrid,
    cfg: &DistillConfig,
    class_weights: &[f64; C],
    lovasz_classes: &[u8],
) -> Result<LossBreakdown> {
    let wce = weighted_cross_entropy(zs, labels, class_weights)?;
    let ls = lovasz_softmax(zs, labels, lovasz_classes)?;
    let mut grad: Vec<f64> = wce.grad.iter().zip(&ls.grad).map(|(a, b)| a + b).collect();
    let mut value = wce.value + ls.value;
    let mut wdcd_value = 0.0;
    if let Some(zt) = zt {
        if cfg.gamma != 0.0 {
            let kd = wdcd_frame(zt, zs, labels, cfg)?;
            value += cfg.gamma * kd.value;
            for (g, k) in grad.iter_mut().zip(&kd.grad) {
                *g += cfg.gamma * k;
            }
            wdcd_value = kd.value;
        }
    }
    Ok(LossBreakdown {
        total: LossResult { value, grad },
        wce: wce.value,
        lovasz: ls.value,
        wdcd: wdcd_value,
    })
}
