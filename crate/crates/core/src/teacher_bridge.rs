//! Per-frame teacher logits on disk, and a label-conditioned synthetic teacher.
//!
//! Layout of a `.logits` file (little-endian):
//!
//! ```text
//! 0   4  magic "KDTL"
//! 4   2  version (=1)
//! 6   2  n_classes (=4)
//! 8   4  height
//! 12  4  width
//! 16  .. H·W·4 f32 scores, row-major cells, class index fastest
//! ..  .. validity bitmap, H·W bits row-major, LSB first, padded to a byte
//! ```
//!
//! Scores are stored as `f32`; grids whose values are already `f32`
//! representable round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bev::{pack_bits, unpack_bits, CellLabelGrid};
use crate::losses::LogitGrid;
use crate::NUM_CLASSES;

const MAGIC: &[u8; 4] = b"KDTL";
const VERSION: u16 = 1;
const HEADER: usize = 16;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid synthetic teacher parameters: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TeacherError>;

/// `{frame:06}.logits`
pub fn logits_file_name(frame_id: u64) -> String {
    format!("{frame_id:06}.logits")
}

pub fn logits_to_bytes(grid: &LogitGrid) -> std::result::Result<Vec<u8>, String> {
    let n = grid.n_cells();
    if grid.scores.len() != n * NUM_CLASSES || grid.valid.len() != n {
        return Err("grid buffers do not match its shape".into());
    }
    let (h, w) = (u32::try_from(grid.height), u32::try_from(grid.width));
    let (Ok(h), Ok(w)) = (h, w) else {
        return Err("grid too large".into());
    };
    let mut out = Vec::with_capacity(HEADER + n * NUM_CLASSES * 4 + n.div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(NUM_CLASSES as u16).to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    for &v in &grid.scores {
        let f = v as f32;
        if !f.is_finite() {
            return Err(format!("non-finite score {v}"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&pack_bits(&grid.valid));
    Ok(out)
}

pub fn logits_from_bytes(bytes: &[u8]) -> std::result::Result<LogitGrid, String> {
    if bytes.len() < HEADER {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let nc = u16_at(6) as usize;
    if nc != NUM_CLASSES {
        return Err(format!("{nc} classes, expected {NUM_CLASSES}"));
    }
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(NUM_CLASSES * 4).map(|p| (n, p)))
        .and_then(|(n, p)| p.checked_add(n.div_ceil(8)).map(|b| (n, p, b)))
        .and_then(|(n, p, b)| b.checked_add(HEADER).map(|t| (n, p, t)));
    let Some((n, payload, total)) = expected else {
        return Err(format!("shape {h}x{w} overflows"));
    };
    if bytes.len() != total {
        return Err(format!("{h}x{w} grid needs {total} bytes, file has {}", bytes.len()));
    }
    let mut scores = Vec::with_capacity(n * NUM_CLASSES);
    for (i, b) in bytes[HEADER..HEADER + payload].chunks_exact(4).enumerate() {
        let f = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !f.is_finite() {
            return Err(format!("non-finite score at index {i}"));
        }
        scores.push(f as f64);
    }
    let valid = unpack_bits(&bytes[HEADER + payload..], n);
    Ok(LogitGrid {
        height: h,
        width: w,
        scores,
        valid,
    })
}

pub fn write_logits(grid: &LogitGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = logits_to_bytes(grid).map_err(|reason| TeacherError::Format {
        path: path.to_path_buf(),
        reason,
    })?;
    fs::write(path, bytes).map_err(|source| TeacherError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_logits(path: impl AsRef<Path>) -> Result<LogitGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TeacherError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    logits_from_bytes(&bytes).map_err(|reason| TeacherError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// Teacher whose logit for the labelled class is `κ` plus `N(0, σ²)` noise on
/// every class. Invalid cells are all zeros.
pub fn synth_teacher(labels: &CellLabelGrid, kappa: f64, sigma: f64, seed: u64) -> Result<LogitGrid> {
    if !(kappa > 0.0 && kappa.is_finite()) || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(TeacherError::Config(format!("kappa={kappa} sigma={sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| TeacherError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = LogitGrid::zeros(labels.height, labels.width).with_valid(&labels.valid);
    for (c, (&l, &v)) in labels.labels.iter().zip(&labels.valid).enumerate() {
        if !v {
            continue;
        }
        let cell = &mut grid.scores[c * NUM_CLASSES..(c + 1) * NUM_CLASSES];
        for (k, s) in cell.iter_mut().enumerate() {
            let base = if k == l as usize { kappa } else { 0.0 };
            *s = base + if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{softmax_probs, wdcd_frame, DistillConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(h: usize, w: usize, seed: u64) -> CellLabelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let valid: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
        let labels = valid.iter().map(|&v| if v { rng.gen_range(1..4) } else { 0 }).collect();
        CellLabelGrid {
            height: h,
            width: w,
            labels,
            valid,
        }
    }

    #[test]
    fn one_cell_zero_layout() {
        let bytes = logits_to_bytes(&LogitGrid::zeros(1, 1)).unwrap();
        assert_eq!(bytes.len(), 16 + 16 + 1);
        assert_eq!(&bytes[..4], b"KDTL");
        assert_eq!(&bytes[4..16], &[1, 0, 4, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert!(bytes[16..32].iter().all(|b| *b == 0));
        assert_eq!(bytes[32], 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = synth_teacher(&labels(5, 7, 1), 3.0, 1.5, 9).unwrap();
        let g = LogitGrid {
            scores: g.scores.iter().map(|v| *v as f32 as f64).collect(),
            ..g
        };
        let p = dir.path().join(logits_file_name(12));
        write_logits(&g, &p).unwrap();
        assert!(p.ends_with("000012.logits"));
        assert_eq!(read_logits(&p).unwrap(), g);
    }

    #[test]
    fn rejects_bad_files() {
        let good = logits_to_bytes(&LogitGrid::zeros(2, 3)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(logits_from_bytes(&bad).unwrap_err().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(logits_from_bytes(&bad).is_err());
        assert!(logits_from_bytes(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(logits_from_bytes(&bad).is_err());
        let mut bad = good;
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(logits_from_bytes(&bad).is_err());
        let mut nan = LogitGrid::zeros(1, 1);
        nan.scores[2] = f64::INFINITY;
        assert!(logits_to_bytes(&nan).is_err());
    }

    #[test]
    fn noiseless_teacher() {
        let l = labels(6, 6, 2);
        let g = synth_teacher(&l, 10.0, 0.0, 0).unwrap();
        let pt = 10f64.exp() / (10f64.exp() + 3.0);
        for c in 0..l.labels.len() {
            if l.valid[c] {
                assert_eq!(g.argmax()[c], l.labels[c]);
                let p = softmax_probs(&g.cell(c), 1.0);
                assert!((p[l.labels[c] as usize] - pt).abs() < 1e-12);
            } else {
                assert_eq!(g.cell(c), [0.0; 4]);
            }
        }
    }

    #[test]
    fn seeded_and_validated() {
        let l = labels(4, 4, 3);
        assert_eq!(synth_teacher(&l, 2.0, 1.0, 5).unwrap(), synth_teacher(&l, 2.0, 1.0, 5).unwrap());
        assert_ne!(synth_teacher(&l, 2.0, 1.0, 5).unwrap(), synth_teacher(&l, 2.0, 1.0, 6).unwrap());
        assert!(synth_teacher(&l, 0.0, 1.0, 0).is_err());
        assert!(synth_teacher(&l, 1.0, -1.0, 0).is_err());
    }

    #[test]
    fn matching_student_has_no_distillation_gradient() {
        let l = labels(5, 5, 4);
        let t = synth_teacher(&l, 10.0, 0.0, 0).unwrap();
        let r = wdcd_frame(&t, &t, &l, &DistillConfig::default()).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(r.grad.iter().all(|g| g.abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bytes_round_trip(h in 0usize..40, w in 0usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = LogitGrid {
                height: h,
                width: w,
                scores: (0..h * w * 4).map(|_| rng.gen_range(-50.0f32..50.0) as f64).collect(),
                valid: (0..h * w).map(|_| rng.gen_bool(0.5)).collect(),
            };
            let bytes = logits_to_bytes(&g).unwrap();
            let back = logits_from_bytes(&bytes).unwrap();
            prop_assert_eq!(logits_to_bytes(&back).unwrap(), bytes);
            prop_assert_eq!(back, g);
        }
    }
}
