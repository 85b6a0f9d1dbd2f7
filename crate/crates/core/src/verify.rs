//! Seeded self-checks behind `kdmos verify`: the KD decomposition identity,
//! finite-difference gradient checks, DySample degeneracy, and Lovász-Softmax
//! against its set-function definition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::CellLabelGrid;
use crate::losses::{
    kd_kl, lovasz_softmax, nckd, softmax_probs, target_split, tckd, total_loss, wdcd_frame,
    weighted_cross_entropy, DistillConfig, LogitGrid, NonMovingTerms,
};
use crate::nnet::{bilinear_upsample, relu_backward, relu_forward, ArchSpec, Conv2d, DySample, Layer, SegNet, Tensor3};
use crate::NUM_CLASSES;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const DYSAMPLE_TOL: f64 = 1e-6;
pub const LOVASZ_TOL: f64 = 1e-12;
/// Sample coordinates, ReLU inputs and Lovász error gaps closer than this to
/// a kink are regenerated.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub threshold: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} instances={} max_error={:.3e} threshold={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.threshold
        )
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let den = norm(analytic).max(norm(numeric));
    if den == 0.0 {
        0.0
    } else {
        norm(&diff) / den
    }
}

fn rand_logits(rng: &mut ChaCha8Rng, scale: f64) -> [f64; NUM_CLASSES] {
    [0; NUM_CLASSES].map(|_| rng.gen_range(-scale..scale))
}

/// Max `|KD - (TCKD + (1 - pᵀ_t)·NCKD)|` over `draws` random cells for each
/// `τ ∈ {1, 2, 4}`.
pub fn identity_suite(draws: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    let mut n = 0;
    for tau in [1.0, 2.0, 4.0] {
        for _ in 0..draws {
            let zt = rand_logits(&mut rng, 5.0);
            let zs = rand_logits(&mut rng, 5.0);
            let t = rng.gen_range(0..NUM_CLASSES as u8);
            let (pt, _) = target_split(&softmax_probs(&zt, tau), t);
            let lhs = kd_kl(&zt, &zs, tau);
            let rhs = tckd(&zt, &zs, t, tau) + (1.0 - pt) * nckd(&zt, &zs, t, tau);
            max_error = max_error.max((lhs - rhs).abs());
            n += 1;
        }
    }
    SuiteReport {
        name: "identity".into(),
        instances: n,
        max_error,
        threshold: IDENTITY_TOL,
    }
}

fn rand_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (LogitGrid, LogitGrid, CellLabelGrid) {
    let n = h * w;
    let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    valid[0] = true;
    let labels: Vec<u8> = valid
        .iter()
        .map(|&v| if v { rng.gen_range(0..NUM_CLASSES as u8) } else { 0 })
        .collect();
    let grid = |rng: &mut ChaCha8Rng| LogitGrid {
        height: h,
        width: w,
        scores: (0..n * NUM_CLASSES).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        valid: valid.clone(),
    };
    let zt = grid(rng);
    let zs = grid(rng);
    (
        zt,
        zs,
        CellLabelGrid {
            height: h,
            width: w,
            labels,
            valid,
        },
    )
}

/// Smallest gap between distinct cells' Lovász errors, over all classes.
fn lovasz_min_gap(zs: &LogitGrid, labels: &CellLabelGrid) -> f64 {
    let mut gap = f64::INFINITY;
    for k in 0..NUM_CLASSES {
        let mut errs: Vec<f64> = (0..labels.labels.len())
            .filter(|&c| labels.valid[c])
            .map(|c| {
                let p = softmax_probs(&zs.cell(c), 1.0)[k];
                if labels.labels[c] as usize == k {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        for w in errs.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

fn with_scores(g: &LogitGrid, s: &[f64]) -> LogitGrid {
    LogitGrid {
        scores: s.to_vec(),
        ..g.clone()
    }
}

fn rand_distill(rng: &mut ChaCha8Rng) -> DistillConfig {
    let terms = [
        NonMovingTerms::Nckd,
        NonMovingTerms::TckdNckd,
        NonMovingTerms::Tckd,
        NonMovingTerms::None,
    ];
    DistillConfig {
        temperature: [1.0, 2.0, 4.0][rng.gen_range(0..3)],
        beta: rng.gen_range(0.5..2.0),
        gamma: rng.gen_range(0.1..1.0),
        non_moving: terms[rng.gen_range(0..4)],
        ..Default::default()
    }
}

fn loss_check(
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    needs_lovasz_margin: bool,
    eval: impl Fn(&LogitGrid, &LogitGrid, &CellLabelGrid, &DistillConfig, &[f64; NUM_CLASSES]) -> (f64, Vec<f64>),
) -> SuiteReport {
    let mut max_error: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let (h, w) = (rng.gen_range(1..4), rng.gen_range(2..5));
        let (zt, zs, labels) = rand_frame(rng, h, w);
        if needs_lovasz_margin && lovasz_min_gap(&zs, &labels) < KINK_MARGIN {
            continue;
        }
        let cfg = rand_distill(rng);
        let weights = [0; NUM_CLASSES].map(|_| rng.gen_range(0.1..2.0));
        let (_, analytic) = eval(&zt, &zs, &labels, &cfg, &weights);
        let numeric = numeric_grad(
            |s| eval(&zt, &with_scores(&zs, s), &labels, &cfg, &weights).0,
            &zs.scores,
            FD_STEP,
        );
        max_error = max_error.max(relative_error(&analytic, &numeric));
        done += 1;
    }
    SuiteReport {
        name: format!("gradcheck.{name}"),
        instances,
        max_error,
        threshold: GRAD_TOL,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor3<f64> {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-scale..scale)).collect()).expect("sized")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_check(instances: usize, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut max_error: f64 = 0.0;
    for i in 0..instances {
        let (k, stride) = [(3, 1), (3, 2), (1, 1)][i % 3];
        let (ic, oc) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(2..7), rng.gen_range(2..7));
        let mut conv = Conv2d::<f64>::he_uniform(ic, oc, k, stride, rng);
        conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        let x = rand_tensor(rng, ic, h, w, 1.0);
        let (oh, ow) = conv.out_size(h, w);
        let r = rand_tensor(rng, oc, oh, ow, 1.0);
        let (gx, gw, gb) = conv.backward(&x, &r).expect("shapes");
        let loss_x = |v: &[f64]| {
            let xx = Tensor3::from_vec(ic, h, w, v.to_vec()).expect("sized");
            dot(&conv.forward(&xx).expect("shapes").data, &r.data)
        };
        let loss_w = |v: &[f64]| {
            let mut c = conv.clone();
            c.weight = v.to_vec();
            dot(&c.forward(&x).expect("shapes").data, &r.data)
        };
        let loss_b = |v: &[f64]| {
            let mut c = conv.clone();
            c.bias = v.to_vec();
            dot(&c.forward(&x).expect("shapes").data, &r.data)
        };
        for (a, n) in [
            (gx.data.clone(), numeric_grad(loss_x, &x.data, FD_STEP)),
            (gw, numeric_grad(loss_w, &conv.weight, FD_STEP)),
            (gb, numeric_grad(loss_b, &conv.bias, FD_STEP)),
        ] {
            max_error = max_error.max(relative_error(&a, &n));
        }
    }
    SuiteReport {
        name: "gradcheck.conv2d".into(),
        instances,
        max_error,
        threshold: GRAD_TOL,
    }
}

fn relu_check(instances: usize, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut max_error: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let x = rand_tensor(rng, 2, 3, 4, 1.0);
        if x.data.iter().any(|v| v.abs() < KINK_MARGIN) {
            continue;
        }
        let r = rand_tensor(rng, 2, 3, 4, 1.0);
        let mut y = x.clone();
        relu_forward(&mut y);
        let mut g = r.clone();
        relu_backward(&y, &mut g);
        let n = numeric_grad(
            |v| {
                let mut t = Tensor3::from_vec(2, 3, 4, v.to_vec()).expect("sized");
                relu_forward(&mut t);
                dot(&t.data, &r.data)
            },
            &x.data,
            FD_STEP,
        );
        max_error = max_error.max(relative_error(&g.data, &n));
        done += 1;
    }
    SuiteReport {
        name: "gradcheck.relu".into(),
        instances,
        max_error,
        threshold: GRAD_TOL,
    }
}

fn near_kink(coords: &[f64]) -> bool {
    coords.iter().any(|c| (c - c.round()).abs() < KINK_MARGIN)
}

fn random_dysample(rng: &mut ChaCha8Rng, c: usize, s: usize) -> DySample<f64> {
    let mut d = DySample::<f64>::zeros(c, s, 0.25);
    d.linear_w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    d.linear_b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    d
}

fn dysample_check(instances: usize, rng: &mut ChaCha8Rng) -> SuiteReport {
    let mut max_error: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let s = if done % 2 == 0 { 2 } else { 3 };
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5));
        let d = random_dysample(rng, c, s);
        let x = rand_tensor(rng, c, h, w, 1.0);
        let (y, cache) = d.forward(&x).expect("shapes");
        if near_kink(&cache.coords) {
            continue;
        }
        let r = rand_tensor(rng, c, y.h, y.w, 1.0);
        let (gx, gw, gb) = d.backward(&x, &cache, &r).expect("shapes");
        let loss_x = |v: &[f64]| {
            let xx = Tensor3::from_vec(c, h, w, v.to_vec()).expect("sized");
            dot(&d.forward(&xx).expect("shapes").0.data, &r.data)
        };
        let loss_w = |v: &[f64]| {
            let mut dd = d.clone();
            dd.linear_w = v.to_vec();
            dot(&dd.forward(&x).expect("shapes").0.data, &r.data)
        };
        let loss_b = |v: &[f64]| {
            let mut dd = d.clone();
            dd.linear_b = v.to_vec();
            dot(&dd.forward(&x).expect("shapes").0.data, &r.data)
        };
        for (a, n) in [
            (gx.data.clone(), numeric_grad(loss_x, &x.data, FD_STEP)),
            (gw, numeric_grad(loss_w, &d.linear_w, FD_STEP)),
            (gb, numeric_grad(loss_b, &d.linear_b, FD_STEP)),
        ] {
            max_error = max_error.max(relative_error(&a, &n));
        }
        done += 1;
    }
    SuiteReport {
        name: "gradcheck.dysample".into(),
        instances,
        max_error,
        threshold: GRAD_TOL,
    }
}

/// True when any ReLU input or DySample coordinate of `net` on `x` sits
/// within [`KINK_MARGIN`] of a kink.
fn net_near_kink(net: &SegNet<f64>, x: &Tensor3<f64>) -> bool {
    let mut cur = x.clone();
    for layer in &net.layers {
        cur = match layer {
            Layer::Conv { conv, relu } => {
                let mut y = conv.forward(&cur).expect("shapes");
                if *relu {
                    if y.data.iter().any(|v| v.abs() < KINK_MARGIN) {
                        return true;
                    }
                    relu_forward(&mut y);
                }
                y
            }
            Layer::Up(d) => {
                let (y, cache) = d.forward(&cur).expect("shapes");
                if near_kink(&cache.coords) {
                    return true;
                }
                y
            }
        };
    }
    false
}

fn segnet_check(instances: usize, rng: &mut ChaCha8Rng) -> SuiteReport {
    let arch = ArchSpec::parse("in=2;c3;c4s2;d2;c3;h4").expect("valid descriptor");
    let mut max_error: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let mut net = SegNet::<f64>::init(&arch, rng.gen());
        for p in net.params_mut() {
            p.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let x = rand_tensor(rng, 2, 4, 4, 1.0);
        if net_near_kink(&net, &x) {
            continue;
        }
        let r = rand_tensor(rng, NUM_CLASSES, 4, 4, 1.0);
        let (_, trace) = net.forward_train(&x).expect("shapes");
        let (grads, gx) = net.backward(&trace, &r).expect("shapes");
        let flat: Vec<f64> = net.params().iter().flat_map(|p| p.iter().copied()).collect();
        let lens: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        let loss_p = |v: &[f64]| {
            let mut n2 = net.clone();
            let mut off = 0;
            for (p, len) in n2.params_mut().into_iter().zip(&lens) {
                p.copy_from_slice(&v[off..off + len]);
                off += len;
            }
            dot(&n2.forward(&x).expect("shapes").data, &r.data)
        };
        let loss_x = |v: &[f64]| {
            let xx = Tensor3::from_vec(2, 4, 4, v.to_vec()).expect("sized");
            dot(&net.forward(&xx).expect("shapes").data, &r.data)
        };
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        max_error = max_error.max(relative_error(&analytic, &numeric_grad(loss_p, &flat, FD_STEP)));
        max_error = max_error.max(relative_error(&gx.data, &numeric_grad(loss_x, &x.data, FD_STEP)));
        done += 1;
    }
    SuiteReport {
        name: "gradcheck.segnet".into(),
        instances,
        max_error,
        threshold: GRAD_TOL,
    }
}

/// Finite-difference checks of every loss and layer, `instances` each.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        loss_check("wdcd", instances, &mut rng, false, |zt, zs, l, cfg, _| {
            let r = wdcd_frame(zt, zs, l, cfg).expect("valid frame");
            (r.value, r.grad)
        }),
        loss_check("wce", instances, &mut rng, false, |_, zs, l, _, w| {
            let r = weighted_cross_entropy(zs, l, w).expect("valid frame");
            (r.value, r.grad)
        }),
        loss_check("lovasz", instances, &mut rng, true, |_, zs, l, _, _| {
            let r = lovasz_softmax(zs, l, &[0, 1, 2, 3]).expect("valid frame");
            (r.value, r.grad)
        }),
        loss_check("total", instances, &mut rng, true, |zt, zs, l, cfg, w| {
            let r = total_loss(zs, Some(zt), l, cfg, w, &[1, 2, 3]).expect("valid frame");
            (r.total.value, r.total.grad)
        }),
        conv_check(instances, &mut rng),
        relu_check(instances, &mut rng),
        dysample_check(instances, &mut rng),
        segnet_check(instances, &mut rng),
    ]
}

/// Zero-offset DySample against plain bilinear upsampling, in `f32` and `f64`.
pub fn dysample_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for i in 0..instances {
        let s = 2 + i % 3;
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = rand_tensor(&mut rng, c, h, w, 1.0);
        let d = DySample::<f64>::zeros(c, s, 0.25);
        let a = d.forward(&x).expect("shapes").0;
        let b = bilinear_upsample(&x, s);
        let xf = Tensor3::<f32>::from_f64(c, h, w, &x.data).expect("sized");
        let af = DySample::<f32>::zeros(c, s, 0.25).forward(&xf).expect("shapes").0;
        let bf = bilinear_upsample(&xf, s);
        for (u, v) in a.data.iter().zip(&b.data) {
            max_error = max_error.max((u - v).abs());
        }
        for (u, v) in af.data.iter().zip(&bf.data) {
            max_error = max_error.max((*u as f64 - *v as f64).abs());
        }
    }
    SuiteReport {
        name: "dysample".into(),
        instances,
        max_error,
        threshold: DYSAMPLE_TOL,
    }
}

/// Jaccard loss `1 - |M ∩ P| / |M ∪ P|` of predicting set `pred`.
fn jaccard_loss(fg: &[bool], pred: &[bool]) -> f64 {
    let inter = fg.iter().zip(pred).filter(|(a, b)| **a && **b).count();
    let union = fg.iter().zip(pred).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Lovász extension evaluated directly from the Jaccard set function on the
/// nested sets of largest errors.
fn lovasz_by_definition(zs: &LogitGrid, labels: &CellLabelGrid, classes: &[u8]) -> f64 {
    let cells: Vec<usize> = (0..labels.labels.len()).filter(|&c| labels.valid[c]).collect();
    let mut per_class = Vec::new();
    for &k in classes {
        let fg: Vec<bool> = cells.iter().map(|&c| labels.labels[c] == k).collect();
        if !fg.iter().any(|f| *f) {
            continue;
        }
        let err: Vec<f64> = cells
            .iter()
            .zip(&fg)
            .map(|(&c, &f)| {
                let p = softmax_probs(&zs.cell(c), 1.0)[k as usize];
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by(|&a, &b| err[b].total_cmp(&err[a]));
        // the mispredicted set after taking the i largest errors
        let mut mispredicted = vec![false; cells.len()];
        let mut prev = 0.0;
        let mut total = 0.0;
        for &i in &order {
            mispredicted[i] = true;
            let pred: Vec<bool> = fg.iter().zip(&mispredicted).map(|(f, m)| f != m).collect();
            let j = jaccard_loss(&fg, &pred);
            total += err[i] * (j - prev);
            prev = j;
        }
        per_class.push(total);
    }
    if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Lovász-Softmax against the set-function definition.
pub fn lovasz_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..8));
        let (_, zs, labels) = rand_frame(&mut rng, h, w);
        let classes = [0u8, 1, 2, 3];
        let a = lovasz_softmax(&zs, &labels, &classes).expect("valid").value;
        let b = lovasz_by_definition(&zs, &labels, &classes);
        max_error = max_error.max((a - b).abs());
    }
    SuiteReport {
        name: "lovasz".into(),
        instances,
        max_error,
        threshold: LOVASZ_TOL,
    }
}

pub const SUITES: [&str; 5] = ["identity", "gradcheck", "dysample", "lovasz", "all"];

/// Runs a named suite with the default instance counts and seeds.
pub fn run_suite(name: &str) -> Option<Vec<SuiteReport>> {
    let out = match name {
        "identity" => vec![identity_suite(1000, 0)],
        "gradcheck" => gradcheck_suite(20, 0),
        "dysample" => vec![dysample_suite(20, 0)],
        "lovasz" => vec![lovasz_suite(200, 0)],
        "all" => {
            let mut v = vec![identity_suite(1000, 0)];
            v.extend(gradcheck_suite(20, 0));
            v.push(dysample_suite(20, 0));
            v.push(lovasz_suite(200, 0));
            v
        }
        _ => return None,
    };
    Some(out)
}
