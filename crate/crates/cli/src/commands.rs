use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use kdmos_core::bev::{cell_labels_to_bytes, motion_to_bytes, project_frame, project_sequence, write_pgm};
use kdmos_core::config::RunConfig;
use kdmos_core::eval::{ConfusionMatrix, MetricsReport};
use kdmos_core::kitti_io::{load_sequence, write_sequence, SequenceDir};
use kdmos_core::nnet::{read_checkpoint, write_checkpoint, ArchSpec, SegNet};
use kdmos_core::synthbench::{gen_sequence, SceneConfig};
use kdmos_core::teacher_bridge::{logits_file_name, write_logits};
use kdmos_core::train::{
    attach_teacher, evaluate, load_samples, logits_from_output, sequence_classes,
    split_holdout, train, Sample, TeacherSource,
};
use kdmos_core::verify::run_suite;

use crate::failure::{io_failure, Failure, Result};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir.display(), e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_failure(path.display(), e))
}

pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = gen_sequence(&cfg.scene)?;
    let dir = SequenceDir::new(out);
    write_sequence(&dir, &seq.to_loaded())?;
    eprintln!("wrote {} frames to {}", seq.frames.len(), out.display());
    Ok(())
}

pub fn project(cfg: &RunConfig, seq_dir: &Path, out: &Path, render: bool) -> Result<()> {
    let seq = load_sequence(&SequenceDir::new(seq_dir))?;
    let classes = sequence_classes(&seq);
    let frames = project_sequence(&seq.frames, &seq.poses, &classes, &cfg.bev)?;
    create_dir(out)?;
    let render_dir = out.join("render");
    if render {
        create_dir(&render_dir)?;
    }
    for f in &frames {
        let id = f.frame_id;
        write_file(&out.join(format!("{id:06}.motion")), motion_to_bytes(&f.motion))?;
        write_file(&out.join(format!("{id:06}.cells")), cell_labels_to_bytes(&f.labels))?;
        if render {
            for k in 0..f.motion.n_channels {
                let path = render_dir.join(format!("{id:06}_{k}.pgm"));
                write_pgm(&path, f.motion.channel(k), f.motion.height, f.motion.width)?;
            }
        }
    }
    println!("frames={}", seq.frames.len());
    println!("projected={}", frames.len());
    Ok(())
}

/// `synth` alone uses the config's teacher settings.
fn teacher_source(spec: &str, cfg: &RunConfig) -> Result<TeacherSource> {
    let src = if spec == "synth" {
        TeacherSource::Synth {
            kappa: cfg.teacher.kappa,
            sigma: cfg.teacher.sigma,
            seed: cfg.teacher.seed,
        }
    } else {
        spec.parse().map_err(Failure::Config)?
    };
    Ok(match src {
        TeacherSource::Synth { kappa, sigma, .. } => TeacherSource::Synth {
            kappa,
            sigma,
            seed: cfg.teacher.seed,
        },
        other => other,
    })
}

pub fn cmd_train(cfg: &RunConfig, seq_dir: &Path, teacher: &str, out: &Path, log: Option<&Path>) -> Result<()> {
    let source = teacher_source(teacher, cfg)?;
    let mut tc = cfg.train.clone();
    if source == TeacherSource::None {
        tc.distill.gamma = 0.0;
    }
    let mut samples = load_samples(seq_dir, &cfg.bev)?;
    samples.retain(|s| s.labels.n_valid() > 0);
    attach_teacher(&mut samples, &source, 0)?;
    let (train_set, holdout) = split_holdout(samples, cfg.holdout);
    eprintln!(
        "training {} on {} frames, {} held out, teacher {teacher}",
        tc.arch,
        train_set.len(),
        holdout.len()
    );
    let mut lines = String::new();
    let (net, _) = train(&train_set, &holdout, &tc, |l| {
        println!("{l}");
        let _ = writeln!(lines, "{l}");
    })?;
    if let Some(path) = log {
        write_file(path, &lines)?;
    }
    write_checkpoint(&net, out).map_err(|e| Failure::Config(format!("{}: {e}", out.display())))?;
    eprintln!("wrote checkpoint {}", out.display());
    Ok(())
}

fn load_net(ckpt: &Path) -> Result<SegNet<f32>> {
    read_checkpoint::<f32>(ckpt).map_err(|e| {
        let f: Failure = e.into();
        match f {
            Failure::Parse(m) => Failure::Parse(format!("{}: {m}", ckpt.display())),
            other => Failure::Config(format!("{}: {other}", ckpt.display())),
        }
    })
}

pub fn eval(cfg: &RunConfig, seq_dir: &Path, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let samples = load_samples(seq_dir, &cfg.bev)?;
    let report = match ckpt {
        Some(path) => evaluate(&load_net(path)?, &samples)?,
        // ground truth scored against itself at both levels
        None => {
            let mut cell = ConfusionMatrix::new();
            let mut point = ConfusionMatrix::new();
            for s in &samples {
                cell.accumulate_default(&s.labels.labels, &s.labels.labels)
                    .and_then(|_| point.accumulate_default(&s.point_classes, &s.point_classes))
                    .map_err(|e| Failure::Parse(e.to_string()))?;
            }
            MetricsReport::new(cell, point)
        }
    };
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(())
}

pub fn verify(suite: &str) -> Result<()> {
    let reports = run_suite(suite).ok_or_else(|| Failure::Config(format!("unknown suite {suite:?}")))?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("failed: {}", failed.join(", "))))
    }
}

fn stats_ms(times: &mut [f64]) -> (f64, f64, f64) {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let mean = times.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    // nearest rank
    let p99 = times[((0.99 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (mean * 1e3, median * 1e3, p99 * 1e3)
}

/// Throughput of projection and student inference. Timing keys end in
/// `_ms` or `_fps`; everything else is deterministic.
pub fn bench(cfg: &RunConfig, seq_dir: Option<&Path>, ckpt: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let k = cfg.bench.frames;
    let seq = match seq_dir {
        Some(dir) => load_sequence(&SequenceDir::new(dir))?,
        None => {
            let s = &cfg.scene;
            let disc_points = (s.n_moving + s.n_static_movable) * s.points_per_disc;
            let scene = SceneConfig {
                n_frames: cfg.bev.window - 1 + k,
                n_static: cfg.bench.points.saturating_sub(disc_points),
                ..s.clone()
            };
            gen_sequence(&scene)?.to_loaded()
        }
    };
    let classes = sequence_classes(&seq);
    let first = cfg.bev.window - 1;
    if seq.frames.len() <= first {
        return Err(Failure::Config(format!(
            "sequence has {} frames, need more than {first}",
            seq.frames.len()
        )));
    }
    let net = match ckpt {
        Some(p) => load_net(p)?,
        None => SegNet::<f32>::init(
            &ArchSpec::resolve(&cfg.train.arch, cfg.bev.input_channels())?,
            cfg.train.seed,
        ),
    };
    let mut proj_t = Vec::with_capacity(k);
    let mut infer_t = Vec::with_capacity(k);
    let mut points = 0usize;
    let mut assigned = 0usize;
    for i in 0..k {
        let cur = first + i % (seq.frames.len() - first);
        let t0 = Instant::now();
        let frame = project_frame(&seq.frames, &seq.poses, cur, &classes[cur], &cfg.bev)?;
        proj_t.push(t0.elapsed().as_secs_f64());
        points += seq.frames[cur].len();
        assigned += frame.cells.n_assigned();
        let sample = Sample::from_projected(frame)?;
        let t1 = Instant::now();
        net.forward(&sample.input)?;
        infer_t.push(t1.elapsed().as_secs_f64());
    }
    let (pm, pmed, p99) = stats_ms(&mut proj_t);
    let (im, imed, i99) = stats_ms(&mut infer_t);
    let mut text = String::new();
    let _ = writeln!(text, "frames={k}");
    let _ = writeln!(text, "threads={}", rayon::current_num_threads());
    let _ = writeln!(text, "mean_points={:.1}", points as f64 / k as f64);
    let _ = writeln!(text, "mean_assigned_points={:.1}", assigned as f64 / k as f64);
    let _ = writeln!(text, "grid={}x{}", cfg.bev.grid.height(), cfg.bev.grid.width());
    let _ = writeln!(text, "window={}", cfg.bev.window);
    let _ = writeln!(text, "net_params={}", net.n_params());
    let _ = writeln!(text, "project_mean_ms={pm:.3}");
    let _ = writeln!(text, "project_median_ms={pmed:.3}");
    let _ = writeln!(text, "project_p99_ms={p99:.3}");
    let _ = writeln!(text, "infer_mean_ms={im:.3}");
    let _ = writeln!(text, "infer_median_ms={imed:.3}");
    let _ = writeln!(text, "infer_p99_ms={i99:.3}");
    let _ = writeln!(text, "project_fps={:.2}", 1e3 / pm);
    let _ = writeln!(text, "infer_fps={:.2}", 1e3 / im);
    let _ = writeln!(text, "total_fps={:.2}", 1e3 / (pm + im));
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(text)
}

pub fn export_logits(cfg: &RunConfig, ckpt: &Path, seq_dir: &Path, out: &Path) -> Result<()> {
    let net = load_net(ckpt)?;
    let samples = load_samples(seq_dir, &cfg.bev)?;
    create_dir(out)?;
    for s in &samples {
        let y = net.forward(&s.input)?;
        let grid = logits_from_output(&y, &s.labels.valid);
        if !grid.is_finite() {
            return Err(Failure::Numeric(format!("non-finite logits at frame {}", s.frame_id)));
        }
        write_logits(&grid, out.join(logits_file_name(s.frame_id)))?;
    }
    println!("exported={}", samples.len());
    Ok(())
}
