use kdmos_core::bev::{BevConfig, BevGrid};
use kdmos_core::kitti_io::{load_sequence, write_sequence, SequenceDir};
use kdmos_core::losses::{total_loss, DistillConfig};
use kdmos_core::nnet::{checkpoint_from_bytes, checkpoint_to_bytes, SegNet};
use kdmos_core::synthbench::{gen_sequence, SceneConfig};
use kdmos_core::teacher_bridge::synth_teacher;
use kdmos_core::train::{
    attach_teacher, evaluate, logits_from_output, predict_cells, samples_from_sequence, train, Sample,
    TeacherSource, TrainConfig,
};

fn small_bev() -> BevConfig {
    BevConfig {
        grid: BevGrid::polar(8, 32, 45.0).unwrap(),
        ..BevConfig::default()
    }
}

fn samples(seed: u64, frames: usize) -> Vec<Sample> {
    let seq = gen_sequence(&SceneConfig {
        n_frames: frames,
        seed,
        ..SceneConfig::default()
    })
    .unwrap();
    samples_from_sequence(&seq.to_loaded(), &small_bev()).unwrap()
}

fn bits(net: &SegNet<f32>) -> Vec<u32> {
    net.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn disk_sequence_projects_like_reloaded_copy() {
    let dir = tempfile::tempdir().unwrap();
    let seq = gen_sequence(&SceneConfig {
        n_frames: 9,
        ..SceneConfig::default()
    })
    .unwrap();
    let a = SequenceDir::new(dir.path().join("a"));
    write_sequence(&a, &seq.to_loaded()).unwrap();
    let first = load_sequence(&a).unwrap();
    let b = SequenceDir::new(dir.path().join("b"));
    write_sequence(&b, &first).unwrap();
    let second = load_sequence(&b).unwrap();
    let sa = samples_from_sequence(&first, &small_bev()).unwrap();
    let sb = samples_from_sequence(&second, &small_bev()).unwrap();
    assert_eq!(sa.len(), 2);
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.input, y.input);
        assert_eq!(x.labels, y.labels);
    }
}

#[test]
fn noiseless_matching_teacher_adds_no_gradient() {
    let s = &samples(3, 8)[0];
    let teacher = synth_teacher(&s.labels, 10.0, 0.0, 1).unwrap();
    let w = [0.0, 1.0, 1.0, 1.0];
    let with = total_loss(&teacher, Some(&teacher), &s.labels, &DistillConfig::default(), &w, &[1, 2, 3]).unwrap();
    let without = total_loss(&teacher, None, &s.labels, &DistillConfig::default(), &w, &[1, 2, 3]).unwrap();
    assert_eq!(with.wdcd, 0.0);
    for (a, b) in with.total.grad.iter().zip(&without.total.grad) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn training_is_independent_of_thread_count() {
    let mut set = samples(1, 12);
    attach_teacher(
        &mut set,
        &TeacherSource::Synth {
            kappa: 10.0,
            sigma: 1.0,
            seed: 0,
        },
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&set, &[], &cfg, |_| {}).unwrap())
    };
    let (a, la) = run(1);
    let (b, lb) = run(3);
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(la, lb);
    assert!(la.iter().all(|l| l.wdcd > 0.0));
}

#[test]
fn checkpoint_preserves_predictions() {
    let set = samples(2, 10);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (net, _) = train(&set, &[], &cfg, |_| {}).unwrap();
    let back = checkpoint_from_bytes::<f32>(&checkpoint_to_bytes(&net)).unwrap();
    for s in &set {
        assert_eq!(predict_cells(&net, s).unwrap(), predict_cells(&back, s).unwrap());
    }
    assert_eq!(evaluate(&net, &set).unwrap(), evaluate(&back, &set).unwrap());
}

#[test]
fn f64_copy_of_trained_net_agrees() {
    let set = samples(4, 8);
    let (net, _) = train(&set, &[], &TrainConfig { epochs: 1, ..TrainConfig::default() }, |_| {}).unwrap();
    let wide = net.cast::<f64>();
    let s = &set[0];
    let narrow_out = net.forward(&s.input).unwrap();
    let x64 = kdmos_core::nnet::Tensor3::<f64>::from_vec(s.input.c, s.input.h, s.input.w, s.input.to_f64()).unwrap();
    let wide_out = wide.forward(&x64).unwrap();
    let a = logits_from_output(&narrow_out, &s.labels.valid);
    let scale = wide_out.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (u, v) in a.scores.iter().zip(
        (0..s.labels.height * s.labels.width).flat_map(|c| (0..4).map(move |k| (c, k))).map(|(c, k)| {
            wide_out.data[k * s.labels.height * s.labels.width + c]
        }),
    ) {
        assert!((u - v).abs() <= 1e-4 * scale, "{u} vs {v}");
    }
}
