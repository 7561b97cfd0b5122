mod support;

use std::collections::VecDeque;

use constyle_core::degrade::PolicyConfig;
use constyle_core::prompter::*;
use constyle_core::ImageTensor;
use rand::Rng;
use support::{random_unit, rng};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 16,
        stages: vec![
            ConvStage { channels: 6, stride: 2 },
            ConvStage { channels: 8, stride: 2 },
        ],
        latent_dim: 12,
        num_classes: 10,
        ..EncoderConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        total_iters: 20,
        batch_size: 6,
        queue_capacity: 24,
        ..TrainConfig::default()
    }
}

fn toy_batch(n: usize, size: usize) -> (Vec<ImageTensor>, Vec<usize>) {
    let d = ToyDataset::generate(1, size, 42).unwrap();
    (d.images[..n].to_vec(), d.labels[..n].to_vec())
}

fn l2_dist(a: &EncoderState, b: &EncoderState) -> f64 {
    a.iter()
        .map(|(k, p)| {
            let q = b.get(k).unwrap();
            p.data
                .iter()
                .zip(&q.data)
                .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

#[test]
fn ema_scalar_formula() {
    let mut t = EncoderState::default();
    t.insert("w", ParamTensor::new(vec![1], vec![1.0]).unwrap());
    let mut s = EncoderState::default();
    s.insert("w", ParamTensor::new(vec![1], vec![0.0]).unwrap());
    let out = momentum_update(&t, &s, 0.999).unwrap();
    assert_eq!(out.get("w").unwrap().data[0], 0.999f32);
}

#[test]
fn ema_matches_external_shadow() {
    let cfg = small_encoder();
    let t = EncoderState::init(&cfg, 1).unwrap();
    let s = EncoderState::init(&cfg, 2).unwrap();
    for m in [0.0, 0.3, 0.9, 0.999, 1.0] {
        let out = momentum_update(&t, &s, m).unwrap();
        for (name, p) in out.iter() {
            let (a, b) = (&t.get(name).unwrap().data, &s.get(name).unwrap().data);
            for i in 0..p.data.len() {
                let want = (m * f64::from(a[i]) + (1.0 - m) * f64::from(b[i])) as f32;
                assert_eq!(p.data[i], want, "{name}[{i}] at m={m}");
            }
        }
    }
    assert!(momentum_update(&t, &s, 1.5).is_err());
}

#[test]
fn ema_distance_never_grows_with_frozen_student() {
    let cfg = small_encoder();
    let s = EncoderState::init(&cfg, 3).unwrap();
    for m in [0.5, 0.9, 0.999] {
        let mut t = EncoderState::init(&cfg, 4).unwrap();
        let mut prev = l2_dist(&t, &s);
        for _ in 0..60 {
            t = momentum_update(&t, &s, m).unwrap();
            let d = l2_dist(&t, &s);
            assert!(d <= prev, "distance grew from {prev} to {d} at m={m}");
            prev = d;
        }
    }
}

#[test]
fn queue_matches_list_shadow() {
    let mut r = rng(8);
    for capacity in [1, 2, 7, 64] {
        let d = 3;
        let mut q = NegativeQueue::new(capacity, d).unwrap();
        let mut shadow: VecDeque<Vec<f64>> = VecDeque::new();
        for _ in 0..2_500 {
            if r.random_bool(0.8) {
                let k = random_unit(&mut r, d);
                q.enqueue(&k).unwrap();
                shadow.push_back(k);
                if shadow.len() > capacity {
                    shadow.pop_front();
                }
            }
            assert_eq!(q.len(), shadow.len());
            assert!(q.len() <= capacity);
            assert!(q.iter().eq(shadow.iter().map(Vec::as_slice)));
        }
    }
}

#[test]
fn prompt_bundle_contract() {
    let cfg = small_encoder();
    let st = EncoderState::init(&cfg, 5).unwrap();
    let data = ToyDataset::generate(2, 16, 1).unwrap();
    for img in &data.images {
        let b = encoder_forward(&st, &cfg, img).unwrap();
        let n = b.latent_code.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(b.feature_maps.len(), cfg.stages.len());
        assert_eq!(b, encoder_forward(&st, &cfg, img).unwrap());
    }
}

#[test]
fn info_nce_decreases_as_positive_aligns() {
    let mut r = rng(9);
    let d = 4;
    let mut queue = NegativeQueue::new(8, d).unwrap();
    for _ in 0..8 {
        queue.enqueue(&random_unit(&mut r, d)).unwrap();
    }
    let q = random_unit(&mut r, d);
    let other = random_unit(&mut r, d);
    // Slide k⁺ from `other` towards `q`; q·k⁺ rises monotonically.
    let mut last = f64::INFINITY;
    let mut last_dot = f64::NEG_INFINITY;
    for step in 0..=20 {
        let a = step as f64 / 20.0;
        let mut k: Vec<f64> = q.iter().zip(&other).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let n = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        k.iter_mut().for_each(|v| *v /= n);
        let dotp: f64 = q.iter().zip(&k).map(|(x, y)| x * y).sum();
        let (l, _) = info_nce(&q, &k, &queue, 0.2).unwrap();
        if dotp > last_dot {
            assert!(l < last);
        }
        last = l;
        last_dot = dotp;
    }
}

#[test]
fn zero_weights_apply_only_weight_decay() {
    let enc = small_encoder();
    let train = small_train();
    let (imgs, labels) = toy_batch(6, 16);
    let mut st = PretrainState::new(&enc, &train, 7).unwrap();
    let before = st.student.clone();
    let zero = LossWeights {
        w_infonce: 0.0,
        w_content: 0.0,
        w_ce: 0.0,
        w_kl: 0.0,
        w_style: 0.0,
    };
    pretrain_step(&mut st, &enc, &imgs, &labels, &zero, &train, &PolicyConfig::default(), 3).unwrap();
    let lr = cosine_lr(0, &train).unwrap();
    for (name, p) in st.student.iter().filter(|(k, _)| is_trainable(k)) {
        let old = &before.get(name).unwrap().data;
        for (a, b) in p.data.iter().zip(old) {
            let theta = f64::from(*b);
            assert_eq!(*a, (theta - lr * train.weight_decay * theta) as f32, "{name}");
        }
    }
}

#[test]
fn infonce_component_isolation() {
    let enc = EncoderConfig {
        use_batchnorm: false,
        ..small_encoder()
    };
    let train = TrainConfig {
        degrade: false,
        ..small_train()
    };
    let (imgs, labels) = toy_batch(6, 16);
    let mut st = PretrainState::new(&enc, &train, 11).unwrap();
    // Teacher starts as a copy and both see the clean batch, so q == k⁺.
    let weights = LossWeights {
        w_infonce: 1.0,
        w_content: 0.0,
        w_ce: 0.0,
        w_kl: 0.0,
        w_style: 0.0,
    };
    let queue = st.queue.clone();
    let q = encoder_forward_batch(&st.student, &enc, &imgs).unwrap();
    let want: f64 = q
        .iter()
        .map(|b| info_nce(&b.latent_code, &b.latent_code, &queue, train.temperature).unwrap().0)
        .sum::<f64>()
        / q.len() as f64;
    let got = pretrain_step(&mut st, &enc, &imgs, &labels, &weights, &train, &PolicyConfig::default(), 0).unwrap();
    assert!((got.total - want).abs() < 1e-12, "{} vs {want}", got.total);
    assert_eq!(got.total, got.infonce);
    assert!(got.pos_neg_gap.is_finite());
}

#[test]
fn short_loop_is_deterministic_and_logs_every_step() {
    let cfg = PretrainConfig {
        encoder: small_encoder(),
        train: small_train(),
        data: ToyDataConfig {
            per_class: 3,
            heldout_per_class: 1,
        },
        ..PretrainConfig::toy()
    };
    let data = ToyDataset::generate(3, 16, cfg.seed).unwrap();
    let run = || {
        let mut sink = Vec::new();
        let out = pretrain_loop(&data, &cfg, Some(&mut sink), None).unwrap();
        (out.log, sink, out.state)
    };
    let (log_a, bytes_a, state_a) = run();
    let (log_b, bytes_b, state_b) = run();
    assert_eq!(log_a.len(), 20);
    assert_eq!(log_a, log_b);
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(state_a, state_b);
    let text = String::from_utf8(bytes_a).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in [
        "iter",
        "lr",
        "loss_total",
        "loss_infonce",
        "loss_content",
        "loss_ce",
        "loss_kl",
        "pos_neg_gap",
    ] {
        assert!(first.get(key).is_some(), "log line lacks {key}");
    }
}

#[test]
fn checkpoints_follow_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        encoder: small_encoder(),
        train: TrainConfig {
            total_iters: 6,
            ..small_train()
        },
        ..PretrainConfig::toy()
    };
    let data = ToyDataset::generate(2, 16, 0).unwrap();
    let plan = CheckpointPlan {
        dir: dir.path().to_path_buf(),
        every: 3,
    };
    let out = pretrain_loop(&data, &cfg, None, Some(&plan)).unwrap();
    let (ck, _) = load_checkpoint(dir.path().join("checkpoint_000006.safetensors")).unwrap();
    assert_eq!(ck, out.state);
    assert!(dir.path().join("checkpoint_000003.safetensors").exists());
}

#[test]
fn export_contract() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.safetensors");
    let enc = small_encoder();
    let train = small_train();
    let (imgs, labels) = toy_batch(6, 16);
    let mut st = PretrainState::new(&enc, &train, 13).unwrap();
    for i in 0..3 {
        pretrain_step(&mut st, &enc, &imgs, &labels, &LossWeights::default(), &train, &PolicyConfig::default(), i)
            .unwrap();
    }
    export_encoder(&st.student, &enc, &path).unwrap();
    let summary = weights_summary(&path).unwrap();
    for t in &summary.tensors {
        assert!(t.name.starts_with("encoder."), "{}", t.name);
        assert!(!t.name.contains("classifier") && !t.name.contains("teacher") && !t.name.contains("queue"));
        assert_eq!(t.dtype, "F32");
    }
    let full = st.student.num_values() + st.teacher.num_values() + st.queue.len() * st.queue.dim();
    assert!(summary.total_values < full);
    let (back, cfg2) = load_encoder(&path).unwrap();
    assert_eq!(cfg2, enc);
    let probe = ToyDataset::generate(1, 16, 77).unwrap();
    for img in &probe.images {
        let a = encoder_forward(&st.student, &enc, img).unwrap();
        let b = encoder_forward(&back, &enc, img).unwrap();
        assert_eq!(a.latent_code, b.latent_code);
        assert_eq!(a.feature_maps, b.feature_maps);
    }
}

#[test]
fn nonfinite_loss_is_reported_without_mutation() {
    let enc = small_encoder();
    let train = small_train();
    let (imgs, labels) = toy_batch(6, 16);
    let mut st = PretrainState::new(&enc, &train, 1).unwrap();
    st.student.get_mut("proj.weight").unwrap().data[0] = f32::NAN;
    let snapshot = st.clone();
    let err = pretrain_step(&mut st, &enc, &imgs, &labels, &LossWeights::default(), &train, &PolicyConfig::default(), 0)
        .unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert_eq!(st.iter, snapshot.iter);
}
