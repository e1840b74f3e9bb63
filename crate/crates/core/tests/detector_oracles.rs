use estf_core::detector::{
    assign_targets, build_pyramid, decode, default_ranges, detection_loss, detector_forward, diou_1d, train,
    ActionInstance, AdamW, DecodeConfig, Detector, GroundTruthInstance, HeadConfig, HeadOutput, LevelGeom, LossConfig,
    LrSchedule, ModelConfig, Targets, TrainConfig,
};
use estf_core::estf::{BackboneConfig, EstfConfig};
use estf_core::numerics::{
    grad_check, grad_check_params, read_checkpoint, CheckOptions, Parameter, Params, Tape, Tensor, TimePool,
};
use estf_core::ssm::SsmConfig;
use estf_core::synthdata::{generate, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_classes: 2,
        backbone: BackboneConfig {
            frames: 8,
            height: 8,
            width: 8,
            channels: 2,
            patch: (2, 4, 4),
            d_model: 8,
            depth: 1,
            mlp_hidden: 8,
            adapter_blocks: None,
        },
        adapter: EstfConfig {
            rank: 4,
            ssm: SsmConfig {
                d_state: 2,
                ..SsmConfig::default()
            },
            ..EstfConfig::default()
        },
        use_adapters: true,
        head: HeadConfig {
            levels: 2,
            hidden: 6,
            ..HeadConfig::default()
        },
    }
}

// ---- pyramid ----

#[test]
fn pyramid_lengths_halve() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[8, 3]));
    let levels = build_pyramid(&mut tape, x, 3, TimePool::Max).unwrap();
    let lens: Vec<usize> = levels.iter().map(|&v| tape.shape(v)[0]).collect();
    assert_eq!(lens, vec![8, 4, 2]);
    let single = build_pyramid(&mut tape, x, 1, TimePool::Max).unwrap();
    assert_eq!(single, vec![x]);
    assert!(build_pyramid(&mut tape, x, 5, TimePool::Max).is_err());
}

#[test]
fn pyramid_matches_windowed_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [4usize, 7, 11, 16] {
        let c = 3;
        let x = Tensor::uniform(&[t, c], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let levels = build_pyramid(&mut tape, xv, 3, TimePool::Max).unwrap();
        let mut expect: Vec<Vec<f64>> = (0..t).map(|i| x.data()[i * c..(i + 1) * c].to_vec()).collect();
        for level in &levels[1..] {
            expect = expect
                .chunks(2)
                .map(|w| (0..c).map(|j| w.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect())
                .collect();
            let got = tape.value(*level);
            assert_eq!(got.shape(), &[expect.len(), c]);
            assert_eq!(got.data(), expect.concat().as_slice());
        }
    }
}

// ---- head and decoding ----

#[test]
fn zero_head_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Detector::init(&tiny_model(), &mut rng).unwrap();
    model.head.visit_mut("", &mut |_, p| p.value = Tensor::zeros(p.value.shape()));
    let tokens = Tensor::uniform(&[model.grid().tokens(), 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(tokens);
    let out = detector_forward(&mut tape, x, &model).unwrap();
    assert_eq!(tape.shape(out.cls), &[4 + 2, 3]);
    assert!(tape.value(out.cls).data().iter().all(|&v| v == 0.0));
    let ln2 = 2f64.ln();
    assert!(tape.value(out.reg).data().iter().all(|&v| (v - ln2).abs() < 1e-15));
}

#[test]
fn background_bias_sets_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Detector::init(&ModelConfig::default(), &mut rng).unwrap();
    let b = &model.head.b_cls.value;
    let c = b.numel() - 1;
    let z: f64 = b.data().iter().map(|v| v.exp()).sum();
    for k in 0..c {
        assert!((b.data()[k].exp() / z - 0.01).abs() < 1e-12);
    }
}

#[test]
fn decode_hand_fixture() {
    // one level of two steps, 16 frames per step at 4 fps: stride 4 s,
    // centres at 2 s and 6 s
    let levels = [LevelGeom {
        len: 2,
        stride_frames: 16,
    }];
    let cls = Tensor::new(&[2, 3], vec![4f64.ln(), 0.0, 0.0, 0.0, 2f64.ln(), 0.0]).unwrap();
    let reg = Tensor::new(&[2, 2], vec![0.25, 0.5, 0.5, 0.25]).unwrap();
    let out = decode(&cls, &reg, &levels, 4.0, 8.0, &DecodeConfig::default());
    let expect = [
        (1.0, 4.0, 0, 4.0 / 6.0),
        (4.0, 7.0, 1, 0.5),
        (4.0, 7.0, 0, 0.25),
        (1.0, 4.0, 1, 1.0 / 6.0),
    ];
    assert_eq!(out.len(), expect.len());
    for (a, &(s, e, l, p)) in out.iter().zip(&expect) {
        assert_eq!((a.t_start, a.t_end, a.label), (s, e, l));
        assert!((a.score - p).abs() < 1e-15, "{a:?}");
    }
}

#[test]
fn decode_clips_to_video() {
    let levels = [LevelGeom {
        len: 1,
        stride_frames: 16,
    }];
    let cls = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
    let reg = Tensor::new(&[1, 2], vec![3.0, 3.0]).unwrap();
    let out = decode(&cls, &reg, &levels, 4.0, 3.0, &DecodeConfig::default());
    assert_eq!((out[0].t_start, out[0].t_end), (0.0, 3.0));
}

proptest! {
    #[test]
    fn decoded_segments_are_well_ordered(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = [LevelGeom { len: 8, stride_frames: 2 }, LevelGeom { len: 4, stride_frames: 4 }];
        let cls = Tensor::uniform(&[12, 4], 3.0, &mut rng);
        let reg = Tensor::uniform(&[12, 2], 4.0, &mut rng).map(|v| v.abs() + 1e-3);
        for a in decode(&cls, &reg, &levels, 4.0, 4.0, &DecodeConfig::default()) {
            prop_assert!(a.t_end > a.t_start);
            prop_assert!(a.t_start >= 0.0 && a.t_end <= 4.0);
            prop_assert!((0.0..=1.0).contains(&a.score));
        }
    }
}

// ---- assignment ----

fn pyramid_geometry() -> Vec<LevelGeom> {
    vec![
        LevelGeom {
            len: 16,
            stride_frames: 2,
        },
        LevelGeom {
            len: 8,
            stride_frames: 4,
        },
        LevelGeom {
            len: 4,
            stride_frames: 8,
        },
    ]
}

#[test]
fn whole_video_gt_on_one_level() {
    let levels = [LevelGeom {
        len: 16,
        stride_frames: 2,
    }];
    let gt = [GroundTruthInstance {
        t_start: 0.0,
        t_end: 8.0,
        label: 3,
    }];
    let t = assign_targets(&gt, &levels, 4.0, &default_ranges(1));
    assert!(t.labels.iter().all(|&l| l == Some(3)));
    for (i, off) in t.offsets.iter().enumerate() {
        let tau = (i as f64 + 0.5) * 0.5;
        assert_eq!(*off, [tau / 0.5, (8.0 - tau) / 0.5]);
    }
}

#[test]
fn no_gts_means_background() {
    let t = assign_targets(&[], &pyramid_geometry(), 4.0, &default_ranges(3));
    assert_eq!(t.labels.len(), 28);
    assert!(t.positives().is_empty());
}

fn random_gts(rng: &mut ChaCha8Rng, duration: f64) -> Vec<GroundTruthInstance> {
    let n = rng.random_range(0..5);
    (0..n)
        .map(|_| {
            let a = (rng.random_range(0.0..duration) * 4.0).round() / 4.0;
            let len = (rng.random_range(0.25..duration / 2.0) * 4.0).round() / 4.0 + 0.25;
            GroundTruthInstance {
                t_start: a,
                t_end: (a + len).min(duration),
                label: rng.random_range(0..4),
            }
        })
        .filter(|g| g.t_end > g.t_start)
        .collect()
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels = pyramid_geometry();
    let ranges = default_ranges(3);
    for _ in 0..200 {
        let gts = random_gts(&mut rng, 8.0);
        let got = assign_targets(&gts, &levels, 4.0, &ranges);
        let mut row = 0;
        for (lv, &(lo, hi)) in levels.iter().zip(&ranges) {
            let stride = lv.stride_frames as f64 / 4.0;
            for t in 0..lv.len {
                let tau = (t as f64 + 0.5) * stride;
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.t_start <= tau && tau <= g.t_end)
                    .filter(|(_, g)| {
                        let m = (tau - g.t_start).max(g.t_end - tau) / stride;
                        lo <= m && m < hi
                    })
                    .min_by(|(i, a), (j, b)| (a.t_end - a.t_start).total_cmp(&(b.t_end - b.t_start)).then(i.cmp(j)));
                match best {
                    Some((_, g)) => {
                        assert_eq!(got.labels[row], Some(g.label));
                        assert_eq!(got.offsets[row], [(tau - g.t_start) / stride, (g.t_end - tau) / stride]);
                    }
                    None => assert_eq!(got.labels[row], None),
                }
                row += 1;
            }
        }
    }
}

// ---- losses ----

fn head_output(tape: &mut Tape, cls: Tensor, reg: Tensor, levels: Vec<LevelGeom>) -> HeadOutput {
    HeadOutput {
        cls: tape.leaf(cls),
        reg: tape.leaf(reg),
        levels,
    }
}

#[test]
fn perfect_predictions_have_tiny_loss() {
    let levels = pyramid_geometry();
    let gts = [
        GroundTruthInstance {
            t_start: 1.0,
            t_end: 2.5,
            label: 1,
        },
        GroundTruthInstance {
            t_start: 4.0,
            t_end: 8.0,
            label: 2,
        },
    ];
    let targets = assign_targets(&gts, &levels, 4.0, &default_ranges(3));
    assert!(!targets.positives().is_empty());
    let m = targets.labels.len();
    let cls = Tensor::from_fn(&[m, 5], |i| {
        let (r, k) = (i / 5, i % 5);
        if k == targets.labels[r].unwrap_or(4) {
            30.0
        } else {
            0.0
        }
    });
    let reg = Tensor::from_fn(&[m, 2], |i| {
        let off = targets.offsets[i / 2][i % 2];
        if targets.labels[i / 2].is_some() {
            off
        } else {
            1.0
        }
    });
    let mut tape = Tape::new();
    let out = head_output(&mut tape, cls, reg, levels);
    let parts = detection_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
    let total = tape.value(parts.total).item();
    assert!((0.0..1e-3).contains(&total), "{total}");
    assert_eq!(parts.reg, 0.0);
}

#[test]
fn all_background_has_zero_regression() {
    let levels = pyramid_geometry();
    let targets = assign_targets(&[], &levels, 4.0, &default_ranges(3));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let out = head_output(
        &mut tape,
        Tensor::uniform(&[28, 5], 1.0, &mut rng),
        Tensor::uniform(&[28, 2], 1.0, &mut rng).map(f64::abs),
        levels,
    );
    let parts = detection_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
    assert_eq!(parts.reg, 0.0);
    assert_eq!(parts.n_pos, 0);
    assert!(parts.cls > 0.0);
}

#[test]
fn diou_examples() {
    assert_eq!(diou_1d([1.0, 2.0], [1.0, 2.0]), 0.0);
    // pred [-1, 1] vs gt [-1, 3] around the same centre: IoU 1/2, rho = 1, c = 4
    assert!((diou_1d([1.0, 1.0], [1.0, 3.0]) - (0.5 + 1.0 / 16.0)).abs() < 1e-15);
}

#[test]
fn focal_and_diou_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = vec![0, 3, 2, 3, 1, 3];
    let cfg = LossConfig::default();
    let logits = Tensor::uniform(&[6, 4], 2.0, &mut rng);
    let r = grad_check(|t, v| t.focal_loss(v[0], &labels, 3, &cfg), &[logits], CheckOptions::default()).unwrap();
    assert!(r.passed(), "{r:?}");
    let pred = Tensor::uniform(&[5, 2], 1.0, &mut rng).map(|v| v.abs() + 0.1);
    let gt = Tensor::uniform(&[5, 2], 1.0, &mut rng).map(|v| v.abs() + 0.1);
    let r = grad_check(|t, v| t.diou_loss(v[0], &gt), &[pred], CheckOptions::default()).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn detection_loss_gradcheck_over_trainable_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = Detector::init(&tiny_model(), &mut rng).unwrap();
    // move the up-projections off zero so every adapter weight gets gradient
    for a in model.adapters.iter_mut().flatten() {
        a.w_up.value = Tensor::uniform(a.w_up.value.shape(), 0.3, &mut rng);
    }
    let tokens = Tensor::uniform(&[model.grid().tokens(), 8], 1.0, &mut rng);
    let gts = [
        GroundTruthInstance {
            t_start: 0.25,
            t_end: 1.25,
            label: 1,
        },
        GroundTruthInstance {
            t_start: 0.75,
            t_end: 2.0,
            label: 0,
        },
    ];
    let targets = assign_targets(&gts, &model.levels(), 4.0, &default_ranges(2));
    assert!(!targets.positives().is_empty());
    let report = grad_check_params(
        &mut model,
        |tape, m| {
            let x = tape.constant(tokens.clone());
            let out = detector_forward(tape, x, m)?;
            Ok(detection_loss(tape, &out, &targets, &LossConfig::default())?.total)
        },
        CheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.entries_checked > 100);
}

proptest! {
    #[test]
    fn loss_is_non_negative(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = pyramid_geometry();
        let gts = random_gts(&mut rng, 8.0);
        let targets: Targets = assign_targets(&gts, &levels, 4.0, &default_ranges(3));
        let mut tape = Tape::new();
        let out = head_output(
            &mut tape,
            Tensor::uniform(&[28, 5], 4.0, &mut rng),
            Tensor::uniform(&[28, 2], 3.0, &mut rng).map(|v| v.abs() + 1e-3),
            levels,
        );
        let parts = detection_loss(&mut tape, &out, &targets, &LossConfig::default()).unwrap();
        prop_assert!(parts.cls >= 0.0 && parts.reg >= 0.0);
    }
}

// ---- optimiser ----

#[test]
fn schedule_warmup_and_cosine() {
    let s = LrSchedule {
        base_lr: 1e-4,
        warmup_steps: 10,
        total_steps: 100,
    };
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(5) - 5e-5).abs() < 1e-18);
    assert_eq!(s.lr_at(10), 1e-4);
    assert!((s.lr_at(55) - 5e-5).abs() < 1e-15);
    assert!(s.lr_at(100).abs() < 1e-20);
    for k in 10..100 {
        assert!(s.lr_at(k + 1) <= s.lr_at(k));
    }
}

#[test]
fn adamw_first_step_and_decay_scope() {
    let mut v = vec![
        Parameter::trainable(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()),
        Parameter::trainable(Tensor::new(&[2], vec![1.0, 1.0]).unwrap()),
        Parameter::frozen(Tensor::new(&[2], vec![1.0, 1.0]).unwrap()),
    ];
    v[0].grad = Some(Tensor::new(&[1, 2], vec![0.5, -2.0]).unwrap());
    v[1].grad = Some(Tensor::new(&[2], vec![0.0, 3.0]).unwrap());
    let mut opt = AdamW::default();
    opt.step(&mut v, 0.1);
    // bias-corrected first step is lr * sign(g); decay only on the matrix
    let m = v[0].value.data();
    assert!((m[0] - (1.0 - 0.1 * (1.0 + 0.01))).abs() < 1e-6);
    assert!((m[1] - (1.0 + 0.1 - 0.1 * 0.01)).abs() < 1e-6);
    assert_eq!(v[1].value.data()[0], 1.0);
    assert!((v[1].value.data()[1] - 0.9).abs() < 1e-6);
    assert_eq!(v[2].value.data(), &[1.0, 1.0]);
}

// ---- training ----

fn tiny_run() -> (estf_core::detector::Dataset, TrainConfig) {
    let data = generate(&SynthSpec {
        n_videos: 6,
        frames: 16,
        height: 8,
        width: 8,
        channels: 2,
        n_classes: 2,
        actions_per_video: (1, 2),
        duration_frames: (3, 6),
        ..SynthSpec::default()
    })
    .unwrap();
    let mut model = tiny_model();
    model.backbone.frames = 16;
    model.head.levels = 3;
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        epochs: 3,
        warmup_epochs: 1,
        val_fraction: 0.34,
        model,
        ..TrainConfig::default()
    };
    (data, cfg)
}

#[test]
fn training_is_deterministic_and_keeps_backbone_frozen() {
    let (data, cfg) = tiny_run();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut epochs = 0;
    let first = train(&data, &cfg, Some(&a), &mut |_| epochs += 1).unwrap();
    let second = train(&data, &cfg, Some(&b), &mut |_| {}).unwrap();
    assert_eq!(epochs, 3);
    assert_eq!(first.log, second.log);
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    let csv = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss_cls,loss_reg,mAP"));
    assert_eq!(csv.lines().count(), 4);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Detector::init(&cfg.model, &mut rng).unwrap();
    let mut frozen = Vec::new();
    init.visit("", &mut |name, p| {
        if !p.requires_grad {
            frozen.push((name.to_string(), p.value.clone()));
        }
    });
    assert!(!frozen.is_empty());
    let mut checked = 0;
    let mut changed_trainable = false;
    let saved = read_checkpoint(&a.join("model.ckpt")).unwrap();
    first.model.visit("", &mut |name, p| {
        if p.requires_grad {
            let before = saved.iter().find(|(n, _)| n == name).unwrap();
            assert_eq!(&before.1, &p.value);
            changed_trainable |= init_value(&init, name) != p.value;
        } else {
            assert!(p.grad.is_none(), "{name} has a gradient buffer");
            let orig = &frozen.iter().find(|(n, _)| n == name).unwrap().1;
            let same = orig.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} changed");
            checked += 1;
        }
    });
    assert_eq!(checked, frozen.len());
    assert!(changed_trainable);
}

fn init_value(model: &Detector, name: &str) -> Tensor {
    let mut out = None;
    model.visit("", &mut |n, p| {
        if n == name {
            out = Some(p.value.clone());
        }
    });
    out.unwrap()
}

#[test]
fn training_rejects_bad_config() {
    let (data, mut cfg) = tiny_run();
    cfg.batch_size = 0;
    assert!(train(&data, &cfg, None, &mut |_| {}).is_err());
}

#[test]
fn blown_up_training_aborts_as_divergence() {
    let (data, mut cfg) = tiny_run();
    cfg.lr = 1e200;
    cfg.warmup_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    match train(&data, &cfg, Some(dir.path()), &mut |_| {}) {
        Err(e @ estf_core::Error::Diverged { .. }) => {
            assert!(e.is_numeric());
            assert!(e.to_string().contains("last_good.ckpt"));
            assert!(dir.path().join("last_good.ckpt").exists());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn instances_serialize_with_plain_fields() {
    let a = ActionInstance {
        t_start: 1.0,
        t_end: 2.0,
        label: 1,
        score: 0.5,
    };
    let back: ActionInstance = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(a, back);
}

#[test]
fn shared_gradcheck_suite_passes() {
    let checks = estf_core::detector::module_gradchecks("all", 0).unwrap();
    for m in estf_core::detector::CHECK_MODULES {
        assert!(checks.iter().any(|c| c.module == m));
    }
    for c in &checks {
        assert!(c.report.passed(), "{} {}: {:?}", c.module, c.case, c.report);
    }
    assert!(estf_core::detector::module_gradchecks("bogus", 0).is_err());
}
