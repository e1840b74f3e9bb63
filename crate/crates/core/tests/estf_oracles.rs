use estf_core::estf::{
    backbone_forward, estf_forward, patch_embed, Backbone, BackboneConfig, EstfConfig, EstfParams, FusionMode, Grid,
    TemporalStrategy, FULL_SCALE_FRAMES,
};
use estf_core::numerics::{
    count_params, grad_check_params, CheckOptions, Parameter, Params, PoolPadding, Tape, Tensor,
};
use estf_core::ssm::{tb_ssm_values, SsmConfig};
use estf_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- reference composition with plain loops on [t][h][w][c] arrays ----

#[derive(Clone, Debug, PartialEq)]
struct Vol {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Vol {
    fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Vol { t, h, w, c, v: vec![0.0; t * h * w * c] }
    }
    fn idx(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.h + h) * self.w + w) * self.c + c
    }
    fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.v[self.idx(t, h, w, c)]
    }
    fn add(&self, o: &Vol) -> Vol {
        Vol { v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(), ..self.clone() }
    }
}

fn conv2d(x: &Vol, k: &Tensor) -> Vol {
    let ks = k.shape()[1] as isize;
    let r = ks / 2;
    let mut out = Vol::zeros(x.t, x.h, x.w, x.c);
    for t in 0..x.t {
        for h in 0..x.h {
            for w in 0..x.w {
                for c in 0..x.c {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (y, xx) = (h as isize + dy, w as isize + dx);
                            if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                continue;
                            }
                            let kv = k.data()[(c * ks as usize + (dy + r) as usize) * ks as usize + (dx + r) as usize];
                            acc += kv * x.get(t, y as usize, xx as usize, c);
                        }
                    }
                    let i = out.idx(t, h, w, c);
                    out.v[i] = acc;
                }
            }
        }
    }
    out
}

fn conv1d_time(x: &Vol, k: &Tensor) -> Vol {
    let ks = k.shape()[1] as isize;
    let r = ks / 2;
    let mut out = Vol::zeros(x.t, x.h, x.w, x.c);
    for t in 0..x.t {
        for h in 0..x.h {
            for w in 0..x.w {
                for c in 0..x.c {
                    let mut acc = 0.0;
                    for dt in -r..=r {
                        let s = t as isize + dt;
                        if s >= 0 && s < x.t as isize {
                            acc += k.data()[c * ks as usize + (dt + r) as usize] * x.get(s as usize, h, w, c);
                        }
                    }
                    let i = out.idx(t, h, w, c);
                    out.v[i] = acc;
                }
            }
        }
    }
    out
}

fn pool(x: &Vol, f: (usize, usize)) -> Vol {
    let mut out = Vol::zeros(x.t, x.h / f.0, x.w / f.1, x.c);
    for t in 0..out.t {
        for h in 0..out.h {
            for w in 0..out.w {
                for c in 0..x.c {
                    let mut acc = 0.0;
                    for a in 0..f.0 {
                        for b in 0..f.1 {
                            acc += x.get(t, h * f.0 + a, w * f.1 + b, c);
                        }
                    }
                    let i = out.idx(t, h, w, c);
                    out.v[i] = acc / (f.0 * f.1) as f64;
                }
            }
        }
    }
    out
}

fn upsample(x: &Vol, f: (usize, usize)) -> Vol {
    let mut out = Vol::zeros(x.t, x.h * f.0, x.w * f.1, x.c);
    for t in 0..out.t {
        for h in 0..out.h {
            for w in 0..out.w {
                for c in 0..x.c {
                    let i = out.idx(t, h, w, c);
                    out.v[i] = x.get(t, h / f.0, w / f.1, c);
                }
            }
        }
    }
    out
}

fn matmul_rows(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for j in 0..n {
            out[r * n + j] = (0..k).map(|i| x[r * k + i] * w.data()[i * n + j]).sum();
        }
    }
    out
}

/// Time series of each pooled cell through the block under test.
fn ssm_per_cell(p: &Vol, params: &estf_core::ssm::SsmParams) -> Vol {
    let cells = p.h * p.w;
    let seq = Tensor::from_fn(&[cells, p.t, p.c], |i| {
        let (cell, t, c) = (i / (p.t * p.c), (i / p.c) % p.t, i % p.c);
        p.get(t, cell / p.w, cell % p.w, c)
    });
    let y = tb_ssm_values(&seq, params).unwrap();
    let mut out = Vol::zeros(p.t, p.h, p.w, p.c);
    for cell in 0..cells {
        for t in 0..p.t {
            for c in 0..p.c {
                let i = out.idx(t, cell / p.w, cell % p.w, c);
                out.v[i] = y.data()[(cell * p.t + t) * p.c + c];
            }
        }
    }
    out
}

fn reference_adapter(x: &Tensor, p: &EstfParams, g: Grid) -> Tensor {
    let cfg = &p.cfg;
    let r = cfg.rank;
    let z = Vol { t: g.t, h: g.h, w: g.w, c: r, v: matmul_rows(x.data(), g.tokens(), &p.w_down.value) };
    let zs1 = conv2d(&z, &p.k_spatial_in.as_ref().unwrap().value);
    let zt1 = conv1d_time(&z, &p.k_temporal.as_ref().unwrap().value);
    let pooled_in = match cfg.fusion {
        FusionMode::Parallel => zt1.clone(),
        _ => zt1.add(&zs1),
    };
    let pooled = pool(&pooled_in, cfg.pool_factor);
    let zt = match cfg.temporal {
        TemporalStrategy::None => pooled,
        _ => ssm_per_cell(&pooled, p.ssm.as_ref().unwrap()),
    };
    let up = upsample(&zt, cfg.pool_factor);
    let fused = match cfg.fusion {
        FusionMode::Canonical => zs1.add(&up),
        FusionMode::Literal => zs1.add(&zt1),
        FusionMode::Parallel => zs1,
    };
    let zs = conv2d(&fused, &p.k_spatial_out.as_ref().unwrap().value);
    let total = zs.add(&up).add(&z);
    Tensor::new(&[g.tokens(), x.shape()[1]], matmul_rows(&total.v, g.tokens(), &p.w_up.value)).unwrap()
}

// ---- helpers ----

fn randomize(p: &mut impl Params, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |_, param| {
        for v in param.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    });
}

fn adapter(rng: &mut ChaCha8Rng, d: usize, cfg: &EstfConfig) -> EstfParams {
    let mut p = EstfParams::init(d, cfg, rng).unwrap();
    randomize(&mut p, rng);
    p
}

fn small_cfg() -> EstfConfig {
    EstfConfig {
        rank: 3,
        ssm: SsmConfig { d_state: 2, ..SsmConfig::default() },
        ..EstfConfig::default()
    }
}

// ---- patch embedding ----

#[test]
fn unit_patches_flatten_the_video() {
    let cfg = BackboneConfig {
        frames: 2,
        height: 3,
        width: 2,
        channels: 4,
        patch: (1, 1, 1),
        d_model: 4,
        depth: 0,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bb = Backbone::init(&cfg, &mut rng).unwrap();
    bb.patch.w.value = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    bb.patch.b.value = Tensor::zeros(&[4]);
    bb.patch.e_pos.value = Tensor::zeros(&[12, 4]);
    let video = Tensor::uniform(&[2, 3, 2, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(video.clone());
    let x = patch_embed(&mut tape, v, &bb.patch, &cfg).unwrap();
    assert_eq!(tape.shape(x), &[12, 4]);
    assert_eq!(tape.value(x).data(), video.data());
}

#[test]
fn patch_grid_counts() {
    let cfg = BackboneConfig { frames: 4, height: 8, width: 8, patch: (2, 4, 4), ..BackboneConfig::default() };
    assert_eq!(cfg.grid().unwrap().tokens(), 8);
    let full = BackboneConfig::full_scale();
    assert_eq!(full.frames, FULL_SCALE_FRAMES);
    let g = full.grid().unwrap();
    assert_eq!((g.t, g.h, g.w), (384, 14, 14));
}

#[test]
fn non_divisible_extents_name_the_padding() {
    let cfg = BackboneConfig { frames: 63, width: 18, ..BackboneConfig::default() };
    let err = cfg.grid().unwrap_err().to_string();
    assert!(err.contains("frames 63") && err.contains("pad by 1"), "{err}");
    assert!(err.contains("width 18") && err.contains("pad by 2"), "{err}");
}

#[test]
fn patch_tokens_match_index_arithmetic() {
    let cfg = BackboneConfig {
        frames: 6,
        height: 4,
        width: 6,
        channels: 2,
        patch: (3, 2, 3),
        d_model: 5,
        depth: 0,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bb = Backbone::init(&cfg, &mut rng).unwrap();
    let video = Tensor::uniform(&[6, 4, 6, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(video.clone());
    let x = patch_embed(&mut tape, v, &bb.patch, &cfg).unwrap();
    let g = cfg.grid().unwrap();
    let (w, b, e) = (&bb.patch.w.value, &bb.patch.b.value, &bb.patch.e_pos.value);
    let vid = |t: usize, h: usize, ww: usize, c: usize| video.data()[((t * 4 + h) * 6 + ww) * 2 + c];
    for n in 0..g.tokens() {
        let (gt, gh, gw) = (n / (g.h * g.w), (n / g.w) % g.h, n % g.w);
        for o in 0..5 {
            let mut acc = b.data()[o] + e.data()[n * 5 + o];
            let mut k = 0;
            for dt in 0..3 {
                for dh in 0..2 {
                    for dw in 0..3 {
                        for c in 0..2 {
                            acc += vid(gt * 3 + dt, gh * 2 + dh, gw * 3 + dw, c) * w.data()[k * 5 + o];
                            k += 1;
                        }
                    }
                }
            }
            assert!((tape.value(x).data()[n * 5 + o] - acc).abs() < 1e-12);
        }
    }
}

// ---- adapter ----

#[test]
fn zero_up_projection_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_cfg();
    let p = EstfParams::init(6, &cfg, &mut rng).unwrap();
    let g = Grid { t: 4, h: 4, w: 2 };
    let x = Tensor::uniform(&[g.tokens(), 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = estf_forward(&mut tape, xv, &p, g).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_grid_pooling_gives_one_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Grid { t: 5, h: 2, w: 4 };
    let cfg = EstfConfig { pool_factor: (2, 4), ..small_cfg() };
    let p = adapter(&mut rng, 6, &cfg);
    let x = Tensor::uniform(&[g.tokens(), 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = estf_forward(&mut tape, xv, &p, g).unwrap();
    assert_eq!(tape.shape(y), &[g.tokens(), 6]);
    assert!(tape.value(y).max_abs_diff(&reference_adapter(&x, &p, g)) <= 1e-10);
}

#[test]
fn adapter_matches_reference_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let modes = [FusionMode::Canonical, FusionMode::Literal, FusionMode::Parallel];
    for case in 0..12 {
        let (fh, fw) = [(1, 1), (2, 1), (2, 2), (1, 3)][case % 4];
        let g = Grid { t: rng.random_range(1..7), h: fh * rng.random_range(1..3), w: fw * rng.random_range(1..3) };
        let cfg = EstfConfig {
            pool_factor: (fh, fw),
            fusion: modes[case % 3],
            temporal: if case % 5 == 4 { TemporalStrategy::None } else { TemporalStrategy::TbSsm },
            k_spatial: [3, 5][case % 2],
            ..small_cfg()
        };
        let p = adapter(&mut rng, 5, &cfg);
        let x = Tensor::uniform(&[g.tokens(), 5], 1.0, &mut rng);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = estf_forward(&mut tape, xv, &p, g).unwrap();
        let diff = tape.value(y).max_abs_diff(&reference_adapter(&x, &p, g));
        assert!(diff <= 1e-10, "case {case}: {diff:e}");
    }
}

#[test]
fn rejects_token_count_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = EstfParams::init(6, &small_cfg(), &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[10, 6]));
    let err = estf_forward(&mut tape, x, &p, Grid { t: 2, h: 2, w: 2 });
    assert!(matches!(err, Err(Error::Shape { .. })));
}

#[test]
fn config_validation() {
    assert!(EstfConfig { rank: 8, ..EstfConfig::default() }.validate(8).is_err());
    assert!(EstfConfig { k_spatial: 2, ..EstfConfig::default() }.validate(32).is_err());
    let both_off = EstfConfig { spatial_branch: false, temporal_branch: false, ..EstfConfig::default() };
    assert!(both_off.validate(32).is_err());
    let parsed: EstfConfig = serde_json::from_str(r#"{"rank": 4, "fusion": "parallel"}"#).unwrap();
    assert_eq!(parsed.fusion, FusionMode::Parallel);
    assert!(serde_json::from_str::<EstfConfig>(r#"{"rnk": 4}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn pool_round_trip_preserves_shapes(
        seed in 0u64..1000,
        t in 1usize..5, h in 1usize..7, w in 1usize..7,
        fh in 1usize..5, fw in 1usize..5,
        pad in any::<bool>(),
    ) {
        let padding = if pad { PoolPadding::ZeroPad } else { PoolPadding::Exact };
        let (h, w) = if pad { (h, w) } else { (h * fh, w * fw) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EstfConfig { pool_factor: (fh, fw), pool_padding: padding, ..small_cfg() };
        let p = adapter(&mut rng, 4, &cfg);
        let g = Grid { t, h, w };
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::uniform(&[g.tokens(), 4], 1.0, &mut rng));
        let y = estf_forward(&mut tape, x, &p, g).unwrap();
        prop_assert_eq!(tape.shape(y), &[g.tokens(), 4]);
    }
}

#[test]
fn adapter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Grid { t: 3, h: 2, w: 2 };
    let variants = [
        small_cfg(),
        EstfConfig { fusion: FusionMode::Literal, pointwise: true, ..small_cfg() },
        EstfConfig { fusion: FusionMode::Parallel, temporal: TemporalStrategy::Attention, ..small_cfg() },
        EstfConfig { spatial_branch: false, ..small_cfg() },
        EstfConfig { temporal_branch: false, ..small_cfg() },
        EstfConfig { temporal: TemporalStrategy::None, pool_factor: (1, 2), ..small_cfg() },
    ];
    for cfg in variants {
        let mut p = adapter(&mut rng, 4, &cfg);
        let x = Tensor::uniform(&[g.tokens(), 4], 1.0, &mut rng);
        let report = grad_check_params(
            &mut p,
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = estf_forward(tape, xv, p, g)?;
                tape.mean(y)
            },
            CheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{cfg:?}: {report:?}");
    }
}

// ---- backbone ----

fn tiny_backbone_cfg() -> BackboneConfig {
    BackboneConfig {
        frames: 8,
        height: 8,
        width: 8,
        channels: 2,
        patch: (2, 4, 4),
        d_model: 6,
        depth: 3,
        mlp_hidden: 8,
        adapter_blocks: None,
    }
}

#[test]
fn zero_init_adapters_leave_backbone_output_bit_exact() {
    let cfg = tiny_backbone_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bb = Backbone::init(&cfg, &mut rng).unwrap();
    let g = cfg.grid().unwrap();
    let adapters: Vec<Option<EstfParams>> = (0..cfg.depth)
        .map(|_| Some(EstfParams::init(6, &small_cfg(), &mut rng).unwrap()))
        .collect();
    let video = Tensor::uniform(&[8, 8, 8, 2], 1.0, &mut rng);
    let run = |adapters: &[Option<EstfParams>]| {
        let mut tape = Tape::new();
        let v = tape.constant(video.clone());
        let x = patch_embed(&mut tape, v, &bb.patch, &cfg).unwrap();
        let y = backbone_forward(&mut tape, x, &bb.blocks, adapters, g).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(&adapters), run(&[]));
}

#[test]
fn empty_backbone_is_identity() {
    let cfg = BackboneConfig { depth: 0, ..tiny_backbone_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bb = Backbone::init(&cfg, &mut rng).unwrap();
    let x = Tensor::uniform(&[8, 6], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = backbone_forward(&mut tape, xv, &bb.blocks, &[], cfg.grid().unwrap()).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn frozen_weights_receive_no_gradient() {
    let cfg = BackboneConfig { adapter_blocks: Some(vec![1]), ..tiny_backbone_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bb = Backbone::init(&cfg, &mut rng).unwrap();
    let g = cfg.grid().unwrap();
    let mut adapters: Vec<Option<EstfParams>> = (0..cfg.depth)
        .map(|l| cfg.has_adapter(l).then(|| adapter(&mut rng, 6, &small_cfg())))
        .collect();
    let video = Tensor::uniform(&[8, 8, 8, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(video);
    let x = patch_embed(&mut tape, v, &bb.patch, &cfg).unwrap();
    let y = backbone_forward(&mut tape, x, &bb.blocks, &adapters, g).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.mean(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    bb.visit_mut("", &mut |name, p: &mut Parameter| {
        assert!(!p.requires_grad, "{name}");
        p.accumulate_grad(&tape, &grads);
        assert!(p.grad.is_none(), "{name}");
        if let Some(var) = tape.param_var(p) {
            assert!(!tape.requires_grad(var));
        }
    });
    let mut any = false;
    adapters.visit_mut("", &mut |_, p| {
        p.accumulate_grad(&tape, &grads);
        any |= p.grad.as_ref().is_some_and(|g| g.max_abs() > 0.0);
    });
    assert!(any);
    assert!(adapters[0].is_none() && adapters[2].is_none());
}

#[test]
fn default_model_is_parameter_efficient() {
    let cfg = BackboneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bb = Backbone::init(&cfg, &mut rng).unwrap();
    let adapters: Vec<Option<EstfParams>> = (0..cfg.depth)
        .map(|_| Some(EstfParams::init(cfg.d_model, &EstfConfig::default(), &mut rng).unwrap()))
        .collect();
    let frozen = count_params(&bb);
    let trainable = count_params(&adapters);
    assert_eq!(frozen.trainable, 0);
    assert_eq!(trainable.trainable, trainable.total);
    let fraction = trainable.total as f64 / (trainable.total + frozen.total) as f64;
    assert!(fraction < 0.5, "{fraction}");
}
