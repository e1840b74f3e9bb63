//! Gradient checks of the trainable modules on small random instances,
//! shared by the `gradcheck` command and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    assign_targets, default_ranges, detection_loss, detector_forward, Detector, GroundTruthInstance, HeadConfig,
    LossConfig, ModelConfig,
};
use crate::error::{Error, Result};
use crate::estf::{estf_forward, BackboneConfig, EstfConfig, EstfParams, FusionMode, Grid, TemporalStrategy};
use crate::numerics::{grad_check, grad_check_params, CheckOptions, CheckReport, Params, Tensor};
use crate::ssm::{tb_ssm_forward, ScanMode, SsmConfig, SsmParams};

/// Module groups a check can target.
pub const CHECK_MODULES: [&str; 3] = ["ssm", "estf", "head"];

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub case: String,
    pub report: CheckReport,
}

/// Moves every parameter off its initial value so that no gradient is
/// trivially zero; transition logs get a wider spread.
fn randomize(p: &mut impl Params, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, param| {
        let r = if name.contains("a_log") { 0.5 } else { 0.3 };
        for v in param.value.data_mut() {
            *v += rng.random_range(-r..r);
        }
    });
}

fn ssm_checks(rng: &mut ChaCha8Rng, out: &mut Vec<ModuleCheck>) -> Result<()> {
    for (mode, gate, tied_a) in [
        (ScanMode::Selective, false, false),
        (ScanMode::Literal, false, false),
        (ScanMode::Selective, true, true),
    ] {
        let cfg = SsmConfig {
            d_state: 3,
            mode,
            gate,
            tied_a,
            ..SsmConfig::default()
        };
        let mut p = SsmParams::init(3, &cfg, rng);
        randomize(&mut p, rng);
        let x = Tensor::uniform(&[2, 6, 3], 1.0, rng);
        let case = format!("{mode:?} gate={gate} tied_a={tied_a}");
        let report = grad_check_params(
            &mut p,
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = tb_ssm_forward(tape, xv, p)?;
                tape.mean(y)
            },
            CheckOptions::default(),
        )?;
        out.push(ModuleCheck {
            module: "ssm",
            case: format!("{case} params"),
            report,
        });
        let report = grad_check(
            |tape, v| {
                let y = tb_ssm_forward(tape, v[0], &p)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[x],
            CheckOptions::default(),
        )?;
        out.push(ModuleCheck {
            module: "ssm",
            case: format!("{case} input"),
            report,
        });
    }
    Ok(())
}

fn estf_checks(rng: &mut ChaCha8Rng, out: &mut Vec<ModuleCheck>) -> Result<()> {
    let base = EstfConfig {
        rank: 3,
        ssm: SsmConfig {
            d_state: 2,
            ..SsmConfig::default()
        },
        ..EstfConfig::default()
    };
    let g = Grid { t: 3, h: 2, w: 2 };
    let variants = [
        ("canonical", base.clone()),
        (
            "literal fusion",
            EstfConfig {
                fusion: FusionMode::Literal,
                ..base.clone()
            },
        ),
        (
            "attention temporal",
            EstfConfig {
                temporal: TemporalStrategy::Attention,
                ..base.clone()
            },
        ),
    ];
    for (name, cfg) in variants {
        let mut p = EstfParams::init(4, &cfg, rng)?;
        randomize(&mut p, rng);
        let x = Tensor::uniform(&[g.tokens(), 4], 1.0, rng);
        let report = grad_check_params(
            &mut p,
            |tape, p| {
                let xv = tape.constant(x.clone());
                let y = estf_forward(tape, xv, p, g)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            CheckOptions::default(),
        )?;
        out.push(ModuleCheck {
            module: "estf",
            case: name.to_string(),
            report,
        });
    }
    Ok(())
}

/// Detection loss through the neck and head, and through the adapters of a
/// tiny detector, against every trainable parameter.
fn head_checks(rng: &mut ChaCha8Rng, out: &mut Vec<ModuleCheck>) -> Result<()> {
    let cfg = ModelConfig {
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
    };
    let mut model = Detector::init(&cfg, rng)?;
    for a in model.adapters.iter_mut().flatten() {
        a.w_up.value = Tensor::uniform(a.w_up.value.shape(), 0.3, rng);
    }
    let tokens = Tensor::uniform(&[model.grid().tokens(), cfg.backbone.d_model], 1.0, rng);
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
    let targets = assign_targets(&gts, &model.levels(), 4.0, &default_ranges(cfg.head.levels));
    let report = grad_check_params(
        &mut model,
        |tape, m| {
            let x = tape.constant(tokens.clone());
            let out = detector_forward(tape, x, m)?;
            Ok(detection_loss(tape, &out, &targets, &LossConfig::default())?.total)
        },
        CheckOptions::default(),
    )?;
    out.push(ModuleCheck {
        module: "head",
        case: "detection loss, all trainable parameters".into(),
        report,
    });
    Ok(())
}

/// Runs the checks of `module` (`ssm`, `estf`, `head` or `all`).
pub fn module_gradchecks(module: &str, seed: u64) -> Result<Vec<ModuleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let run: Vec<&str> = match module {
        "all" => CHECK_MODULES.to_vec(),
        m if CHECK_MODULES.contains(&m) => vec![m],
        other => {
            return Err(Error::invalid(
                "/module",
                format!("unknown module {other:?}, expected one of ssm, estf, head, all"),
            ))
        }
    };
    for m in run {
        match m {
            "ssm" => ssm_checks(&mut rng, &mut out)?,
            "estf" => estf_checks(&mut rng, &mut out)?,
            _ => head_checks(&mut rng, &mut out)?,
        }
    }
    Ok(out)
}
