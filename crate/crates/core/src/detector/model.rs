use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ActionInstance;
use crate::error::{Error, Result};
use crate::estf::{backbone_forward, Backbone, BackboneConfig, EstfConfig, EstfParams, Grid};
use crate::impl_params;
use crate::numerics::{Parameter, Tape, Tensor, TimePool, Var, LN_EPS};
use crate::postproc::{soft_nms, NmsConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub levels: usize,
    pub hidden: usize,
    pub pool: TimePool,
    /// Foreground probability each class starts with.
    pub prior: f64,
    /// Per-level `[lo, hi)` of the larger boundary offset, in that level's
    /// stride units. `None` uses [`super::default_ranges`].
    pub regress_ranges: Option<Vec<(f64, f64)>>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            levels: 3,
            hidden: 32,
            pool: TimePool::Max,
            prior: 0.01,
            regress_ranges: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub backbone: BackboneConfig,
    pub adapter: EstfConfig,
    /// Attach adapters at all; off gives the frozen-backbone baseline.
    pub use_adapters: bool,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 4,
            backbone: BackboneConfig::default(),
            adapter: EstfConfig::default(),
            use_adapters: true,
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|e| e.under("/backbone"))?;
        let grid = self.backbone.grid().map_err(|e| e.under("/backbone"))?;
        if self.use_adapters {
            self.adapter
                .validate(self.backbone.d_model)
                .and_then(|_| self.adapter.check_grid(grid))
                .map_err(|e| e.under("/adapter"))?;
        }
        if self.n_classes == 0 {
            return Err(Error::invalid("/n_classes", "must be positive"));
        }
        let h = &self.head;
        if h.levels == 0 {
            return Err(Error::invalid("/head/levels", "must be positive"));
        }
        if h.hidden == 0 {
            return Err(Error::invalid("/head/hidden", "must be positive"));
        }
        if grid.t < 1 << (h.levels - 1) {
            return Err(Error::invalid(
                "/head/levels",
                format!(
                    "{} pyramid levels need at least {} time steps, token grid has {}",
                    h.levels,
                    1usize << (h.levels - 1),
                    grid.t
                ),
            ));
        }
        if !(h.prior > 0.0 && h.prior * (self.n_classes as f64) < 1.0) {
            return Err(Error::invalid("/head/prior", "must be in (0, 1/n_classes)"));
        }
        if let Some(r) = &h.regress_ranges {
            if r.len() != h.levels {
                return Err(Error::invalid(
                    "/head/regress_ranges",
                    format!("{} entries for {} levels", r.len(), h.levels),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w_cls: Parameter,
    pub b_cls: Parameter,
    pub w_reg: Parameter,
    pub b_reg: Parameter,
}

impl_params!(HeadParams { w1, b1, w_cls, b_cls, w_reg, b_reg });

#[derive(Clone, Debug)]
pub struct Detector {
    pub backbone: Backbone,
    pub adapters: Vec<Option<EstfParams>>,
    pub neck_gamma: Parameter,
    pub neck_beta: Parameter,
    pub head: HeadParams,
    pub cfg: ModelConfig,
}

impl_params!(Detector {
    backbone,
    adapters,
    neck_gamma,
    neck_beta,
    head
});

impl Detector {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::init(&cfg.backbone, rng)?;
        let d = cfg.backbone.d_model;
        let adapters = (0..cfg.backbone.depth)
            .map(|l| {
                (cfg.use_adapters && cfg.backbone.has_adapter(l))
                    .then(|| EstfParams::init(d, &cfg.adapter, rng))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let (hd, c) = (cfg.head.hidden, cfg.n_classes);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            Parameter::trainable(Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng))
        };
        // background logit chosen so that every class starts at `prior`
        let bg = (1.0 / cfg.head.prior - c as f64).ln();
        let head = HeadParams {
            w1: uniform(&[d, hd], d),
            b1: Parameter::trainable(Tensor::zeros(&[hd])),
            w_cls: uniform(&[hd, c + 1], hd),
            b_cls: Parameter::trainable(Tensor::from_fn(&[c + 1], |i| if i == c { bg } else { 0.0 })),
            w_reg: uniform(&[hd, 2], hd),
            b_reg: Parameter::trainable(Tensor::zeros(&[2])),
        };
        Ok(Detector {
            backbone,
            adapters,
            neck_gamma: Parameter::trainable(Tensor::ones(&[d])),
            neck_beta: Parameter::trainable(Tensor::zeros(&[d])),
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn grid(&self) -> Grid {
        self.cfg.backbone.grid().expect("validated at init")
    }

    /// Geometry of every pyramid level.
    pub fn levels(&self) -> Vec<LevelGeom> {
        let t_p = self.cfg.backbone.patch.0;
        let mut len = self.grid().t;
        (0..self.cfg.head.levels)
            .map(|i| {
                let g = LevelGeom {
                    len,
                    stride_frames: t_p << i,
                };
                len = len.div_ceil(2);
                g
            })
            .collect()
    }
}

/// Length and temporal stride (in frames) of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeom {
    pub len: usize,
    pub stride_frames: usize,
}

impl LevelGeom {
    /// Stride in seconds.
    pub fn stride(&self, fps: f64) -> f64 {
        self.stride_frames as f64 / fps
    }

    /// Centre time of step `t`, in seconds.
    pub fn center(&self, t: usize, fps: f64) -> f64 {
        (t as f64 + 0.5) * self.stride(fps)
    }
}

/// `levels[0] = x`, `levels[i] = pool(levels[i-1])`, halving time each step.
pub fn build_pyramid(tape: &mut Tape, x: Var, n_levels: usize, pool: TimePool) -> Result<Vec<Var>> {
    let t = tape.shape(x)[0];
    if n_levels == 0 || t < 1 << (n_levels - 1) {
        return Err(Error::config(format!("cannot build {n_levels} pyramid levels from {t} steps")));
    }
    let mut levels = vec![x];
    for _ in 1..n_levels {
        let last = *levels.last().unwrap();
        levels.push(tape.pool_time_halve(last, pool)?);
    }
    Ok(levels)
}

/// Raw head outputs with every level's steps stacked along the rows.
pub struct HeadOutput {
    /// `[m, c + 1]`, background last.
    pub cls: Var,
    /// `[m, 2]`, non-negative start/end offsets in stride units.
    pub reg: Var,
    pub levels: Vec<LevelGeom>,
}

fn dense(tape: &mut Tape, x: Var, w: &Parameter, b: &Parameter) -> Result<Var> {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Full forward from patch tokens `[n, d]` to head outputs.
pub fn detector_forward(tape: &mut Tape, tokens: Var, model: &Detector) -> Result<HeadOutput> {
    let grid = model.grid();
    let d = model.cfg.backbone.d_model;
    let x = backbone_forward(tape, tokens, &model.backbone.blocks, &model.adapters, grid)?;
    let x = tape.reshape(x, &[grid.t, grid.h * grid.w, d])?;
    let x = tape.mean_axis(x, 1)?;
    let g = tape.param(&model.neck_gamma);
    let b = tape.param(&model.neck_beta);
    let x = tape.layernorm(x, g, b, LN_EPS)?;
    let levels = build_pyramid(tape, x, model.cfg.head.levels, model.cfg.head.pool)?;
    let stacked = tape.concat(&levels, 0)?;
    let h = &model.head;
    let hidden = dense(tape, stacked, &h.w1, &h.b1)?;
    let hidden = tape.silu(hidden)?;
    let cls = dense(tape, hidden, &h.w_cls, &h.b_cls)?;
    let reg = dense(tape, hidden, &h.w_reg, &h.b_reg)?;
    let reg = tape.softplus(reg)?;
    Ok(HeadOutput {
        cls,
        reg,
        levels: model.levels(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Candidates scoring below this are discarded before NMS.
    pub min_score: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    pub nms: NmsConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            min_score: 0.001,
            pre_nms_top_k: 500,
            max_detections: 100,
            nms: NmsConfig::default(),
        }
    }
}

/// Turns raw head outputs into scored segments: one candidate per step and
/// foreground class, `t_s = tau - d_s * stride`, `t_e = tau + d_e * stride`.
/// Candidates are clipped to `[0, duration]`, thresholded, and passed
/// through Soft-NMS.
pub fn decode(
    cls: &Tensor,
    reg: &Tensor,
    levels: &[LevelGeom],
    fps: f64,
    duration: f64,
    cfg: &DecodeConfig,
) -> Vec<ActionInstance> {
    let c1 = cls.shape()[1];
    let mut cands = Vec::new();
    let mut row = 0;
    for lv in levels {
        let stride = lv.stride(fps);
        for t in 0..lv.len {
            let tau = lv.center(t, fps);
            let logits = &cls.data()[row * c1..(row + 1) * c1];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let (ds, de) = (reg.data()[row * 2], reg.data()[row * 2 + 1]);
            let (s, e) = (tau - ds * stride, tau + de * stride);
            debug_assert!(e > s);
            let (s, e) = (s.max(0.0), e.min(duration));
            if e > s {
                for (label, l) in logits[..c1 - 1].iter().enumerate() {
                    let score = (l - max).exp() / z;
                    if score >= cfg.min_score {
                        cands.push(ActionInstance {
                            t_start: s,
                            t_end: e,
                            label,
                            score,
                        });
                    }
                }
            }
            row += 1;
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(cfg.pre_nms_top_k);
    let mut out = soft_nms(&cands, &cfg.nms);
    out.truncate(cfg.max_detections);
    out
}

