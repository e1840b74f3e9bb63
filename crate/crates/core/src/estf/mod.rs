//! The spatial-temporal adapter and the frozen toy backbone it plugs into.
//!
//! On a `t x h x w` token grid the adapter computes
//!
//! ```text
//! Z   = x W_down                         [t, h, w, r]
//! Zs' = dwconv2d(Z)                      spatial branch
//! Zt' = dwconv1d(Z) along t              temporal branch
//! P   = avgpool(Zt' + Zs')
//! Zt  = temporal_model(P)                one sequence per pooled cell
//! Zs  = dwconv2d(Zs' + up(Zt))
//! out = (Zs + up(Zt) + Z) W_up
//! ```
//!
//! [`FusionMode`] and the branch switches in [`EstfConfig`] select the
//! ablation variants.

mod backbone;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{
    backbone_forward, patch_embed, Backbone, BackboneConfig, FrozenBlock, PatchEmbed, FULL_SCALE_FRAMES,
};

use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::{Parameter, PoolPadding, Tape, Tensor, Var};
use crate::ssm::{attention_baseline, tb_ssm_forward, AttentionParams, SsmConfig, SsmParams};

/// Post-patch token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// How the two branches exchange information.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Pooled input is `Zt' + Zs'`; the second spatial conv sees `Zs' + up(Zt)`.
    #[default]
    Canonical,
    /// As canonical, but the second spatial conv sees `Zs' + Zt'`.
    Literal,
    /// No cross terms: pooled input is `Zt'`, second spatial conv sees `Zs'`.
    Parallel,
}

/// Sequence model run over each pooled cell's time series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalStrategy {
    /// `Zt = P`.
    None,
    Attention,
    #[default]
    TbSsm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstfConfig {
    pub rank: usize,
    pub pool_factor: (usize, usize),
    pub pool_padding: PoolPadding,
    pub k_spatial: usize,
    pub k_temporal: usize,
    /// Follow every depthwise conv with a trainable 1x1 channel mix.
    pub pointwise: bool,
    pub fusion: FusionMode,
    pub spatial_branch: bool,
    pub temporal_branch: bool,
    pub temporal: TemporalStrategy,
    pub ssm: SsmConfig,
}

impl Default for EstfConfig {
    fn default() -> Self {
        EstfConfig {
            rank: 8,
            pool_factor: (2, 2),
            pool_padding: PoolPadding::Exact,
            k_spatial: 3,
            k_temporal: 3,
            pointwise: false,
            fusion: FusionMode::Canonical,
            spatial_branch: true,
            temporal_branch: true,
            temporal: TemporalStrategy::TbSsm,
            ssm: SsmConfig::default(),
        }
    }
}

impl EstfConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d_model {
            return Err(Error::invalid(
                "/rank",
                format!("adapter rank {} must be in 1..{d_model}", self.rank),
            ));
        }
        for (name, k) in [("k_spatial", self.k_spatial), ("k_temporal", self.k_temporal)] {
            if k % 2 == 0 {
                return Err(Error::invalid(format!("/{name}"), format!("must be odd, got {k}")));
            }
        }
        if self.pool_factor.0 == 0 || self.pool_factor.1 == 0 {
            return Err(Error::invalid("/pool_factor", "entries must be positive"));
        }
        if self.ssm.d_state == 0 {
            return Err(Error::invalid("/ssm/d_state", "must be positive"));
        }
        if !self.spatial_branch && !self.temporal_branch {
            return Err(Error::invalid("/spatial_branch", "adapter needs at least one branch"));
        }
        Ok(())
    }

    /// Checks that the pooling factor fits a token grid.
    pub fn check_grid(&self, grid: Grid) -> Result<()> {
        let (fh, fw) = self.pool_factor;
        if self.pool_padding == PoolPadding::Exact && (!grid.h.is_multiple_of(fh) || !grid.w.is_multiple_of(fw)) {
            return Err(Error::invalid(
                "/pool_factor",
                format!("({fh}, {fw}) does not divide the token grid ({}, {})", grid.h, grid.w),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EstfParams {
    pub w_down: Parameter,
    pub w_up: Parameter,
    /// `[r, k, k]`, first spatial conv.
    pub k_spatial_in: Option<Parameter>,
    /// `[r, k, k]`, conv after fusion.
    pub k_spatial_out: Option<Parameter>,
    /// `[r, k]`
    pub k_temporal: Option<Parameter>,
    pub pw_spatial_in: Option<Parameter>,
    pub pw_spatial_out: Option<Parameter>,
    pub pw_temporal: Option<Parameter>,
    pub ssm: Option<SsmParams>,
    pub attention: Option<AttentionParams>,
    pub cfg: EstfConfig,
}

impl_params!(EstfParams {
    w_down,
    w_up,
    k_spatial_in,
    k_spatial_out,
    k_temporal,
    pw_spatial_in,
    pw_spatial_out,
    pw_temporal,
    ssm,
    attention,
});

/// Identity kernel plus a little noise.
fn near_identity<R: Rng + ?Sized>(shape: &[usize], center: usize, per_channel: usize, rng: &mut R) -> Parameter {
    let mut t = Tensor::uniform(shape, 0.1, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % per_channel == center {
            *v += 1.0;
        }
    }
    Parameter::trainable(t)
}

impl EstfParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, cfg: &EstfConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(d_model)?;
        let r = cfg.rank;
        let (ks, kt) = (cfg.k_spatial, cfg.k_temporal);
        let spatial = cfg.spatial_branch;
        let temporal = cfg.temporal_branch;
        let k2 = |on: bool, rng: &mut R| on.then(|| near_identity(&[r, ks, ks], ks * ks / 2, ks * ks, rng));
        let k_spatial_in = k2(spatial, rng);
        let k_spatial_out = k2(spatial, rng);
        let k_temporal = temporal.then(|| near_identity(&[r, kt], kt / 2, kt, rng));
        let pw = |on: bool, rng: &mut R| {
            (on && cfg.pointwise).then(|| near_identity(&[r, r], 0, r + 1, rng))
        };
        Ok(EstfParams {
            w_down: Parameter::trainable(Tensor::uniform(&[d_model, r], 1.0 / (d_model as f64).sqrt(), rng)),
            w_up: Parameter::trainable(Tensor::zeros(&[r, d_model])),
            k_spatial_in,
            k_spatial_out,
            k_temporal,
            pw_spatial_in: pw(spatial, rng),
            pw_spatial_out: pw(spatial, rng),
            pw_temporal: pw(temporal, rng),
            ssm: (temporal && cfg.temporal == TemporalStrategy::TbSsm).then(|| SsmParams::init(r, &cfg.ssm, rng)),
            attention: (temporal && cfg.temporal == TemporalStrategy::Attention)
                .then(|| AttentionParams::init(r, rng)),
            cfg: cfg.clone(),
        })
    }
}

fn pointwise(tape: &mut Tape, x: Var, w: &Option<Parameter>) -> Result<Var> {
    match w {
        Some(w) => {
            let w = tape.param(w);
            tape.matmul(x, w)
        }
        None => Ok(x),
    }
}

fn spatial_conv(tape: &mut Tape, z: Var, k: &Parameter, pw: &Option<Parameter>) -> Result<Var> {
    let k = tape.param(k);
    let y = tape.dwconv2d(z, k)?;
    pointwise(tape, y, pw)
}

fn add_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    match (a, b) {
        (Some(a), Some(b)) => tape.add(a, b).map(Some),
        (a, b) => Ok(a.or(b)),
    }
}

/// `[t, h, w, c] -> [h*w, t, c]`
fn to_sequences(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[1, 2, 0, 3])?;
    tape.reshape(p, &[s[1] * s[2], s[0], s[3]])
}

/// `[h*w, t, c] -> [t, h, w, c]`
fn from_sequences(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[h, w, s[1], s[2]])?;
    tape.permute(r, &[2, 0, 1, 3])
}

/// Adapter on tokens `x: [n, d]` laid out over `grid` in `(t, h, w)` order.
pub fn estf_forward(tape: &mut Tape, x: Var, p: &EstfParams, grid: Grid) -> Result<Var> {
    let cfg = &p.cfg;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] != grid.tokens() {
        return Err(Error::Shape {
            op: "estf_forward",
            lhs: xs,
            rhs: vec![grid.t, grid.h, grid.w],
        });
    }
    cfg.check_grid(grid)?;
    let r = cfg.rank;
    let w_down = tape.param(&p.w_down);
    let z = tape.matmul(x, w_down)?;
    let z = tape.reshape(z, &[grid.t, grid.h, grid.w, r])?;

    let zs1 = match &p.k_spatial_in {
        Some(k) => Some(spatial_conv(tape, z, k, &p.pw_spatial_in)?),
        None => None,
    };
    let zt1 = match &p.k_temporal {
        Some(k) => {
            let seq = to_sequences(tape, z)?;
            let k = tape.param(k);
            let y = tape.dwconv1d(seq, k)?;
            let y = pointwise(tape, y, &p.pw_temporal)?;
            Some(from_sequences(tape, y, grid.h, grid.w)?)
        }
        None => None,
    };

    // temporal branch output, upsampled back to the full grid
    let zt_up = match zt1 {
        Some(zt1) => {
            let pooled_in = match cfg.fusion {
                FusionMode::Parallel => zt1,
                _ => add_opt(tape, Some(zt1), zs1)?.expect("temporal branch present"),
            };
            let pooled = tape.avgpool_spatial(pooled_in, cfg.pool_factor, cfg.pool_padding)?;
            let (ph, pw) = (tape.shape(pooled)[1], tape.shape(pooled)[2]);
            let zt = match cfg.temporal {
                TemporalStrategy::None => pooled,
                TemporalStrategy::TbSsm | TemporalStrategy::Attention => {
                    let seq = to_sequences(tape, pooled)?;
                    let y = match (&p.ssm, &p.attention) {
                        (Some(ssm), _) => tb_ssm_forward(tape, seq, ssm)?,
                        (None, Some(attn)) => attention_baseline(tape, seq, attn)?,
                        (None, None) => return Err(Error::config("temporal model parameters missing")),
                    };
                    from_sequences(tape, y, ph, pw)?
                }
            };
            let up = tape.upsample_nearest_to(zt, cfg.pool_factor, (grid.h, grid.w))?;
            Some((zt1, up))
        }
        None => None,
    };

    let zs = match (zs1, &p.k_spatial_out) {
        (Some(zs1), Some(k)) => {
            let fused = match (cfg.fusion, zt_up) {
                (FusionMode::Canonical, Some((_, up))) => tape.add(zs1, up)?,
                (FusionMode::Literal, Some((zt1, _))) => tape.add(zs1, zt1)?,
                _ => zs1,
            };
            Some(spatial_conv(tape, fused, k, &p.pw_spatial_out)?)
        }
        _ => None,
    };

    let mut acc = z;
    for v in [zs, zt_up.map(|(_, up)| up)].into_iter().flatten() {
        acc = tape.add(acc, v)?;
    }
    let flat = tape.reshape(acc, &[grid.tokens(), r])?;
    let w_up = tape.param(&p.w_up);
    tape.matmul(flat, w_up)
}
