//! Frozen toy backbone: patch embedding plus residual MLP blocks, with an
//! optional adapter after each block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{estf_forward, EstfParams, Grid};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::{Parameter, Tape, Tensor, Var, LN_EPS};

/// Clip length used for full-scale inputs; kept as a shape-only preset.
pub const FULL_SCALE_FRAMES: usize = 768;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(t_p, h_p, w_p)`
    pub patch: (usize, usize, usize),
    pub d_model: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    /// Blocks that get an adapter; `None` means every block.
    pub adapter_blocks: Option<Vec<usize>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            frames: 64,
            height: 16,
            width: 16,
            channels: 3,
            patch: (2, 4, 4),
            d_model: 32,
            depth: 2,
            mlp_hidden: 64,
            adapter_blocks: None,
        }
    }
}

impl BackboneConfig {
    /// 768 frames at 224x224 with 2x16x16 patches.
    pub fn full_scale() -> Self {
        BackboneConfig {
            frames: FULL_SCALE_FRAMES,
            height: 224,
            width: 224,
            channels: 3,
            patch: (2, 16, 16),
            d_model: 768,
            depth: 12,
            mlp_hidden: 3072,
            adapter_blocks: None,
        }
    }

    /// Token grid after patching; errors name the padding each axis needs.
    pub fn grid(&self) -> Result<Grid> {
        let (tp, hp, wp) = self.patch;
        let mut problems = Vec::new();
        for (axis, n, p) in [("frames", self.frames, tp), ("height", self.height, hp), ("width", self.width, wp)] {
            if p == 0 {
                problems.push(format!("{axis}: patch size must be positive"));
            } else if n % p != 0 {
                let pad = p - n % p;
                problems.push(format!("{axis} {n} is not a multiple of {p} (pad by {pad})"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::invalid("/patch", format!("patch grid: {}", problems.join("; "))));
        }
        Ok(Grid {
            t: self.frames / tp,
            h: self.height / hp,
            w: self.width / wp,
        })
    }

    pub fn patch_len(&self) -> usize {
        let (tp, hp, wp) = self.patch;
        tp * hp * wp * self.channels
    }

    pub fn has_adapter(&self, block: usize) -> bool {
        self.adapter_blocks.as_ref().is_none_or(|b| b.contains(&block))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for (path, v) in [("/d_model", self.d_model), ("/mlp_hidden", self.mlp_hidden), ("/channels", self.channels)] {
            if v == 0 {
                return Err(Error::invalid(path, "must be positive"));
            }
        }
        if let Some(blocks) = &self.adapter_blocks {
            if let Some(b) = blocks.iter().find(|&&b| b >= self.depth) {
                return Err(Error::invalid(
                    "/adapter_blocks",
                    format!("adapter block {b} out of range for depth {}", self.depth),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    /// `[patch_len, d]`
    pub w: Parameter,
    pub b: Parameter,
    /// `[n, d]`
    pub e_pos: Parameter,
}

impl_params!(PatchEmbed { w, b, e_pos });

/// Residual block `x + W2 silu(W1 norm(x) + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FrozenBlock {
    pub ln_gamma: Parameter,
    pub ln_beta: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

impl_params!(FrozenBlock { ln_gamma, ln_beta, w1, b1, w2, b2 });

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch: PatchEmbed,
    pub blocks: Vec<FrozenBlock>,
}

impl_params!(Backbone { patch, blocks });

/// Fixed sinusoidal table: the first half of the channels encodes the
/// time index, the second half the spatial cell.
fn positions(grid: Grid, d: usize) -> Tensor {
    let half = d / 2;
    Tensor::from_fn(&[grid.tokens(), d], |i| {
        let (n, c) = (i / d, i % d);
        let (pos, c, width) = if c < half {
            ((n / (grid.h * grid.w)) as f64, c, half)
        } else {
            ((n % (grid.h * grid.w)) as f64, c - half, d - half)
        };
        let freq = 1.0 / 100f64.powf((c / 2 * 2) as f64 / width.max(1) as f64);
        let angle = pos * freq;
        0.1 * if c % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

impl Backbone {
    /// Random weights, all frozen.
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let d = cfg.d_model;
        let frozen = |shape: &[usize], fan_in: usize, rng: &mut R| {
            Parameter::frozen(Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng))
        };
        let patch = PatchEmbed {
            w: frozen(&[cfg.patch_len(), d], cfg.patch_len(), rng),
            b: frozen(&[d], cfg.patch_len(), rng),
            e_pos: Parameter::frozen(positions(grid, d)),
        };
        let blocks = (0..cfg.depth)
            .map(|_| FrozenBlock {
                ln_gamma: Parameter::frozen(Tensor::ones(&[d])),
                ln_beta: Parameter::frozen(Tensor::zeros(&[d])),
                w1: frozen(&[d, cfg.mlp_hidden], d, rng),
                b1: frozen(&[cfg.mlp_hidden], d, rng),
                w2: frozen(&[cfg.mlp_hidden, d], cfg.mlp_hidden, rng),
                b2: frozen(&[d], cfg.mlp_hidden, rng),
            })
            .collect();
        Ok(Backbone { patch, blocks })
    }
}

/// Splits `video: [t, h, w, c]` into non-overlapping patches, projects each
/// to `d` channels and adds the positional table. Returns `[n, d]` with
/// tokens in `(t, h, w)` order.
pub fn patch_embed(tape: &mut Tape, video: Var, pe: &PatchEmbed, cfg: &BackboneConfig) -> Result<Var> {
    let grid = cfg.grid()?;
    let expect = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if tape.shape(video) != expect {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: tape.shape(video).to_vec(),
            rhs: expect.to_vec(),
        });
    }
    let (tp, hp, wp) = cfg.patch;
    let blocks = tape.reshape(video, &[grid.t, tp, grid.h, hp, grid.w, wp, cfg.channels])?;
    let blocks = tape.permute(blocks, &[0, 2, 4, 1, 3, 5, 6])?;
    let rows = tape.reshape(blocks, &[grid.tokens(), cfg.patch_len()])?;
    let w = tape.param(&pe.w);
    let b = tape.param(&pe.b);
    let e = tape.param(&pe.e_pos);
    let x = tape.matmul(rows, w)?;
    let x = tape.add_bias(x, b)?;
    tape.add(x, e)
}

fn block_forward(tape: &mut Tape, x: Var, blk: &FrozenBlock) -> Result<Var> {
    let g = tape.param(&blk.ln_gamma);
    let b = tape.param(&blk.ln_beta);
    let h = tape.layernorm(x, g, b, LN_EPS)?;
    let w1 = tape.param(&blk.w1);
    let b1 = tape.param(&blk.b1);
    let h = tape.matmul(h, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.silu(h)?;
    let w2 = tape.param(&blk.w2);
    let b2 = tape.param(&blk.b2);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_bias(h, b2)?;
    tape.add(x, h)
}

/// Runs every block, then its adapter if one is attached:
/// `x' = x + mlp(norm(x))`, `x = x' + adapter(x')`.
pub fn backbone_forward(
    tape: &mut Tape,
    x: Var,
    blocks: &[FrozenBlock],
    adapters: &[Option<EstfParams>],
    grid: Grid,
) -> Result<Var> {
    let mut x = x;
    for (l, blk) in blocks.iter().enumerate() {
        x = block_forward(tape, x, blk)?;
        if let Some(Some(adapter)) = adapters.get(l) {
            let a = estf_forward(tape, x, adapter, grid)?;
            x = tape.add(x, a)?;
        }
    }
    Ok(x)
}
