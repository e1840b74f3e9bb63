//! Depthwise convolutions and spatial resampling, all channels-last.
//!
//! Convolutions are cross-correlations with zero "same" padding, so output
//! extents equal input extents.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn odd_kernel(op: &str, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("{op}: kernel size {k} must be odd")));
    }
    Ok(())
}

fn dwconv1d_fwd(x: &[f64], w: &[f64], b: usize, t: usize, c: usize, k: usize) -> Vec<f64> {
    let half = k / 2;
    let mut y = vec![0.0; b * t * c];
    for bi in 0..b {
        for ti in 0..t {
            let out = &mut y[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            for j in 0..k {
                let src = ti as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let row = &x[(bi * t + src as usize) * c..(bi * t + src as usize + 1) * c];
                for ch in 0..c {
                    out[ch] += row[ch] * w[ch * k + j];
                }
            }
        }
    }
    y
}

fn dwconv2d_fwd(x: &[f64], w: &[f64], dims: [usize; 4], k: usize) -> Vec<f64> {
    let [b, h, wd, c] = dims;
    let half = k as isize / 2;
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let o = ((bi * h + i) * wd + j) * c;
                for di in 0..k {
                    let si = i as isize + di as isize - half;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..k {
                        let sj = j as isize + dj as isize - half;
                        if sj < 0 || sj >= wd as isize {
                            continue;
                        }
                        let s = ((bi * h + si as usize) * wd + sj as usize) * c;
                        for ch in 0..c {
                            y[o + ch] += x[s + ch] * w[(ch * k + di) * k + dj];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Pooling geometry shared by the forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    fh: usize,
    fw: usize,
    oh: usize,
    ow: usize,
}

impl PoolGeom {
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        // f(input offset, pooled offset), channel offset excluded
        for ti in 0..self.t {
            for i in 0..self.h {
                for j in 0..self.w {
                    let src = ((ti * self.h + i) * self.w + j) * self.c;
                    let dst = ((ti * self.oh + i / self.fh) * self.ow + j / self.fw) * self.c;
                    f(src, dst)
                }
            }
        }
    }
}

/// How a spatial extent that the pooling factor does not divide is handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPadding {
    /// Require divisibility.
    #[default]
    Exact,
    /// Zero-pad up to the next multiple before pooling.
    ZeroPad,
}

/// Block means computed as `first + mean(v - first)`, which returns a
/// constant block's value exactly. Zero padding counts as members.
fn block_means(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.t * g.oh * g.ow * g.c];
    let n = (g.fh * g.fw) as f64;
    for ti in 0..g.t {
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let dst = ((ti * g.oh + oi) * g.ow + oj) * g.c;
                let first = ((ti * g.h + oi * g.fh) * g.w + oj * g.fw) * g.c;
                for ch in 0..g.c {
                    let base = x[first + ch];
                    let mut dev = 0.0;
                    let mut members = 0usize;
                    for i in oi * g.fh..((oi + 1) * g.fh).min(g.h) {
                        for j in oj * g.fw..((oj + 1) * g.fw).min(g.w) {
                            dev += x[((ti * g.h + i) * g.w + j) * g.c + ch] - base;
                            members += 1;
                        }
                    }
                    let padded = g.fh * g.fw - members;
                    // padding zeros deviate from the base by -base each
                    dev -= base * padded as f64;
                    out[dst + ch] = base + dev / n;
                }
            }
        }
    }
    out
}

impl Tape {
    /// Depthwise temporal convolution of `x: [b, t, c]` with `kernel: [c, k]`.
    pub fn dwconv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.value(x), self.value(kernel));
        if xs.rank() != 3 || ks.rank() != 2 || ks.shape()[0] != xs.shape()[2] {
            return Err(Error::Shape {
                op: "dwconv1d",
                lhs: xs.shape().to_vec(),
                rhs: ks.shape().to_vec(),
            });
        }
        let (b, t, c) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let k = ks.shape()[1];
        odd_kernel("dwconv1d", k)?;
        let value = Tensor::from_parts(xs.shape().to_vec(), dwconv1d_fwd(xs.data(), ks.data(), b, t, c, k));
        let half = k / 2;
        self.record("dwconv1d", &[x, kernel], value, move |ctx| {
            let g = ctx.grad.data();
            let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = ctx.needs[0].then(|| vec![0.0; b * t * c]);
            let mut dw = ctx.needs[1].then(|| vec![0.0; c * k]);
            for bi in 0..b {
                for ti in 0..t {
                    let go = (bi * t + ti) * c;
                    for j in 0..k {
                        let src = ti as isize + j as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let so = (bi * t + src as usize) * c;
                        for ch in 0..c {
                            if let Some(dx) = dx.as_mut() {
                                dx[so + ch] += g[go + ch] * wd[ch * k + j];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[ch * k + j] += g[go + ch] * xd[so + ch];
                            }
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(vec![b, t, c], d)),
                dw.map(|d| Tensor::from_parts(vec![c, k], d)),
            ]
        })
    }

    /// Depthwise spatial convolution of `x: [b, h, w, c]` with `kernel: [c, k, k]`.
    pub fn dwconv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.value(x), self.value(kernel));
        if xs.rank() != 4 || ks.rank() != 3 || ks.shape()[0] != xs.shape()[3] || ks.shape()[1] != ks.shape()[2] {
            return Err(Error::Shape {
                op: "dwconv2d",
                lhs: xs.shape().to_vec(),
                rhs: ks.shape().to_vec(),
            });
        }
        let dims = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
        let k = ks.shape()[1];
        odd_kernel("dwconv2d", k)?;
        let value = Tensor::from_parts(xs.shape().to_vec(), dwconv2d_fwd(xs.data(), ks.data(), dims, k));
        self.record("dwconv2d", &[x, kernel], value, move |ctx| {
            let [b, h, wd, c] = dims;
            let half = k as isize / 2;
            let g = ctx.grad.data();
            let (xd, kd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
            let mut dk = ctx.needs[1].then(|| vec![0.0; c * k * k]);
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..wd {
                        let o = ((bi * h + i) * wd + j) * c;
                        for di in 0..k {
                            let si = i as isize + di as isize - half;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for dj in 0..k {
                                let sj = j as isize + dj as isize - half;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                let s = ((bi * h + si as usize) * wd + sj as usize) * c;
                                for ch in 0..c {
                                    let widx = (ch * k + di) * k + dj;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[s + ch] += g[o + ch] * kd[widx];
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        dk[widx] += g[o + ch] * xd[s + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(dims.to_vec(), d)),
                dk.map(|d| Tensor::from_parts(vec![c, k, k], d)),
            ]
        })
    }

    /// Block-mean pooling of `x: [t, h, w, c]` by `(fh, fw)`.
    pub fn avgpool_spatial(&mut self, x: Var, factor: (usize, usize), padding: PoolPadding) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 4 {
            return Err(Error::Shape {
                op: "avgpool_spatial",
                lhs: xs.shape().to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (fh, fw) = factor;
        if fh == 0 || fw == 0 {
            return Err(Error::config("avgpool_spatial: zero pooling factor"));
        }
        let [t, h, w, c] = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
        if padding == PoolPadding::Exact && (h % fh != 0 || w % fw != 0) {
            return Err(Error::config(format!(
                "avgpool_spatial: factor ({fh}, {fw}) does not divide spatial extent ({h}, {w})"
            )));
        }
        let geom = PoolGeom {
            t,
            h,
            w,
            c,
            fh,
            fw,
            oh: h.div_ceil(fh),
            ow: w.div_ceil(fw),
        };
        let scale = 1.0 / (fh * fw) as f64;
        let out = block_means(xs.data(), &geom);
        let value = Tensor::from_parts(vec![t, geom.oh, geom.ow, c], out);
        self.record("avgpool_spatial", &[x], value, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; t * h * w * c];
            geom.for_each(|s, d| {
                for ch in 0..c {
                    dx[s + ch] = g[d + ch] * scale;
                }
            });
            vec![Some(Tensor::from_parts(vec![t, h, w, c], dx))]
        })
    }

    /// Nearest-neighbour upsampling of `x: [t, h', w', c]` by `(fh, fw)`.
    pub fn upsample_nearest(&mut self, x: Var, factor: (usize, usize)) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "upsample_nearest",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (h, w) = (s[1] * factor.0, s[2] * factor.1);
        self.upsample_nearest_to(x, factor, (h, w))
    }

    /// Upsamples then crops to `(h, w)`; the inverse of zero-padded pooling.
    pub fn upsample_nearest_to(&mut self, x: Var, factor: (usize, usize), size: (usize, usize)) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 4 {
            return Err(Error::Shape {
                op: "upsample_nearest",
                lhs: xs.shape().to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (fh, fw) = factor;
        if fh == 0 || fw == 0 {
            return Err(Error::config("upsample_nearest: zero factor"));
        }
        let [t, oh, ow, c] = [xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]];
        let (h, w) = size;
        if h == 0 || w == 0 || h.div_ceil(fh) != oh || w.div_ceil(fw) != ow {
            return Err(Error::config(format!(
                "upsample_nearest: cannot reach ({h}, {w}) from ({oh}, {ow}) with factor ({fh}, {fw})"
            )));
        }
        let geom = PoolGeom {
            t,
            h,
            w,
            c,
            fh,
            fw,
            oh,
            ow,
        };
        let mut out = vec![0.0; t * h * w * c];
        let xd = xs.data();
        geom.for_each(|s, d| out[s..s + c].copy_from_slice(&xd[d..d + c]));
        let value = Tensor::from_parts(vec![t, h, w, c], out);
        self.record("upsample_nearest", &[x], value, move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; t * oh * ow * c];
            geom.for_each(|s, d| {
                for ch in 0..c {
                    dx[d + ch] += g[s + ch];
                }
            });
            vec![Some(Tensor::from_parts(vec![t, oh, ow, c], dx))]
        })
    }

    /// Replicates `x: [t, c]` over an `h x w` grid, giving `[t, h, w, c]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "broadcast_spatial",
                lhs: s,
                rhs: vec![0, 0],
            });
        }
        let x4 = self.reshape(x, &[s[0], 1, 1, s[1]])?;
        self.upsample_nearest(x4, (h, w))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xs, gs, bs) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xs.last_dim();
        if gs.shape() != [c] || bs.shape() != [c] {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: xs.shape().to_vec(),
                rhs: gs.shape().to_vec(),
            });
        }
        let rows = xs.numel() / c;
        let mut xhat = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.numel()];
        for r in 0..rows {
            let row = &xs.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gs.data()[j] + bs.data()[j];
            }
        }
        let value = Tensor::from_parts(xs.shape().to_vec(), out);
        self.record("layernorm", &[x, gamma, beta], value, move |ctx| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let mut dx = ctx.needs[0].then(|| vec![0.0; rows * c]);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..c {
                    let dxh = gr[j] * gamma[j];
                    m1 += dxh;
                    m2 += dxh * xr[j];
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                }
                m1 /= c as f64;
                m2 /= c as f64;
                if let Some(dx) = dx.as_mut() {
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (gr[j] * gamma[j] - m1 - xr[j] * m2);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                ctx.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                ctx.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        })
    }
}
