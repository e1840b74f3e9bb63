//! The diagonal selective scan
//!
//! ```text
//! A      = -exp(a_log)                 [d, s]
//! Abar_t = exp(delta_t[d] * A[d, s])
//! h_t    = Abar_t * h_{t-1} + delta_t[d] * B_t[s] * x_t[d]
//! y_t[d] = sum_s C_t[s] * h_t[d, s]
//! ```
//!
//! with `h_0 = 0`, run independently for every batch row and channel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// How the time recurrence is evaluated. Both give the same values up to
/// rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanMethod {
    /// One step after another.
    #[default]
    Sequential,
    /// Each chunk is reduced to an affine map `h -> a*h + b`, chunk maps are
    /// composed left to right, then every chunk is replayed from its carry.
    Chunked { chunk: usize },
}

struct Dims {
    b: usize,
    t: usize,
    d: usize,
    s: usize,
}

fn dims(x: &Tensor, a_log: &Tensor, bs: &Tensor, cs: &Tensor, delta: &Tensor) -> Result<Dims> {
    let bad = |rhs: &Tensor| Error::Shape {
        op: "selective_scan",
        lhs: x.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    if x.rank() != 3 {
        return Err(bad(x));
    }
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if a_log.rank() != 2 || a_log.shape()[0] != d {
        return Err(bad(a_log));
    }
    let s = a_log.shape()[1];
    if bs.shape() != [b, t, s] {
        return Err(bad(bs));
    }
    if cs.shape() != [b, t, s] {
        return Err(bad(cs));
    }
    if delta.shape() != [b, t, d] {
        return Err(bad(delta));
    }
    Ok(Dims { b, t, d, s })
}

fn non_finite(batch: usize, t: usize, channel: usize) -> Error {
    Error::NonFinite {
        op: "selective_scan".into(),
        location: format!("batch {batch}, t {t}, channel {channel}"),
    }
}

/// Plain forward evaluation. When `keep_states` is set the full state
/// history `[b, t, d, s]` is returned as well.
pub fn selective_scan_values(
    x: &Tensor,
    a_log: &Tensor,
    b_seq: &Tensor,
    c_seq: &Tensor,
    delta: &Tensor,
    method: ScanMethod,
    keep_states: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let dm = dims(x, a_log, b_seq, c_seq, delta)?;
    let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
    match method {
        ScanMethod::Sequential => sequential(&dm, x, &a, b_seq, c_seq, delta, keep_states),
        ScanMethod::Chunked { chunk } => {
            if chunk == 0 {
                return Err(Error::config("chunked scan needs chunk >= 1"));
            }
            chunked(&dm, x, &a, b_seq, c_seq, delta, chunk, keep_states)
        }
    }
}

fn sequential(
    dm: &Dims,
    x: &Tensor,
    a: &[f64],
    b_seq: &Tensor,
    c_seq: &Tensor,
    delta: &Tensor,
    keep: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let Dims { b, t, d, s } = *dm;
    let (xd, bd, cd, dd) = (x.data(), b_seq.data(), c_seq.data(), delta.data());
    let mut y = vec![0.0; b * t * d];
    let mut hist = keep.then(|| vec![0.0; b * t * d * s]);
    let mut h = vec![0.0; d * s];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = 0.0);
        for ti in 0..t {
            let row = bi * t + ti;
            let bt = &bd[row * s..(row + 1) * s];
            let ct = &cd[row * s..(row + 1) * s];
            for di in 0..d {
                let dt = dd[row * d + di];
                let u = dt * xd[row * d + di];
                let hs = &mut h[di * s..(di + 1) * s];
                let ar = &a[di * s..(di + 1) * s];
                let mut acc = 0.0;
                for si in 0..s {
                    hs[si] = (dt * ar[si]).exp() * hs[si] + u * bt[si];
                    acc += ct[si] * hs[si];
                }
                if !acc.is_finite() {
                    return Err(non_finite(bi, ti, di));
                }
                y[row * d + di] = acc;
            }
            if let Some(hist) = hist.as_mut() {
                hist[row * d * s..(row + 1) * d * s].copy_from_slice(&h);
            }
        }
    }
    Ok((Tensor::from_parts(vec![b, t, d], y), hist))
}

#[allow(clippy::too_many_arguments)]
fn chunked(
    dm: &Dims,
    x: &Tensor,
    a: &[f64],
    b_seq: &Tensor,
    c_seq: &Tensor,
    delta: &Tensor,
    chunk: usize,
    keep: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let Dims { b, t, d, s } = *dm;
    let (xd, bd, cd, dd) = (x.data(), b_seq.data(), c_seq.data(), delta.data());
    let n_chunks = t.div_ceil(chunk);
    // states laid out [b, t, d, s] like the sequential history
    let mut states = vec![0.0; b * t * d * s];
    for bi in 0..b {
        let base = bi * t * d * s;
        let block = &mut states[base..base + t * d * s];
        // Phase 1: every chunk from a zero state, plus the chunk's total decay.
        let decays: Vec<Vec<f64>> = block
            .par_chunks_mut(chunk * d * s)
            .enumerate()
            .map(|(ci, out)| {
                let mut h = vec![0.0; d * s];
                let mut prod = vec![1.0; d * s];
                for (k, step) in out.chunks_mut(d * s).enumerate() {
                    let row = bi * t + ci * chunk + k;
                    for di in 0..d {
                        let dt = dd[row * d + di];
                        let u = dt * xd[row * d + di];
                        for si in 0..s {
                            let ab = (dt * a[di * s + si]).exp();
                            let idx = di * s + si;
                            h[idx] = ab * h[idx] + u * bd[row * s + si];
                            prod[idx] *= ab;
                        }
                    }
                    step.copy_from_slice(&h);
                }
                prod
            })
            .collect();
        // Phase 2: true state entering each chunk.
        let mut carries = vec![vec![0.0; d * s]; n_chunks];
        for ci in 1..n_chunks {
            let last = (ci * chunk - 1) * d * s;
            for idx in 0..d * s {
                carries[ci][idx] = block[last + idx] + decays[ci - 1][idx] * carries[ci - 1][idx];
            }
        }
        // Phase 3: add the decayed carry into each chunk.
        block
            .par_chunks_mut(chunk * d * s)
            .enumerate()
            .for_each(|(ci, out)| {
                if ci == 0 {
                    return;
                }
                let mut decay = carries[ci].clone();
                for (k, step) in out.chunks_mut(d * s).enumerate() {
                    let row = bi * t + ci * chunk + k;
                    for di in 0..d {
                        let dt = dd[row * d + di];
                        for si in 0..s {
                            let idx = di * s + si;
                            decay[idx] *= (dt * a[idx]).exp();
                            step[idx] += decay[idx];
                        }
                    }
                }
            });
    }
    let mut y = vec![0.0; b * t * d];
    for row in 0..b * t {
        for di in 0..d {
            let h = &states[(row * d + di) * s..(row * d + di + 1) * s];
            let acc: f64 = h.iter().zip(&cd[row * s..(row + 1) * s]).map(|(h, c)| h * c).sum();
            if !acc.is_finite() {
                return Err(non_finite(row / t, row % t, di));
            }
            y[row * d + di] = acc;
        }
    }
    Ok((Tensor::from_parts(vec![b, t, d], y), keep.then_some(states)))
}

impl Tape {
    /// Selective scan of `x: [b, t, d]` with `a_log: [d, s]`, `b_seq`,
    /// `c_seq: [b, t, s]` and step sizes `delta: [b, t, d]`.
    pub fn selective_scan(
        &mut self,
        x: Var,
        a_log: Var,
        b_seq: Var,
        c_seq: Var,
        delta: Var,
        method: ScanMethod,
    ) -> Result<Var> {
        let inputs = [x, a_log, b_seq, c_seq, delta];
        let needs_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let (y, hist) = selective_scan_values(
            self.value(x),
            self.value(a_log),
            self.value(b_seq),
            self.value(c_seq),
            self.value(delta),
            method,
            needs_grad,
        )?;
        let hist = hist.unwrap_or_default();
        self.record("selective_scan", &inputs, y, move |ctx| scan_backward(ctx, &hist))
    }
}

fn scan_backward(ctx: &crate::numerics::GradCtx<'_>, hist: &[f64]) -> Vec<Option<Tensor>> {
    let [x, a_log, b_seq, c_seq, delta] = [0, 1, 2, 3, 4].map(|i| ctx.inputs[i]);
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = a_log.shape()[1];
    let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
    let (xd, bd, cd, dd) = (x.data(), b_seq.data(), c_seq.data(), delta.data());
    let gy = ctx.grad.data();

    let mut gx = vec![0.0; b * t * d];
    let mut ga = vec![0.0; d * s];
    let mut gb = vec![0.0; b * t * s];
    let mut gc = vec![0.0; b * t * s];
    let mut gdelta = vec![0.0; b * t * d];
    let mut carry = vec![0.0; d * s];

    for bi in 0..b {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for ti in (0..t).rev() {
            let row = bi * t + ti;
            let h = &hist[row * d * s..(row + 1) * d * s];
            for di in 0..d {
                let g = gy[row * d + di];
                let dt = dd[row * d + di];
                let xv = xd[row * d + di];
                let mut gdt = 0.0;
                let mut gxv = 0.0;
                for si in 0..s {
                    let idx = di * s + si;
                    let h_prev = if ti > 0 { hist[(row - 1) * d * s + idx] } else { 0.0 };
                    let ab = (dt * a[idx]).exp();
                    gc[row * s + si] += g * h[idx];
                    let gh = g * cd[row * s + si] + carry[idx];
                    let gab = gh * h_prev;
                    gdt += gab * ab * a[idx] + gh * bd[row * s + si] * xv;
                    ga[idx] += gab * ab * dt;
                    gb[row * s + si] += gh * dt * xv;
                    gxv += gh * dt * bd[row * s + si];
                    carry[idx] = gh * ab;
                }
                gx[row * d + di] = gxv;
                gdelta[row * d + di] = gdt;
            }
        }
    }
    // dA/da_log = -exp(a_log) = A
    let ga_log: Vec<f64> = ga.iter().zip(&a).map(|(g, a)| g * a).collect();
    vec![
        ctx.needs[0].then(|| Tensor::from_parts(vec![b, t, d], gx)),
        ctx.needs[1].then(|| Tensor::from_parts(vec![d, s], ga_log)),
        ctx.needs[2].then(|| Tensor::from_parts(vec![b, t, s], gb)),
        ctx.needs[3].then(|| Tensor::from_parts(vec![b, t, s], gc)),
        ctx.needs[4].then(|| Tensor::from_parts(vec![b, t, d], gdelta)),
    ]
}
