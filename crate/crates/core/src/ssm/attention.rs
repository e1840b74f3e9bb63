//! Single-head softmax self-attention over time, the quadratic baseline.
//!
//! The fused op never materializes the `[t, t]` score matrix: each query
//! row is normalized on the fly and the backward pass recomputes it.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impl_params;
use crate::numerics::{Parameter, Tape, Tensor, Var, LN_EPS};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub ln_gamma: Parameter,
    pub ln_beta: Parameter,
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub w_o: Parameter,
}

impl_params!(AttentionParams { ln_gamma, ln_beta, w_q, w_k, w_v, w_o });

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = || Parameter::trainable(Tensor::uniform(&[d, d], bound, rng));
        AttentionParams {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            ln_gamma: Parameter::trainable(Tensor::ones(&[d])),
            ln_beta: Parameter::trainable(Tensor::zeros(&[d])),
        }
    }
}

/// `softmax(q_i . k_j / sqrt(d))` weights for one query row, written into `p`.
fn row_weights(q: &[f64], k: &[f64], d: usize, scale: f64, p: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, pj) in p.iter_mut().enumerate() {
        let kj = &k[j * d..(j + 1) * d];
        *pj = scale * q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
        max = max.max(*pj);
    }
    let mut z = 0.0;
    for pj in p.iter_mut() {
        *pj = (*pj - max).exp();
        z += *pj;
    }
    for pj in p.iter_mut() {
        *pj /= z;
    }
}

impl Tape {
    /// `softmax(q k^T / sqrt(d)) v` per batch row, for `q, k, v: [b, t, d]`.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::Shape {
                op: "softmax_attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; b * t * d];
        out.par_chunks_mut(d).enumerate().for_each_init(
            || vec![0.0; t],
            |p, (row, o)| {
                let bi = row / t;
                let kb = &kd[bi * t * d..(bi + 1) * t * d];
                let vb = &vd[bi * t * d..(bi + 1) * t * d];
                row_weights(&qd[row * d..(row + 1) * d], kb, d, scale, p);
                for (j, pj) in p.iter().enumerate() {
                    for (oc, vc) in o.iter_mut().zip(&vb[j * d..(j + 1) * d]) {
                        *oc += pj * vc;
                    }
                }
            },
        );
        let value = Tensor::from_parts(shape.clone(), out);
        self.record("softmax_attention", &[q, k, v], value, move |ctx| {
            let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let g = ctx.grad.data();
            let mut dq = vec![0.0; b * t * d];
            let mut dk = vec![0.0; b * t * d];
            let mut dv = vec![0.0; b * t * d];
            let mut p = vec![0.0; t];
            let mut dp = vec![0.0; t];
            for bi in 0..b {
                let base = bi * t * d;
                let kb = &kd[base..base + t * d];
                let vb = &vd[base..base + t * d];
                for i in 0..t {
                    let row = base + i * d;
                    row_weights(&qd[row..row + d], kb, d, scale, &mut p);
                    let gi = &g[row..row + d];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let vj = &vb[j * d..(j + 1) * d];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot += p[j] * dp[j];
                        for c in 0..d {
                            dv[base + j * d + c] += p[j] * gi[c];
                        }
                    }
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for c in 0..d {
                            dq[row + c] += ds * kb[j * d + c];
                            dk[base + j * d + c] += ds * qd[row + c];
                        }
                    }
                }
            }
            let mk = |v| Some(Tensor::from_parts(vec![b, t, d], v));
            vec![mk(dq), mk(dk), mk(dv)]
        })
    }
}

/// Pre-norm single-head attention block on `x: [b, t, d]`.
pub fn attention_baseline(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<Var> {
    let g = tape.param(&p.ln_gamma);
    let b = tape.param(&p.ln_beta);
    let xn = tape.layernorm(x, g, b, LN_EPS)?;
    let mut proj = |w: &Parameter| -> Result<Var> {
        let w = tape.param(w);
        tape.matmul(xn, w)
    };
    let (q, k, v) = (proj(&p.w_q)?, proj(&p.w_k)?, proj(&p.w_v)?);
    let a = tape.softmax_attention(q, k, v)?;
    let w_o = tape.param(&p.w_o);
    tape.matmul(a, w_o)
}
