//! Selective scan and the bidirectional TB-SSM block.
//!
//! The block normalizes its input once, projects it to two streams, runs
//! the second stream time-reversed, and scans each with its own state
//! matrix. The token-dependent `B_t`, `C_t` and step size are produced by
//! weights shared between the two directions.

mod attention;
mod scan;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{attention_baseline, AttentionParams};
pub use scan::{selective_scan_values, ScanMethod};

use crate::error::Result;
use crate::impl_params;
use crate::numerics::{Parameter, Tape, Tensor, Var, LN_EPS};

/// How step sizes are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// `delta_t = softplus(x_t . w_delta + b)`, one value per token.
    #[default]
    Selective,
    /// `delta_t = 1`, so the transition is the constant `exp(A)`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    pub d_state: usize,
    pub mode: ScanMode,
    pub method: ScanMethod,
    /// Multiply the block output by `silu(norm(x) . w_gate)`.
    pub gate: bool,
    /// Use a single state matrix for both directions.
    pub tied_a: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 8,
            mode: ScanMode::Selective,
            method: ScanMethod::Sequential,
            gate: false,
            tied_a: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub ln_gamma: Parameter,
    pub ln_beta: Parameter,
    /// `[d, 2d]`; columns `..d` feed the forward stream.
    pub w_in: Parameter,
    /// `[d, 2s]`; columns `..s` give `B_t`, the rest `C_t`.
    pub w_bc: Parameter,
    /// `[d, 1]`
    pub w_delta: Parameter,
    /// `[1]`
    pub b_delta: Parameter,
    pub a_log_fwd: Parameter,
    /// `None` when the state matrix is tied to the forward one.
    pub a_log_bwd: Option<Parameter>,
    /// `[2d, d]`; rows `..d` read the forward output.
    pub w_out: Parameter,
    pub w_gate: Option<Parameter>,
    pub mode: ScanMode,
    pub method: ScanMethod,
}

impl_params!(SsmParams {
    ln_gamma,
    ln_beta,
    w_in,
    w_bc,
    w_delta,
    b_delta,
    a_log_fwd,
    a_log_bwd,
    w_out,
    w_gate,
});

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Parameter {
    Parameter::trainable(Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng))
}

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(d: usize, cfg: &SsmConfig, rng: &mut R) -> Self {
        let s = cfg.d_state;
        let a_log = Tensor::from_fn(&[d, s], |i| ((i % s) as f64 + 1.0).ln());
        let a_log_bwd = (!cfg.tied_a).then(|| {
            let mut t = a_log.clone();
            for v in t.data_mut() {
                *v += rng.random_range(-0.01..0.01);
            }
            Parameter::trainable(t)
        });
        let dt: f64 = rng.random_range(0.01f64.ln()..0.1f64.ln()).exp();
        SsmParams {
            ln_gamma: Parameter::trainable(Tensor::ones(&[d])),
            ln_beta: Parameter::trainable(Tensor::zeros(&[d])),
            w_in: glorot(d, 2 * d, rng),
            w_bc: glorot(d, 2 * s, rng),
            w_delta: glorot(d, 1, rng),
            b_delta: Parameter::trainable(Tensor::scalar(inverse_softplus(dt))),
            a_log_fwd: Parameter::trainable(a_log),
            a_log_bwd,
            w_out: glorot(2 * d, d, rng),
            w_gate: cfg.gate.then(|| glorot(d, d, rng)),
            mode: cfg.mode,
            method: cfg.method,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.value.shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a_log_fwd.value.shape()[1]
    }

    pub fn a_log_bwd(&self) -> &Parameter {
        self.a_log_bwd.as_ref().unwrap_or(&self.a_log_fwd)
    }

    /// The same block with the roles of the two directions exchanged:
    /// state matrices swapped, `w_in` column halves swapped and `w_out` row
    /// halves swapped. Running it on `x` and flipping the result gives the
    /// original block's output on `flip(x)`.
    pub fn swapped(&self) -> SsmParams {
        let mut out = self.clone();
        if let Some(bwd) = out.a_log_bwd.as_mut() {
            std::mem::swap(&mut out.a_log_fwd, bwd);
        }
        let d = self.d_model();
        out.w_in.value = Tensor::from_fn(&[d, 2 * d], |i| {
            let (r, c) = (i / (2 * d), i % (2 * d));
            self.w_in.value.data()[r * 2 * d + (c + d) % (2 * d)]
        });
        out.w_out.value = Tensor::from_fn(&[2 * d, d], |i| {
            let (r, c) = (i / d, i % d);
            self.w_out.value.data()[((r + d) % (2 * d)) * d + c]
        });
        out
    }
}

/// Scans one stream: generates `B_t`, `C_t`, `delta_t` from its own tokens.
fn scan_stream(tape: &mut Tape, u: Var, a_log: &Parameter, p: &SsmParams) -> Result<Var> {
    let s = p.d_state();
    let shape = tape.shape(u).to_vec();
    let w_bc = tape.param(&p.w_bc);
    let bc = tape.matmul(u, w_bc)?;
    let parts = tape.split(bc, 2, &[s, s])?;
    let delta = match p.mode {
        ScanMode::Selective => {
            let w = tape.param(&p.w_delta);
            let b = tape.param(&p.b_delta);
            let z = tape.matmul(u, w)?;
            let z = tape.add_bias(z, b)?;
            let dt = tape.softplus(z)?;
            tape.expand_last(dt, shape[2])?
        }
        ScanMode::Literal => tape.constant(Tensor::ones(&shape)),
    };
    let a = tape.param(a_log);
    tape.selective_scan(u, a, parts[0], parts[1], delta, p.method)
}

/// TB-SSM block on `x: [b, t, d]` (`b` independent sequences).
pub fn tb_ssm_forward(tape: &mut Tape, x: Var, p: &SsmParams) -> Result<Var> {
    let d = p.d_model();
    let g = tape.param(&p.ln_gamma);
    let b = tape.param(&p.ln_beta);
    let xn = tape.layernorm(x, g, b, LN_EPS)?;
    let w_in = tape.param(&p.w_in);
    let u = tape.matmul(xn, w_in)?;
    let streams = tape.split(u, 2, &[d, d])?;
    let xb = tape.flip(streams[1], 1)?;
    let yf = scan_stream(tape, streams[0], &p.a_log_fwd, p)?;
    let yb = scan_stream(tape, xb, p.a_log_bwd(), p)?;
    let yb = tape.flip(yb, 1)?;
    let y = tape.concat(&[yf, yb], 2)?;
    let w_out = tape.param(&p.w_out);
    let out = tape.matmul(y, w_out)?;
    match &p.w_gate {
        Some(w) => {
            let w = tape.param(w);
            let z = tape.matmul(xn, w)?;
            let gate = tape.silu(z)?;
            tape.mul(out, gate)
        }
        None => Ok(out),
    }
}

/// Forward-only evaluation of [`tb_ssm_forward`].
pub fn tb_ssm_values(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = tb_ssm_forward(&mut tape, xv, p)?;
    Ok(tape.value(y).clone())
}

