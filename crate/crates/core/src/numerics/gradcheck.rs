//! Central-difference gradient checking.

use super::param::{Parameter, Params};
use super::tape::{Tape, Var};
use super::tensor::{unravel, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true
/// gradient is essentially zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol_rel: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            tol_rel: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Parameter and index of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
    pub tol_rel: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol_rel
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

struct Worst {
    err: f64,
    at: String,
    n: usize,
}

impl Worst {
    fn new() -> Self {
        Worst {
            err: 0.0,
            at: String::from("-"),
            n: 0,
        }
    }

    fn update(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.n += 1;
        if e > self.err || self.n == 1 {
            self.err = self.err.max(e);
            self.at = at();
        }
    }

    fn report(self, tol_rel: f64) -> CheckReport {
        CheckReport {
            max_rel_error: self.err,
            worst: self.at,
            entries_checked: self.n,
            tol_rel,
        }
    }
}

fn scalar_loss(tape: &Tape, loss: Var, at: &str) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            lhs: v.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let l = v.item();
    if !l.is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check loss".into(),
            location: at.to_string(),
        });
    }
    Ok(l)
}

/// Checks `f` with respect to each tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_loss(&tape, loss, "unperturbed")?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor], at: &str| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        scalar_loss(&tape, loss, at)
    };

    let mut worst = Worst::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let at = || format!("input {k} {:?}", unravel(i, input.shape()));
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work, &at())?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work, &at())?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst.update(analytic[k].data()[i], numeric, at);
        }
    }
    Ok(worst.report(opts.tol_rel))
}

/// Checks `f` with respect to every trainable parameter of `model`.
pub fn grad_check_params<M, F>(model: &mut M, f: F, opts: CheckOptions) -> Result<CheckReport>
where
    M: Params,
    F: Fn(&mut Tape, &M) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, model)?;
    scalar_loss(&tape, loss, "unperturbed")?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    model.visit("", &mut |name, p: &Parameter| {
        if p.requires_grad {
            let g = tape
                .param_var(p)
                .and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            analytic.push((name.to_string(), g));
        }
    });
    drop(grads);
    drop(tape);

    let mut worst = Worst::new();
    for (slot, (name, grad)) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let at = || format!("{name} {:?}", unravel(i, grad.shape()));
            let mut losses = [0.0; 2];
            for (j, delta) in [opts.eps, -opts.eps].into_iter().enumerate() {
                nudge(model, slot, i, delta);
                let mut tape = Tape::new();
                let res = f(&mut tape, model).and_then(|l| scalar_loss(&tape, l, &at()));
                nudge(model, slot, i, -delta);
                losses[j] = res?;
            }
            let numeric = (losses[0] - losses[1]) / (2.0 * opts.eps);
            worst.update(grad.data()[i], numeric, at);
        }
    }
    Ok(worst.report(opts.tol_rel))
}

/// Adds `delta` to entry `i` of the `slot`-th trainable parameter.
fn nudge<M: Params>(model: &mut M, slot: usize, i: usize, delta: f64) {
    let mut k = 0;
    model.visit_mut("", &mut |_, p| {
        if p.requires_grad {
            if k == slot {
                p.value.data_mut()[i] += delta;
            }
            k += 1;
        }
    });
}
