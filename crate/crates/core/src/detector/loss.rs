use serde::{Deserialize, Serialize};

use super::{HeadOutput, Targets};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    /// Weight of foreground steps; background steps get `1 - alpha`.
    pub alpha: f64,
    pub lambda_reg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha: 0.25,
            lambda_reg: 1.0,
        }
    }
}

/// `1 - IoU + rho^2 / c^2` for segments given as distances `(a, b)` to the
/// left and right of a shared centre, `pred` against `gt`.
pub fn diou_1d(pred: [f64; 2], gt: [f64; 2]) -> f64 {
    diou_with_grad(pred, gt).0
}

fn diou_with_grad(p: [f64; 2], g: [f64; 2]) -> (f64, [f64; 2]) {
    let inter = p[0].min(g[0]) + p[1].min(g[1]);
    let union = p[0] + p[1] + g[0] + g[1] - inter;
    let iou = inter / union;
    let enclose = p[0].max(g[0]) + p[1].max(g[1]);
    let rho = ((p[1] - p[0]) - (g[1] - g[0])) / 2.0;
    let loss = 1.0 - iou + rho * rho / (enclose * enclose);
    let mut grad = [0.0; 2];
    for k in 0..2 {
        let d_inter = if p[k] < g[k] { 1.0 } else { 0.0 };
        let d_union = 1.0 - d_inter;
        let d_iou = (d_inter * union - inter * d_union) / (union * union);
        let d_enclose = if p[k] > g[k] { 1.0 } else { 0.0 };
        let d_rho = if k == 0 { -0.5 } else { 0.5 };
        grad[k] = -d_iou + 2.0 * rho * d_rho / (enclose * enclose)
            - 2.0 * rho * rho * d_enclose / (enclose * enclose * enclose);
    }
    (loss, grad)
}

impl Tape {
    /// Summed softmax focal loss of `logits: [m, k]` against class indices.
    /// Rows whose target is `background` are weighted `1 - alpha`, others
    /// `alpha`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], background: usize, cfg: &LossConfig) -> Result<Var> {
        let ls = self.value(logits);
        if ls.rank() != 2 || ls.shape()[0] != targets.len() || targets.iter().any(|&y| y >= ls.shape()[1]) {
            return Err(Error::Shape {
                op: "focal_loss",
                lhs: ls.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (m, k) = (ls.shape()[0], ls.shape()[1]);
        let (gamma, alpha) = (cfg.gamma, cfg.alpha);
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for i in 0..m {
            let row = &ls.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            let y = targets[i];
            let a = if y == background { 1.0 - alpha } else { alpha };
            let log_p = row[y] - lse;
            let q = 1.0 - log_p.exp();
            total -= a * q.max(0.0).powf(gamma) * log_p;
        }
        let targets = targets.to_vec();
        self.record("focal_loss", &[logits], Tensor::scalar(total), move |ctx| {
            let g = ctx.grad.item();
            let lg = ctx.inputs[0].data();
            let mut d = vec![0.0; m * k];
            for i in 0..m {
                let y = targets[i];
                let a = if y == background { 1.0 - alpha } else { alpha };
                let row = &lg[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                let log_p = row[y] - lse;
                let p = log_p.exp();
                let q = (1.0 - p).max(0.0);
                // d/dz_j of -a q^gamma log p = -a (q^gamma - gamma q^(gamma-1) p log p)(delta_jy - p_j)
                let pow1 = if q > 0.0 { q.powf(gamma - 1.0) } else { 0.0 };
                let coef = -a * (q.powf(gamma) - gamma * pow1 * p * log_p);
                for j in 0..k {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    d[i * k + j] = g * coef * (delta - probs[i * k + j]);
                }
            }
            vec![Some(Tensor::from_parts(vec![m, k], d))]
        })
    }

    /// Summed DIoU loss of `pred: [p, 2]` against fixed `gt: [p, 2]`.
    pub fn diou_loss(&mut self, pred: Var, gt: &Tensor) -> Result<Var> {
        let ps = self.value(pred);
        if ps.rank() != 2 || ps.shape()[1] != 2 || ps.shape() != gt.shape() {
            return Err(Error::Shape {
                op: "diou_loss",
                lhs: ps.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let n = ps.shape()[0];
        let mut total = 0.0;
        let mut grads = vec![0.0; n * 2];
        for i in 0..n {
            let p = [ps.data()[2 * i], ps.data()[2 * i + 1]];
            let g = [gt.data()[2 * i], gt.data()[2 * i + 1]];
            let (l, dg) = diou_with_grad(p, g);
            total += l;
            grads[2 * i..2 * i + 2].copy_from_slice(&dg);
        }
        self.record("diou_loss", &[pred], Tensor::scalar(total), move |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::from_parts(vec![n, 2], grads.iter().map(|v| v * g).collect()))]
        })
    }
}

/// Loss node plus its parts for logging.
pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub n_pos: usize,
}

/// Focal classification over every step plus `lambda_reg` times DIoU
/// regression over positive steps, both divided by `max(1, positives)`.
/// Without positives the regression term is exactly zero.
pub fn detection_loss(tape: &mut Tape, out: &HeadOutput, targets: &Targets, cfg: &LossConfig) -> Result<LossParts> {
    let k = tape.shape(out.cls)[1];
    let background = k - 1;
    let labels: Vec<usize> = targets.labels.iter().map(|l| l.unwrap_or(background)).collect();
    let pos = targets.positives();
    let norm = 1.0 / pos.len().max(1) as f64;
    let cls_sum = tape.focal_loss(out.cls, &labels, background, cfg)?;
    let cls = tape.scale(cls_sum, norm)?;
    let cls_value = tape.value(cls).item();
    if pos.is_empty() {
        return Ok(LossParts {
            total: cls,
            cls: cls_value,
            reg: 0.0,
            n_pos: 0,
        });
    }
    let pred = tape.gather_rows(out.reg, &pos)?;
    let gt = Tensor::new(&[pos.len(), 2], pos.iter().flat_map(|&i| targets.offsets[i]).collect())?;
    let reg_sum = tape.diou_loss(pred, &gt)?;
    let reg = tape.scale(reg_sum, norm * cfg.lambda_reg)?;
    let reg_value = tape.value(reg).item();
    let total = tape.add(cls, reg)?;
    Ok(LossParts {
        total,
        cls: cls_value,
        reg: reg_value,
        n_pos: pos.len(),
    })
}
