//! Step-by-step reference for the TB-SSM block, written with nested
//! vectors and no shared code with the library implementation.

use estf_core::numerics::{softplus, Params, Tensor};
use estf_core::ssm::{ScanMode, SsmConfig, SsmParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Seq = Vec<Vec<f64>>; // [t][c]

pub fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &n) in idx.iter().zip(t.shape()) {
        flat = flat * n + i;
    }
    t.data()[flat]
}

pub fn seq_of(x: &Tensor, b: usize) -> Seq {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    (0..t).map(|ti| (0..d).map(|c| at(x, &[b, ti, c])).collect()).collect()
}

pub fn project(v: &[f64], w: &Tensor, col0: usize, ncols: usize) -> Vec<f64> {
    (0..ncols)
        .map(|j| v.iter().enumerate().map(|(i, vi)| vi * at(w, &[i, col0 + j])).sum())
        .collect()
}

pub fn norm(v: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    v.iter()
        .enumerate()
        .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i])
        .collect()
}

pub fn naive_scan(u: &Seq, a_log: &Tensor, p: &SsmParams) -> Seq {
    let d = u[0].len();
    let s = a_log.shape()[1];
    let mut h = vec![vec![0.0; s]; d];
    let mut ys = Vec::new();
    for tok in u {
        let bc = project(tok, &p.w_bc.value, 0, 2 * s);
        let dt = match p.mode {
            ScanMode::Selective => softplus(project(tok, &p.w_delta.value, 0, 1)[0] + p.b_delta.value.data()[0]),
            ScanMode::Literal => 1.0,
        };
        let mut y = vec![0.0; d];
        for c in 0..d {
            for k in 0..s {
                let a = -at(a_log, &[c, k]).exp();
                h[c][k] = (dt * a).exp() * h[c][k] + dt * bc[k] * tok[c];
                y[c] += bc[s + k] * h[c][k];
            }
        }
        ys.push(y);
    }
    ys
}

pub fn naive_tb_ssm(x: &Tensor, p: &SsmParams) -> Tensor {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for bi in 0..b {
        let xs = seq_of(x, bi);
        let normed: Seq = xs.iter().map(|v| norm(v, &p.ln_gamma.value, &p.ln_beta.value)).collect();
        let fwd: Seq = normed.iter().map(|v| project(v, &p.w_in.value, 0, d)).collect();
        let mut bwd: Seq = normed.iter().map(|v| project(v, &p.w_in.value, d, d)).collect();
        bwd.reverse();
        let yf = naive_scan(&fwd, &p.a_log_fwd.value, p);
        let mut yb = naive_scan(&bwd, &p.a_log_bwd().value, p);
        yb.reverse();
        for ti in 0..t {
            let cat: Vec<f64> = yf[ti].iter().chain(&yb[ti]).copied().collect();
            let mut o = project(&cat, &p.w_out.value, 0, d);
            if let Some(w) = &p.w_gate {
                let z = project(&normed[ti], &w.value, 0, d);
                for (oc, zc) in o.iter_mut().zip(z) {
                    *oc *= zc / (1.0 + (-zc).exp());
                }
            }
            out.extend(o);
        }
    }
    Tensor::new(&[b, t, d], out).unwrap()
}

pub fn randomize(p: &mut impl Params, rng: &mut ChaCha8Rng, scale: f64) {
    p.visit_mut("", &mut |name, param| {
        if name.starts_with("a_log") {
            for v in param.value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        } else {
            for v in param.value.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    });
}

pub fn random_block(rng: &mut ChaCha8Rng, d: usize, cfg: &SsmConfig) -> SsmParams {
    let mut p = SsmParams::init(d, cfg, rng);
    randomize(&mut p, rng, 0.3);
    p
}

pub fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn flip_time(x: &Tensor) -> Tensor {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(x.shape(), |i| {
        let (bi, ti, c) = (i / (t * d), (i / d) % t, i % d);
        x.data()[(bi * t + (t - 1 - ti)) * d + c]
    })
    .reshape(&[b, t, d])
    .unwrap()
}

pub fn modes() -> [ScanMode; 2] {
    [ScanMode::Selective, ScanMode::Literal]
}

