//! Elementwise, reduction, and layout ops.

use super::tape::{GradCtx, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::config(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `c[m,n] = a[m,k] b[k,n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = g[m,n] b[k,n]^T`
pub(crate) fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]^T g[m,n]`
pub(crate) fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

/// Reverses `data` (laid out as `shape`) along `axis`.
pub(crate) fn flip_data(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..n {
            let src = (o * n + i) * inner;
            let dst = (o * n + (n - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn unary<F, D>(tape: &mut Tape, op: &'static str, x: Var, f: F, df: D) -> Result<Var>
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + 'static,
{
    let value = tape.value(x).map(f);
    tape.record(op, &[x], value, move |c: &GradCtx| {
        let dx = Tensor::from_fn(c.grad.shape(), |i| {
            c.grad.data()[i] * df(c.inputs[0].data()[i], c.output.data()[i])
        });
        vec![Some(dx)]
    })
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", &[a, b], value, |c| {
            vec![Some(c.grad.clone()), Some(c.grad.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", &[a, b], value, |c| {
            vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("mul", &[a, b], value, |c| {
            let da = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y));
            let db = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x));
            vec![da, db]
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.record("scale", &[x], value, move |c| vec![Some(c.grad.map(|g| g * s))])
    }

    /// `x[.., c] + bias[c]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x), self.value(bias));
        if bs.rank() != 1 || bs.shape()[0] != xs.last_dim() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let ch = bs.numel();
        let b = bs.data().to_vec();
        let value = Tensor::from_fn(xs.shape(), |i| xs.data()[i] + b[i % ch]);
        self.record("add_bias", &[x, bias], value, move |c| {
            let db = c.needs[1].then(|| {
                let mut acc = vec![0.0; ch];
                for (i, g) in c.grad.data().iter().enumerate() {
                    acc[i % ch] += g;
                }
                Tensor::from_parts(vec![ch], acc)
            });
            vec![Some(c.grad.clone()), db]
        })
    }

    /// `a[.., m, k] @ b[k, n] -> [.., m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() < 2 || bt.rank() != 2 || at.last_dim() != bt.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let k = at.last_dim();
        let n = bt.shape()[1];
        let m = at.numel() / k;
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, mm(at.data(), bt.data(), m, k, n));
        self.record("matmul", &[a, b], value, move |c| {
            let g = c.grad.data();
            let da = c.needs[0].then(|| {
                Tensor::from_parts(c.inputs[0].shape().to_vec(), mm_nt(g, c.inputs[1].data(), m, n, k))
            });
            let db = c.needs[1]
                .then(|| Tensor::from_parts(vec![k, n], mm_tn(c.inputs[0].data(), g, m, k, n)));
            vec![da, db]
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        unary(self, "exp", x, f64::exp, |_, y| y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        unary(self, "sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        unary(self, "softplus", x, softplus, |x, _| sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        unary(
            self,
            "silu",
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", &[x], value, |c| {
            let g = c.grad.item();
            vec![Some(Tensor::full(c.inputs[0].shape(), g))]
        })
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x);
        check_axis("sum_axis", xs.shape(), axis)?;
        let (outer, n, inner) = axis_split(xs.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xs.data()[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::from_parts(shape, out);
        self.record("sum_axis", &[x], value, move |c| {
            let g = c.grad.data();
            let dx = Tensor::from_fn(c.inputs[0].shape(), |flat| {
                let o = flat / (n * inner);
                let j = flat % inner;
                g[o * inner + j]
            });
            vec![Some(dx)]
        })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("mean_axis", self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.record("reshape", &[x], value, |c| {
            vec![Some(Tensor::from_parts(
                c.inputs[0].shape().to_vec(),
                c.grad.data().to_vec(),
            ))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        let mut seen = vec![false; xs.rank()];
        if perm.len() != xs.rank() || perm.iter().any(|&p| p >= xs.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::config(format!("permute: {perm:?} is not a permutation of rank {}", xs.rank())));
        }
        let (shape, data) = permute_data(xs.data(), xs.shape(), perm);
        let value = Tensor::from_parts(shape, data);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record("permute", &[x], value, move |c| {
            let (shape, data) = permute_data(c.grad.data(), c.grad.shape(), &inverse);
            vec![Some(Tensor::from_parts(shape, data))]
        })
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x);
        check_axis("flip", xs.shape(), axis)?;
        let value = Tensor::from_parts(xs.shape().to_vec(), flip_data(xs.data(), xs.shape(), axis));
        self.record("flip", &[x], value, move |c| {
            vec![Some(Tensor::from_parts(
                c.grad.shape().to_vec(),
                flip_data(c.grad.data(), c.grad.shape(), axis),
            ))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(xs[0]).shape().to_vec();
        check_axis("concat", &first, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &n) in xs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, data);
        self.record("concat", xs, value, move |c| {
            let g = c.grad.data();
            let mut offset = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(k, &n)| {
                    let start = offset;
                    offset += n;
                    c.needs[k].then(|| {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g[base..base + n * inner]);
                        }
                        Tensor::from_parts(c.inputs[k].shape().to_vec(), d)
                    })
                })
                .collect()
        })
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        check_axis("narrow", xs.shape(), axis)?;
        if len == 0 || start + len > xs.shape()[axis] {
            return Err(Error::config(format!(
                "narrow: [{start}, {}) outside axis {axis} of {:?}",
                start + len,
                xs.shape()
            )));
        }
        let (outer, n, inner) = axis_split(xs.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xs.data()[base..base + len * inner]);
        }
        let mut shape = xs.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, data);
        self.record("narrow", &[x], value, move |c| {
            let mut d = vec![0.0; outer * n * inner];
            let g = c.grad.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), d))]
        })
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        check_axis("split", self.shape(x), axis)?;
        if sizes.iter().sum::<usize>() != self.shape(x)[axis] {
            return Err(Error::config(format!(
                "split: sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape(x)
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.narrow(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Repeats a trailing axis of extent 1 to extent `n`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.last_dim() != 1 {
            return Err(Error::Shape {
                op: "expand_last",
                lhs: xs.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_fn(&shape, |i| xs.data()[i / n]);
        self.record("expand_last", &[x], value, move |c| {
            let d: Vec<f64> = c.grad.data().chunks(n).map(|ch| ch.iter().sum()).collect();
            vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), d))]
        })
    }

    /// Selects rows of a `[m, k]` matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= xs.shape()[0]) {
            return Err(Error::config(format!("gather_rows: bad rows for {:?}", xs.shape())));
        }
        let k = xs.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            data.extend_from_slice(&xs.data()[r * k..(r + 1) * k]);
        }
        let value = Tensor::from_parts(vec![rows.len(), k], data);
        let rows = rows.to_vec();
        self.record("gather_rows", &[x], value, move |c| {
            let mut d = Tensor::zeros(c.inputs[0].shape());
            let g = c.grad.data();
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..k {
                    d.data_mut()[r * k + j] += g[i * k + j];
                }
            }
            vec![Some(d)]
        })
    }

    /// Pools a `[t, c]` sequence with window 2 and stride 2; an odd tail
    /// forms a window of one.
    pub fn pool_time_halve(&mut self, x: Var, kind: TimePool) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(Error::Shape {
                op: "pool_time_halve",
                lhs: xs.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (t, ch) = (xs.shape()[0], xs.shape()[1]);
        let out_t = t.div_ceil(2);
        let mut data = vec![0.0; out_t * ch];
        // argmax source row for each output cell (max pooling)
        let mut src = vec![0usize; out_t * ch];
        for o in 0..out_t {
            let lo = 2 * o;
            let hi = (2 * o + 2).min(t);
            for j in 0..ch {
                let cell = o * ch + j;
                match kind {
                    TimePool::Max => {
                        let mut best = lo;
                        for r in lo + 1..hi {
                            if xs.data()[r * ch + j] > xs.data()[best * ch + j] {
                                best = r;
                            }
                        }
                        data[cell] = xs.data()[best * ch + j];
                        src[cell] = best;
                    }
                    TimePool::Mean => {
                        data[cell] = (lo..hi).map(|r| xs.data()[r * ch + j]).sum::<f64>() / (hi - lo) as f64;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![out_t, ch], data);
        self.record("pool_time_halve", &[x], value, move |c| {
            let mut d = vec![0.0; t * ch];
            let g = c.grad.data();
            for o in 0..out_t {
                let lo = 2 * o;
                let hi = (2 * o + 2).min(t);
                for j in 0..ch {
                    let cell = o * ch + j;
                    match kind {
                        TimePool::Max => d[src[cell] * ch + j] += g[cell],
                        TimePool::Mean => {
                            for r in lo..hi {
                                d[r * ch + j] += g[cell] / (hi - lo) as f64;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![t, ch], d))]
        })
    }
}

/// Temporal pooling used between pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimePool {
    Max,
    Mean,
}
