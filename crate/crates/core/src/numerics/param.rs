use std::io::{Read, Write};
use std::path::Path;

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Magic prefix of a checkpoint file (a sequence of named tensor records).
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ESTFCKP1";

/// A model weight together with its gradient buffer.
///
/// Frozen parameters never get a gradient buffer; the trainer relies on
/// that to prove the backbone stayed untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn trainable(value: Tensor) -> Self {
        Parameter {
            value,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Parameter {
            value,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Adds this parameter's gradient from a finished backward pass.
    pub fn accumulate_grad(&mut self, tape: &Tape, grads: &Gradients) {
        if !self.requires_grad {
            return;
        }
        let Some(v) = tape.param_var(self) else { return };
        let Some(g) = grads.get(v) else { return };
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }
}

/// Visits every parameter of a module with a dotted path name.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Parameter));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Parameter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Parameter)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(prefix, self)
    }
}

impl<T: Params> Params for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Parameter)) {
        if let Some(inner) = self {
            inner.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f)
        }
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Parameter)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::Params for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::numerics::Parameter),
            ) {
                $( $crate::numerics::Params::visit(
                    &self.$field,
                    &$crate::numerics::join_path(prefix, stringify!($field)),
                    f,
                ); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::numerics::Parameter),
            ) {
                $( $crate::numerics::Params::visit_mut(
                    &mut self.$field,
                    &$crate::numerics::join_path(prefix, stringify!($field)),
                    f,
                ); )*
            }
        }
    };
}

/// Counts of trainable and total scalar parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub fn count_params<M: Params + ?Sized>(model: &M) -> ParamCount {
    let mut count = ParamCount {
        trainable: 0,
        total: 0,
    };
    model.visit("", &mut |_, p| {
        count.total += p.numel();
        if p.requires_grad {
            count.trainable += p.numel();
        }
    });
    count
}

pub fn zero_grads<M: Params + ?Sized>(model: &mut M) {
    model.visit_mut("", &mut |_, p| p.grad = None);
}

pub fn accumulate_grads<M: Params + ?Sized>(model: &mut M, tape: &Tape, grads: &Gradients) {
    model.visit_mut("", &mut |_, p| p.accumulate_grad(tape, grads));
}

/// Writes every parameter as `(name, tensor)` records.
pub fn save_checkpoint<M: Params + ?Sized>(model: &M, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    model.visit("", &mut |name, p| entries.push((name.to_string(), &p.value)));
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf).expect("write to Vec");
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| fail(e.to_string()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(|e| fail(e.to_string()))?;
    let count = u64::from_le_bytes(word) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        r.read_exact(&mut word).map_err(|e| fail(e.to_string()))?;
        let len = u64::from_le_bytes(word) as usize;
        if len > r.len() {
            return Err(fail("truncated name".into()));
        }
        let (name, rest) = r.split_at(len);
        let name = String::from_utf8(name.to_vec()).map_err(|e| fail(e.to_string()))?;
        r = rest;
        let t = Tensor::read_from(&mut r).map_err(|m| fail(format!("{name}: {m}")))?;
        out.push((name, t));
    }
    if !r.is_empty() {
        return Err(fail(format!("{} trailing bytes", r.len())));
    }
    Ok(out)
}

/// Loads a checkpoint into `model`; every name and shape must match.
pub fn load_checkpoint<M: Params + ?Sized>(model: &mut M, path: &Path) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let mut iter = entries.into_iter();
    let mut err = None;
    model.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match iter.next() {
            Some((n, t)) if n == name && t.shape() == p.value.shape() => p.value = t,
            Some((n, t)) => {
                err = Some(format!("expected {name} {:?}, found {n} {:?}", p.value.shape(), t.shape()))
            }
            None => err = Some(format!("missing {name}")),
        }
    });
    if err.is_none() && iter.next().is_some() {
        err = Some("checkpoint has extra entries".into());
    }
    match err {
        Some(message) => Err(Error::Format {
            path: path.to_path_buf(),
            message,
        }),
        None => Ok(()),
    }
}
