//! Stateful layers built from the primitive ops, with cached-input backward passes.

mod init;
mod layers;

pub use init::{Initializer, Rng};
pub use layers::{BatchNorm2d, Conv2d, Linear, MhDwConv};

pub use crate::ops::Mode;

use crate::analysis::profile::ProfileReport;
use crate::error::Result;
use crate::tensor::{Scalar, Shape, Tensor};

/// Optimizer grouping; weight decay on [`ParamGroup::NormOrBias`] can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weight,
    NormOrBias,
}

pub struct ParamMut<'a, T> {
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
    pub group: ParamGroup,
}

pub enum EntryMut<'a, T> {
    Param(ParamMut<'a, T>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut [T]),
}

pub enum Entry<'a, T> {
    Param { value: &'a Tensor<T>, group: ParamGroup },
    Buffer(&'a [T]),
}

pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Accumulates parameter gradients and returns the gradient wrt the last forward input.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    /// Visits parameters and buffers in declaration order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>));

    /// Appends parameter and multiply-accumulate counts for a batch-1 input and returns the output shape.
    fn profile(&self, name: &str, input: Shape, report: &mut ProfileReport) -> Result<Shape>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grad<T: Scalar, M: Module<T> + ?Sized>(m: &mut M) {
    m.visit_mut("", &mut |_, e| {
        if let EntryMut::Param(p) = e {
            p.grad.fill(T::zero());
        }
    });
}

pub fn param_count<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> usize {
    let mut total = 0;
    m.visit("", &mut |_, e| {
        if let Entry::Param { value, .. } = e {
            total += value.numel();
        }
    });
    total
}

/// Every parameter and buffer as `(name, shape, values)`, in declaration order.
pub fn named_state<T: Scalar, M: Module<T> + ?Sized>(m: &M) -> Vec<(String, Shape, Vec<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, e| match e {
        Entry::Param { value, .. } => out.push((name.to_string(), value.shape(), value.data().to_vec())),
        Entry::Buffer(b) => out.push((name.to_string(), Shape::new(b.len(), 1, 1, 1), b.to_vec())),
    });
    out
}

/// Copies parameter and buffer values from `src` into `dst`, converting the element type.
/// Both modules must have identical structure.
pub fn copy_state<A: Scalar, B: Scalar, MA: Module<A> + ?Sized, MB: Module<B> + ?Sized>(
    src: &MA,
    dst: &mut MB,
) -> Result<()> {
    let state = named_state(src);
    let mut it = state.into_iter();
    let mut err = None;
    dst.visit_mut("", &mut |name, e| {
        if err.is_some() {
            return;
        }
        let Some((sname, _, values)) = it.next() else {
            err = Some(crate::error::config_err!("source module has no entry for {name}"));
            return;
        };
        let slot: &mut [B] = match e {
            EntryMut::Param(p) => p.value.data_mut(),
            EntryMut::Buffer(b) => b,
        };
        if sname != name || slot.len() != values.len() {
            err = Some(crate::error::config_err!("state entry {sname} does not match {name}"));
            return;
        }
        for (d, v) in slot.iter_mut().zip(values) {
            *d = B::of(v.as_f64());
        }
    });
    match err {
        Some(e) => Err(e),
        None if it.next().is_some() => Err(crate::error::config_err!("source module has extra state entries")),
        None => Ok(()),
    }
}
