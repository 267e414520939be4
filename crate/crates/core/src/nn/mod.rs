//! Trainable layers: dense, convolution, transposed convolution and batch
//! normalization. No pooling anywhere; spatial resolution changes only
//! through strided (transposed) convolutions.

mod layers;
mod serialize;

pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Dense, Phase};
pub use serialize::{read_tensors, write_tensors, TensorEntry};

use std::collections::BTreeMap;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor};

/// Role of a tensor owned by a module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Updated by the optimizer (as opposed to running statistics).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Anything that owns named tensors.
pub trait Module<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>>;
}

/// Weights ~ Normal(0, 0.02), biases and shifts 0, scales 1, running
/// statistics reset to (0, 1).
pub fn init_params<T: Element, M: Module<T> + ?Sized>(module: &mut M, rng: &mut Rng) {
    module.visit_mut(&mut |_, t, kind| {
        let fill = match kind {
            ParamKind::Weight => {
                *t = Tensor::randn(t.shape(), 0.0, 0.02, rng).with_requires_grad(true);
                return;
            }
            ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => T::zero(),
            ParamKind::Gamma | ParamKind::RunningVar => T::one(),
        };
        t.data_mut().fill(fill);
    });
}

/// Copy the gradients a tape accumulated for this module's parameters into
/// the parameters themselves. Parameters the tape never saw get no grad.
pub fn collect_grads<T: Element, M: Module<T> + ?Sized>(module: &mut M, tape: &Tape<T>) {
    module.visit_mut(&mut |name, t, kind| {
        if !kind.trainable() {
            return;
        }
        match tape.param_grad(name) {
            Some(g) => t.set_grad(g.to_vec()).expect("tape gradient matches parameter"),
            None => t.zero_grad(),
        }
    });
}

/// Fold the batch statistics recorded on `tape` into the running averages
/// of this module's normalization layers, in recording order.
pub fn commit_batch_stats<T: Element, M: Module<T> + ?Sized>(module: &mut M, tape: &Tape<T>) {
    let mut layers = module.batch_norms_mut();
    for update in tape.stat_updates() {
        if let Some(bn) = layers.iter_mut().find(|bn| bn.name() == update.layer) {
            bn.absorb(update);
        }
    }
}

/// Every tensor as `f32`, keyed by name in visiting order.
pub fn state_dict<T: Element, M: Module<T> + ?Sized>(module: &M) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    module.visit(&mut |name, t, _| out.push((name.to_owned(), t.cast::<f32>().with_requires_grad(false))));
    out
}

/// Overwrite every tensor from `entries`; names and shapes must match exactly.
pub fn load_state_dict<T: Element, M: Module<T> + ?Sized>(
    module: &mut M,
    entries: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut by_name: BTreeMap<&str, &Tensor<f32>> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut failure = None;
    module.visit_mut(&mut |name, t, kind| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            Some(src) if src.shape() == t.shape() => {
                *t = src.cast::<T>().with_requires_grad(kind.trainable());
            }
            Some(src) => failure = Some(Error::shape("load_state_dict", t.shape(), src.shape())),
            None => failure = Some(Error::invalid(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::invalid(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

/// Order-sensitive hash over the names and exact bit patterns of the
/// tensors selected by `filter`.
pub fn digest<T: Element, M: Module<T> + ?Sized>(module: &M, filter: impl Fn(ParamKind) -> bool) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    module.visit(&mut |name, t, kind| {
        if filter(kind) {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write_u64(v.to_f64_lossy().to_bits());
            }
        }
    });
    h.finish()
}

/// Number of trainable scalars.
pub fn num_params<T: Element, M: Module<T> + ?Sized>(module: &M) -> usize {
    let mut n = 0;
    module.visit(&mut |_, t, kind| {
        if kind.trainable() {
            n += t.len();
        }
    });
    n
}


/// Copy every tensor of `src` into the identically structured `dst`,
/// converting the element type.
pub fn cast_params<T: Element, U: Element, A, B>(src: &A, dst: &mut B) -> Result<()>
where
    A: Module<T> + ?Sized,
    B: Module<U> + ?Sized,
{
    let mut values = Vec::new();
    src.visit(&mut |name, t, _| values.push((name.to_owned(), t.cast::<U>())));
    let mut values = values.into_iter();
    let mut failure = None;
    dst.visit_mut(&mut |name, t, kind| match values.next() {
        Some((n, v)) if n == name && v.shape() == t.shape() => {
            *t = v.with_requires_grad(kind.trainable());
        }
        _ => {
            failure.get_or_insert_with(|| Error::invalid(format!("structure mismatch at {name}")));
        }
    });
    match (failure, values.next()) {
        (Some(e), _) => Err(e),
        (None, Some((extra, _))) => Err(Error::invalid(format!("unexpected tensor {extra}"))),
        (None, None) => Ok(()),
    }
}
