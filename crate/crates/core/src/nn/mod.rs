//! Minimal CPU layers with explicit backward passes.
//!
//! Every layer exposes `forward(&self, ..) -> (output, cache)` and a matching
//! `backward(&self, cache, grad_out, grads)` that accumulates parameter
//! gradients into a same-typed gradient holder (a zeroed clone of the layer).
//! Forward never mutates the layer, so shared-weight Siamese branches are
//! just two forward calls on the same module.

mod conv;
mod norm;
mod ops;

pub use conv::Conv2d;
pub use norm::{BatchNorm2d, BnCache};
pub use ops::{
    concat_channels, concat_channels_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    upsample2, upsample2_backward, PoolCache,
};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::Scalar;

/// Train/eval switch for layers whose behavior differs between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stable, named traversal over learnable tensors and non-learnable buffers.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>));

    /// Running statistics and other state that is saved but not optimized.
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, ArrayViewD<'_, T>)) {}
    fn visit_buffers_mut(
        &mut self,
        _prefix: &str,
        _f: &mut dyn FnMut(String, ArrayViewMutD<'_, T>),
    ) {
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn zero_params(&mut self) {
        self.visit_mut("", &mut |_, mut v| v.fill(T::zero()));
    }

    /// Owned copies of all learnable tensors, in traversal order.
    fn collect_params(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| out.push((name, v.to_owned())));
        out
    }
}

/// A zero-filled clone used as a gradient accumulator.
pub fn zeros_like<T: Scalar, M: Parameterized<T> + Clone>(m: &M) -> M {
    let mut g = m.clone();
    g.zero_params();
    g
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
