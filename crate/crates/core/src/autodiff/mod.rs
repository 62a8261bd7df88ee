//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! Every forward step records the primitives it applies on a [`Tape`];
//! [`Tape::backward`] then walks the tape in reverse and returns
//! [`Gradients`] for the leaves. Parameters are bound onto a tape with
//! [`Tape::param`] and receive their gradients via
//! [`Gradients::accumulate`].
//!
//! ```
//! use branch_distill::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&[1], vec![3.0]);
//! let y = tape.mul(&x, &x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[6.0]);
//! ```

pub(crate) mod kernels;
mod ops;
mod tape;
mod tensor;

pub use tape::{BnMode, Gradients, OpKind, Prim, Tape};
pub use tensor::{numel, NodeId, Param, ParamId, Tensor};

/// Detaches `t` from any tape. Free-function form of [`Tensor::detach`].
pub fn detach(t: &Tensor) -> Tensor {
    t.detach()
}
