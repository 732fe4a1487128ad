//! Minimal dense-tensor engine for small convolutional classifiers.
//!
//! Values live in row-major [`Tensor`]s. A [`Tape`] records every primitive
//! applied during a forward pass; [`Tape::backward`] replays it in reverse to
//! produce gradients for every node that requires them. Trainable tensors are
//! owned by a [`ParamSet`] and updated by [`Sgd`].
//!
//! All training code runs in `f32`. The engine is generic over [`Element`] so
//! the same forward and backward code can be instantiated in `f64`, which is
//! what the finite-difference checks in [`gradcheck`] rely on.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, grad_norm, Sgd};
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
