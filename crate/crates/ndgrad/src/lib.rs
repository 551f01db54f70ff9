//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`] that records every op eagerly; [`Tape::backward`]
//! replays it in reverse. Trainable tensors live in a [`ParamStore`] and are
//! updated by an [`Optimizer`]. All math is generic over [`Scalar`]; the
//! `*64` aliases fix the element type to `f64`.

mod error;
mod gradcheck;
mod io;
mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use io::{assign_params, decode_params, encode_params, load_params, save_params};
pub use optim::{Adam, Optimizer, OptimizerState, Sgd};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, conv_out_size, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type ParamStore32 = ParamStore<f32>;
