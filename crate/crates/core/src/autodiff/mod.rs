//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is built per forward pass. Parameters live in a [`ParamSet`]
//! outside the tape and are placed on it with [`ParamSet::bind`]; after
//! [`Tape::backward`] their gradients are pulled back with
//! [`ParamSet::accumulate_grads`] and consumed by [`AdamState::step`].

mod adam;
mod array;
mod check;
mod params;
mod tape;

pub use adam::AdamState;
pub use array::Array;
pub use check::{finite_difference_check, relative_error, FD_REL_FLOOR, FD_STEP};
pub use params::{Binding, Param, ParamId, ParamSet};
pub use tape::{expectile_weight, Elementwise, Target, Tape, Var, COSINE_EPS, LAYER_NORM_EPS};
