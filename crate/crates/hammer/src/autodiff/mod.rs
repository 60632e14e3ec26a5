//! Differentiable-operation substrate: dense matrices, a reverse-mode tape,
//! parameter stores with momentum (EMA) updates, and the finite-difference
//! gradient-check harness.

mod check;
mod params;
mod tape;

pub use check::{grad_check, FdMode, GradCheckConfig, GradCheckError, GradCheckReport};
pub use params::{ema_update, GradStore, Mat, ParamId, ParamStore};
pub use tape::{Grads, Tape, TapeError, T};
