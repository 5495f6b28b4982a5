//! Reverse-mode automatic differentiation over dense matrices.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, ComponentReport, GradCheckReport, FD_STEP, RICHARDSON_STEP};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{blend_scalar, Aggregation, Endpoint, Gradients, Tape, Value};
