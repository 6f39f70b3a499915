//! Joint physics-informed residual networks for coupled NO2/NOx regression.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datio;
pub mod ensemble;
pub mod nets;
pub mod physics;
pub mod simdata;
pub mod trainer;
pub mod verify;
