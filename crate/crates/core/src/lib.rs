//! Recovery of physical parameters of control-affine ODE systems from
//! sampled data, with neural (LTC, CT-RNN, NODE) and sparse-regression
//! (SINDYc) estimators.

pub mod dynamics;
pub mod odesolve;
pub mod signal;
pub mod tape;
pub mod metrics;
pub mod neuralmr;
pub mod sindy;
