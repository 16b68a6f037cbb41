// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coercivity;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod learn;
pub mod pdkernels;
pub mod potentials;
pub mod quad;
pub mod rng;
