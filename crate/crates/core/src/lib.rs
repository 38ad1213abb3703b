//! Simulation and diffusion approximation of generalized Jackson networks.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fluid;
pub mod lyapunov;
pub mod network;
pub mod rbm;
pub mod samples;
pub mod sim;
pub mod skorohod;
pub mod stats;

pub use error::{Error, Result};
