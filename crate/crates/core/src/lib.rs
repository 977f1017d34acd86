//! Knowledge distillation with per-sample temperatures taken from the
//! maximum z-scored logit.
//!
//! The numerical core lives in [`logit_core`], [`taylor_approx`],
//! [`temperature`] and [`kd_losses`]. [`nn_harness`] and [`data_pipeline`]
//! provide a small training setup, and [`experiment`] and [`verify`] back the
//! `mltkd` command-line tool.

pub mod config;
pub mod data_pipeline;
pub mod error;
pub mod experiment;
pub mod kd_losses;
pub mod logit_core;
pub mod nn_harness;
pub mod taylor_approx;
pub mod temperature;
pub mod verify;

pub use error::{Error, Result};
