//! Open-set diagnosis with EVT-calibrated classification and reward-driven
//! examination selection.
//!
//! The stack, bottom up: [`domain`] types, Weibull tail fitting in [`evt`],
//! mini-batch k-means in [`clustering`], the autoencoder-regularised
//! classifier in [`backbone`], open-set scoring in [`openmax`], reward
//! generation in [`strategy`], the exam recommender in [`recommender`] and
//! the diagnosis loop in [`engine`]. [`synthcohort`] produces data,
//! [`harness`] measures results and [`pipeline`] runs everything in order.

pub mod backbone;
pub mod clustering;
pub mod container;
pub mod domain;
pub mod engine;
pub mod error;
pub mod evt;
pub mod harness;
pub mod nn;
pub mod openmax;
mod par;
pub mod pipeline;
pub mod recommender;
pub mod strategy;
pub mod synthcohort;

pub use error::{Error, Result};

/// Whether data-parallel kernels run on the rayon pool.
pub const fn parallel_enabled() -> bool {
    par::is_parallel()
}
