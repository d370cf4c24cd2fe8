//! One-level differentiable architecture search with grouped operation
//! dropout.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: gradient tape, tensor ops, optimizers.
//! - [`space`]: candidate ops, groups, cell DAG.
//! - [`supernet`]: mixed edges and the weight-sharing network.
//! - [`drop`]: grouped drop-mask sampling.
//! - [`train`]: the search loop with alpha-adjust and partial decay.
//! - [`genotype`] and [`standalone`]: deriving and re-training discrete cells.
//! - [`diagnostics`]: feature clustering, rate sweeps, correlation harnesses.
//! - [`config`], [`data`], [`checkpoint`]: experiment plumbing.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod drop;
pub mod error;
pub mod experiment;
pub mod genotype;
pub mod nn;
pub mod params;
pub mod report;
pub mod rng;
pub mod space;
pub mod standalone;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
