//! Trajectory prediction with a compound-scaled residual backbone.
//!
//! The crate is self-contained: [`tensor`] provides the differentiation
//! engine, [`nn`] and [`model`] build the network, [`scaling`] derives its
//! dimensions, [`scene`] turns driving episodes into rasters and targets,
//! [`loss`] scores multimodal predictions and [`train`] ties it together.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prediction;
pub mod scaling;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
