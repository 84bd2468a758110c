//! blocklab: a desk-scale laboratory for watching a recurrent state-space
//! world model acquire block-stability rules during training.
//!
//! The pipeline is: procedurally generate two-block support-event videos
//! ([`scenegen`], [`dataset`]), train a sequential variational world model on
//! an evidence lower bound ([`worldmodel`], [`trainer`]), checkpoint every
//! epoch, replay violation-of-expectation probe pairs against each checkpoint
//! ([`probes`]), and regress the surprise differences over epochs
//! ([`trajectory`]). The `blocklab` binary wires the stages together.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod geom;
pub mod probes;
pub mod rng;
pub mod scenegen;
pub mod trainer;
pub mod trajectory;
pub mod worldmodel;

pub use error::{Error, Result};
