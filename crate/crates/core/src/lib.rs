//! Joint knowledge tracing and option tracing for multiple-choice
//! assessment data.
//!
//! Models predict a probability for every option of an item. Training mixes
//! a correctness objective and an option-choice objective with a weight
//! `lambda` in `[0, 1]` (see [`loss`]). Learned student vectors feed a
//! linear-plus-isotonic score predictor ([`sp`]).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod ingest;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sp;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
