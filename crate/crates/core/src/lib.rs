//! Desk-scale multifaceted feature learning: compound batch erasing,
//! hierarchical structured losses over duplicated sub-batches, a small
//! trainable embedding network on a reverse-mode autodiff tape, and a
//! retrieval/attribution evaluation harness. Fully deterministic given a
//! seed.

pub mod autodiff;
pub mod attribution;
pub mod batching;
pub mod config;
pub mod dataset;
pub mod erasing;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod image;
pub mod rng;
pub mod losses;
pub mod model;
pub mod optim;
pub mod runner;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
