//! Toolkit for training misalignment-tolerant building extraction models on
//! off-nadir imagery.

pub mod data;
pub mod datagen;
mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
