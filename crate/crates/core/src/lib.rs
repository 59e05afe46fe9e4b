//! Landmark-guided face anonymisation: landmark attention, bipartite
//! landmark reasoning, attention-blended generation, two discriminators with
//! hybrid supervision, and the evaluation metrics, sized to train on tiny
//! images on a CPU.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imageio;
pub mod landmarks;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
