//! Diffusion-based speech editing with instance-specific test-time training.

pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod text;
pub mod toy;
pub mod training;
pub mod ttt;

pub use error::{Error, Result};
