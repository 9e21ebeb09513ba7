pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diagnostics;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod synth;
pub mod task;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
