pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod kinematics;
pub mod loader;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod param_vector;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
