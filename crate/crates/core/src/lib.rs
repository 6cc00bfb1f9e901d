pub mod body_model;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod datagen;
pub mod discriminator;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod regressor;
pub mod temporal_encoder;
pub mod trainer;

pub use error::{Error, Result};
