//! Robust prompt tuning for a miniature vision-language dual encoder.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod optim;
pub mod params;
pub mod plot;
pub mod prompting;
pub mod run;
pub mod seed;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
