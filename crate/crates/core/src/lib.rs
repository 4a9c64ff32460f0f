pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod fusion;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod text;
pub mod train;

pub use error::{Error, Result};
