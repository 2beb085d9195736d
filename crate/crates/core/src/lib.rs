pub mod catalog;
pub mod cli;
pub mod error;
pub mod encoders;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod service;
pub mod simulator;
pub mod dataset;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
