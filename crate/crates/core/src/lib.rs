pub mod archive;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
