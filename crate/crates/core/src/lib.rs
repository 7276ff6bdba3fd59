//! Latent stance spaces from multi-sample retweet logs.

pub mod cluster;
pub mod compose;
pub mod config;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod matrix;
pub mod parallel;
pub mod pca;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
