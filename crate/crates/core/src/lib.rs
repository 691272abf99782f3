pub mod cli;
pub mod config;
pub mod corpus;
pub mod disentangle;
pub mod error;
pub mod evalcluster;
pub mod evalstd;
pub mod experiment;
pub mod neural;
pub mod pairmine;
pub mod seed;
pub mod siamese;

pub use error::{Error, Result};
