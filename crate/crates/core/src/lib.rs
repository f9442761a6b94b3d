pub mod bridge;
pub mod concepts;
pub mod config;
pub mod error;
pub mod graph;
pub mod io;
pub mod itcav;
pub mod netcore;
pub mod oracle;
pub mod rng;
pub mod segment;
pub mod tensor;
pub mod toylab;

pub use error::{Result, VccError};
pub use oracle::FeatureOracle;
