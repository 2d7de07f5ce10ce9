//! File formats, run configuration and the pipeline behind the `cad`
//! command-line tool. The numerical work lives in [`cad_core`].

pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{CliError, Result};
