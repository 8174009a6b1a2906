//! Training, evaluation, figures and sweeps for slot attention with a
//! spatial locality prior, plus the `slp` command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod sweep;
pub mod train;
pub mod visualize;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::HarnessError;
