//! Experiment harness: configuration, run artifacts and the command
//! implementations behind the `isp` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;

pub use commands::{cmd_ims, cmd_mask_compare, cmd_pretrain, cmd_prune, cmd_report, cmd_sweep};
pub use config::{ExperimentConfig, Method, SweepAxis};
pub use error::HarnessError;
pub use record::RunRecord;
