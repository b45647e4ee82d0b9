//! Instant soup pruning on a small from-scratch training stack.
//!
//! The crate bundles a dense reverse-mode autodiff engine with the layers
//! needed for an MLP and a tiny transformer encoder, binary keep-masks with
//! set algebra, the pruning procedures (magnitude, random, SNIP, denoised
//! pruning, ISP, IMP/LTH, progressive), instant model soups, synthetic
//! datasets, and step/FLOP budget accounting.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod ledger;
pub mod mask;
pub mod model;
pub mod optim;
pub mod prune;
pub mod rng;
pub mod soup;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, DataCursor};
pub use data::Dataset;
pub use error::{Error, Result};
pub use ledger::{BudgetLedger, Phase};
pub use mask::{Mask, Registry, SparsityReport};
pub use model::{Batch, Inputs, Model, ModelKind, ModelSpec, Parameter};
pub use optim::AdamW;
pub use tensor::Tensor;
