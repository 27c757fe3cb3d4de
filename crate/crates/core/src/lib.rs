//! Partition-aware first-order meta-learning ("priming") for
//! parameter-efficient fine-tuning of a small Transformer tagger, with the
//! data, evaluation and experiment plumbing around it.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod gradcheck;
pub mod harness;
pub mod meta;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
