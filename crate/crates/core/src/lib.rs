//! Knocking-heads attention (KHA) on top of multi-head, grouped-query and
//! multi-query attention, plus what is needed to train and inspect small
//! models on a CPU: a reverse-mode tensor library, FLOPs accounting, a
//! byte-level language-model trainer, a binary checkpoint format and the
//! `kha` command-line tool.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod knocking;
pub mod model;
pub mod runspec;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
