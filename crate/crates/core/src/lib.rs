//! Video-text dual encoder with temporally expanded attention, trained with
//! interpolated weight regularization and stochastic weight averaging, plus
//! the synthetic corpus, caption pipeline and zero-shot evaluation around it.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unusual_byte_groupings)]

pub mod captionkit;
pub mod datagen;
pub mod evalkit;
pub mod model;
pub mod numkit;
pub mod objectives;
pub mod pipeline;
pub mod weightspace;

#[cfg(feature = "cli")]
pub mod cli;

mod error;

pub use error::{Error, FormatError, Result};
pub use numkit::{Scalar, Tensor};
pub use weightspace::Checkpoint;
