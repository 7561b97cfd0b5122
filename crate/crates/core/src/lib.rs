// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod degrade;
pub mod error;
pub mod forge;
pub mod image;
pub mod metrics;
pub mod prompter;

pub use crate::error::{Error, Result};
pub use crate::image::{ImageTensor, Kernel2D};
