//! Prompt-token clustering transformer aggregator for multiple-instance
//! learning over bags of instance features.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bagfile;
pub mod checkpoint;
pub mod data;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod prompt;
pub mod prototype;
pub mod tensor;
pub mod train;
