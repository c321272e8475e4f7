//! Temporal sentence grounding with sentence-conditioned dynamic modulation.
//!
//! A video is a sequence of clip features and a query is a sequence of
//! tokens. The model fuses every clip with the pooled sentence, runs a
//! stride-2 temporal convolution pyramid whose prediction-serving maps are
//! modulated by the words each unit attends to, and regresses anchored
//! segments scored by predicted overlap.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod error;
pub mod eval_infer;
pub mod fusion;
pub mod harness;
pub mod head;
pub mod init;
pub mod model;
pub mod objective;
pub mod scdm;
pub mod tensor;
pub mod text_encoder;

pub use config::{ConditioningMode, InferConfig, LossConfig, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Tape, Tensor, Var};
