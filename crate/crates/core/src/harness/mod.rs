//! Everything around the network: synthetic data, dataset and checkpoint
//! files, the training loop, evaluation and attention export.

pub mod checkpoint;
pub mod dataset;
pub mod export;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{Dataset, GroundingExample};
pub use synth::{gen_synthetic, SynthConfig, SynthSplits};
pub use train::{evaluate, rank_all, train, TrainReport};
