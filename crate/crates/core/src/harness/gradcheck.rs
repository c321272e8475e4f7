//! Finite-difference check of the full training loss on a small random
//! query.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConditioningMode, LossConfig, ModelConfig};
use crate::error::Result;
use crate::init;
use crate::model::{Model, Query};
use crate::objective::Segment;
use crate::tensor::{grad_check, GradCheckReport};

const JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSetup {
    pub input_length: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub words: usize,
    pub mode: ConditioningMode,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            input_length: 16,
            num_layers: 3,
            dim: 8,
            words: 4,
            mode: ConditioningMode::Scdm,
            seed: 0,
            epsilon: 1e-5,
        }
    }
}

impl GradCheckSetup {
    pub fn model_config(&self) -> ModelConfig {
        let d = self.dim;
        ModelConfig {
            vocab_size: self.words + 3,
            input_length: self.input_length,
            num_layers: self.num_layers,
            d_v: d,
            d_embed: d,
            d_s: d,
            d_f: d,
            d_h: d,
            d_a: d,
            mode: self.mode,
            ..ModelConfig::default()
        }
    }
}

/// Checks every parameter group of a freshly initialized model against
/// central differences of `L_all` for one query.
pub fn check_full_model(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let cfg = setup.model_config();
    let model = Model::new(cfg.clone(), setup.seed)?;
    let mut rng = init::rng(init::derive_seed(setup.seed, 99));
    // Zero-initialized biases put pre-activations fed by dead units exactly
    // on the ReLU kink; a small jitter moves the check to a generic point.
    let mut params = model.params.clone();
    for id in params.ids().collect::<Vec<_>>() {
        if params.get(id).requires_grad() {
            for v in params.get_mut(id).data_mut() {
                *v += rng.random_range(-JITTER..JITTER);
            }
        }
    }
    let video = init::uniform(&mut rng, vec![cfg.input_length, cfg.d_v], 1.0);
    let tokens: Vec<usize> = (0..setup.words).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
    let start = rng.random_range(0.0..0.5);
    let gt = Segment::new(start, start + rng.random_range(0.2..0.5))?;
    let loss_cfg = LossConfig::default();
    grad_check(&mut params, setup.epsilon, |tape, store| {
        let q = Query { video: &video, tokens: &tokens };
        Ok(model.batch_loss_with(store, tape, &[q], &[gt], &loss_cfg)?.total)
    })
}
