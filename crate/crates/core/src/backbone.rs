//! Hierarchical temporal convolution: each layer is a kernel-3, stride-2,
//! padding-1 convolution followed by ReLU, so every layer halves the
//! temporal extent. Every map except the first is passed through the
//! sentence conditioner before it feeds the next layer and the head.

use crate::config::{ModelConfig, ModulatePosition};
use crate::error::{dim_err, Error, Result};
use crate::init::{self, SeededRng};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub input_length: usize,
    pub in_channels: usize,
    pub channels: usize,
}

impl BackboneConfig {
    pub fn new(num_layers: usize, input_length: usize, in_channels: usize, channels: usize) -> Result<Self> {
        if num_layers == 0 || num_layers >= usize::BITS as usize {
            return Err(Error::Config(format!("invalid layer count {num_layers}")));
        }
        if !input_length.is_multiple_of(1 << num_layers) || input_length == 0 {
            return Err(Error::Config(format!(
                "input length {input_length} is not divisible by 2^{num_layers}"
            )));
        }
        Ok(BackboneConfig { num_layers, input_length, in_channels, channels })
    }

    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.num_layers, cfg.input_length, cfg.d_f, cfg.d_h)
    }

    /// `T_k = T / 2^(k+1)` for layer `k` (0-based).
    pub fn layer_lengths(&self) -> Vec<usize> {
        (1..=self.num_layers).map(|k| self.input_length >> k).collect()
    }
}

/// Per-layer feature maps `[T_k x d_h]`, conditioned where applicable.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapPyramid {
    pub maps: Vec<Tensor>,
}

impl FeatureMapPyramid {
    pub fn lengths(&self) -> Vec<usize> {
        self.maps.iter().map(Tensor::rows).collect()
    }
}

/// Hook called once per conditioned layer with the maps of every example
/// in the batch; returns the conditioned maps in the same order.
pub trait Conditioning {
    fn condition(&mut self, tape: &mut Tape, layer: usize, maps: &[Var]) -> Result<Vec<Var>>;
}

/// Leaves every map unchanged.
pub struct Unconditioned;

impl Conditioning for Unconditioned {
    fn condition(&mut self, _tape: &mut Tape, _layer: usize, maps: &[Var]) -> Result<Vec<Var>> {
        Ok(maps.to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl BackboneParams {
    pub fn register(store: &mut ParamStore, rng: &mut SeededRng, config: BackboneConfig) -> Self {
        let mut layers = Vec::with_capacity(config.num_layers);
        for k in 0..config.num_layers {
            let cin = if k == 0 { config.in_channels } else { config.channels };
            let w = init::glorot(
                store,
                rng,
                format!("backbone.{k}.weight"),
                vec![KERNEL, cin, config.channels],
                KERNEL * cin,
                KERNEL * config.channels,
            );
            // Small positive bias keeps early ReLUs alive.
            let b = store.add(
                format!("backbone.{k}.bias"),
                Tensor::filled(vec![config.channels], 0.01).with_requires_grad(true),
            );
            layers.push((w, b));
        }
        BackboneParams { config, layers }
    }

    /// Builds the pyramid for every example of a batch. Returns, per example,
    /// the `K` maps; map 0 is never conditioned.
    pub fn build_pyramid(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: &[Var],
        position: ModulatePosition,
        conditioner: &mut dyn Conditioning,
    ) -> Result<Vec<Vec<Var>>> {
        for &f in fused {
            if tape.shape(f) != [self.config.input_length, self.config.in_channels] {
                return Err(dim_err(format!(
                    "fused input {:?} does not match [{} x {}]",
                    tape.shape(f),
                    self.config.input_length,
                    self.config.in_channels
                )));
            }
        }
        let mut current = fused.to_vec();
        let mut pyramids = vec![Vec::with_capacity(self.layers.len()); fused.len()];
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let mut pre = Vec::with_capacity(current.len());
            for &x in &current {
                let y = tape.conv1d(x, w, STRIDE, PADDING)?;
                pre.push(tape.add_row_bias(y, b)?);
            }
            let conditioned = k > 0;
            let out = match (conditioned, position) {
                (false, _) => pre.into_iter().map(|y| tape.relu(y)).collect(),
                (true, ModulatePosition::AfterActivation) => {
                    let act: Vec<Var> = pre.into_iter().map(|y| tape.relu(y)).collect();
                    conditioner.condition(tape, k, &act)?
                }
                (true, ModulatePosition::BeforeActivation) => {
                    let modded = conditioner.condition(tape, k, &pre)?;
                    modded.into_iter().map(|y| tape.relu(y)).collect::<Vec<_>>()
                }
            };
            for (p, &m) in pyramids.iter_mut().zip(&out) {
                p.push(m);
            }
            current = out;
        }
        Ok(pyramids)
    }
}

/// Value-level pyramid for a single fused sequence with no conditioning.
pub fn build_pyramid(params: &BackboneParams, store: &ParamStore, fused: &Tensor) -> Result<FeatureMapPyramid> {
    let mut tape = Tape::new();
    let f = tape.constant(fused);
    let maps = params
        .build_pyramid(&mut tape, store, &[f], ModulatePosition::AfterActivation, &mut Unconditioned)?
        .remove(0);
    Ok(FeatureMapPyramid { maps: maps.into_iter().map(|m| tape.tensor(m)).collect() })
}
