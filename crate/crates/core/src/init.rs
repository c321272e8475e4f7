//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (split, example, run).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform(rng: &mut SeededRng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Glorot-uniform weight with the given fan sizes, registered as trainable.
pub fn glorot(
    store: &mut ParamStore,
    rng: &mut SeededRng,
    name: impl Into<String>,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> ParamId {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.add(name, uniform(rng, shape, bound).with_requires_grad(true))
}

pub fn zeros(store: &mut ParamStore, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
    store.add(name, Tensor::zeros(shape).with_requires_grad(true))
}
