#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfec::model::{mask_random, MaskSpec, Model, ModelConfig};

pub const N: usize = 6;
pub const L: usize = 16;
pub const F: usize = 2;
pub const D: usize = 8;

/// A small model, two batches of views, masked copies of the second batch and
/// a two-cluster high-confidence split, all derived from one seed.
pub struct ToyInstance {
    pub model: Model,
    pub views_a: Vec<Array2<f64>>,
    pub views_b: Vec<Array2<f64>>,
    pub masked: Vec<(Array2<f64>, MaskSpec)>,
    pub highconf: Vec<Vec<usize>>,
}

fn views(seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..N)
        .map(|_| Array2::from_shape_fn((L, F), |_| rng.random_range(-2.0..2.0)))
        .collect()
}

pub fn toy_instance(seed: u64, separate_autoencoder: bool) -> ToyInstance {
    let cfg = ModelConfig {
        hidden1: 8,
        hidden2: 8,
        embed_dim: D,
        separate_autoencoder,
        ..ModelConfig::default()
    };
    let model = Model::init(&cfg, F, L, &mut ChaCha8Rng::seed_from_u64(seed));
    let views_a = views(seed * 3 + 100);
    let views_b = views(seed * 3 + 101);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = views_b
        .iter()
        .map(|t| mask_random(t.view(), 0.15, &mut rng).unwrap())
        .collect();
    ToyInstance {
        model,
        views_a,
        views_b,
        masked,
        highconf: vec![vec![0, 2, 3], vec![1, 4, 5]],
    }
}

pub fn with_params(model: &Model, flat: &[f64]) -> Model {
    use tfec::numkernel::ParamSet;
    let mut m = model.clone();
    m.load_flat(flat);
    m
}
