//! Seeded fixtures shared by the criterion benchmarks in `benches/`.

use mma_core::data::{gen_synthetic_textures, Dataset};
use mma_core::{AttentionConfig, Fusion, ManifoldSet, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1)` entries.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// One attention layer of the given width with `manifolds` and `fusion`.
pub fn attention_config(
    heads: usize,
    model_dim: usize,
    manifolds: ManifoldSet,
    fusion: Fusion,
) -> AttentionConfig {
    AttentionConfig::euclidean(heads, model_dim).with_manifolds(manifolds, fusion)
}

/// The 16×16, depth-4, width-64 texture classifier.
pub fn desk_model(manifolds: ManifoldSet, fusion: Fusion) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.image_size = 16;
    cfg.depth = 4;
    cfg.num_classes = 4;
    cfg.attention = attention_config(4, 64, manifolds, fusion);
    cfg
}

pub fn textures(per_class: usize) -> Dataset {
    gen_synthetic_textures(per_class, 16, 1).expect("texture set")
}
