//! Compact vision transformer with pluggable multi-manifold attention.
//!
//! Pipeline: patch embedding (a stride-P convolution, computed as a linear
//! map of flattened patches) → learned positional table → pre-norm blocks
//! `x + Attn(LN(x))`, `x + MLP(LN(x))` → token pooling → linear classifier.
//! Late fusion runs one encoder tower per manifold on the shared embedding
//! and classifies the concatenated pooled features.

mod accounting;
mod config;
pub mod init;

use std::collections::HashMap;

use rand::Rng;

pub use accounting::{count_flops, count_params, FlopBreakdown, ParamBreakdown};
pub use config::{ModelConfig, Pool};

use crate::attention::{linear, mma_attention_traced, AttentionTrace, AttentionWeights};
use crate::error::{dim_err, Error, Result};
use crate::tape::{concat, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Named model parameters in deterministic registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Parameter names and shapes of a model, in registration order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, hid) = (cfg.model_dim(), cfg.mlp_hidden());
    let mut out = vec![
        ("embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("embed.bias".to_string(), vec![d]),
        ("pos".to_string(), vec![cfg.tokens(), d]),
    ];
    for (t, attn) in cfg.tower_attention().iter().enumerate() {
        for b in 0..cfg.depth {
            let p = format!("t{t}.b{b}");
            out.push((format!("{p}.ln1.gamma"), vec![d]));
            out.push((format!("{p}.ln1.beta"), vec![d]));
            for (name, shape) in attn.param_shapes() {
                out.push((format!("{p}.attn.{name}"), shape));
            }
            out.push((format!("{p}.ln2.gamma"), vec![d]));
            out.push((format!("{p}.ln2.beta"), vec![d]));
            out.push((format!("{p}.mlp.fc1.weight"), vec![d, hid]));
            out.push((format!("{p}.mlp.fc1.bias"), vec![hid]));
            out.push((format!("{p}.mlp.fc2.weight"), vec![hid, d]));
            out.push((format!("{p}.mlp.fc2.bias"), vec![d]));
        }
        if cfg.pool == Pool::Sequence {
            out.push((format!("t{t}.pool.weight"), vec![d, 1]));
        }
    }
    out.push((
        "head.weight".into(),
        vec![cfg.towers() * d, cfg.num_classes],
    ));
    out.push(("head.bias".into(), vec![cfg.num_classes]));
    out
}

impl<T: Real> ModelWeights<T> {
    /// Fresh weights: truncated normal (σ = 0.02) matrices, N(0, 0.02)
    /// positional table, zero biases, unit layer-norm scales and fusion
    /// mixes that start as the first-manifold selector plus ±1e-3 noise.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_mix_noise(cfg, rng, 1e-3)
    }

    pub fn init_with_mix_noise<R: Rng>(
        cfg: &ModelConfig,
        rng: &mut R,
        mix_noise: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pairs = vec![
            (
                "embed.weight".to_string(),
                init::trunc_normal(&[cfg.patch_dim(), cfg.model_dim()], 0.02, rng),
            ),
            ("embed.bias".to_string(), Tensor::zeros([cfg.model_dim()])),
            (
                "pos".to_string(),
                init::normal(&[cfg.tokens(), cfg.model_dim()], 0.02, rng),
            ),
        ];
        let d = cfg.model_dim();
        for (t, attn) in cfg.tower_attention().iter().enumerate() {
            for b in 0..cfg.depth {
                let p = format!("t{t}.b{b}");
                pairs.push((format!("{p}.ln1.gamma"), Tensor::full([d], T::ONE)));
                pairs.push((format!("{p}.ln1.beta"), Tensor::zeros([d])));
                for (name, tensor) in attn.init_params::<T, R>(rng, mix_noise) {
                    pairs.push((format!("{p}.attn.{name}"), tensor));
                }
                pairs.push((format!("{p}.ln2.gamma"), Tensor::full([d], T::ONE)));
                pairs.push((format!("{p}.ln2.beta"), Tensor::zeros([d])));
                let hid = cfg.mlp_hidden();
                pairs.push((
                    format!("{p}.mlp.fc1.weight"),
                    init::trunc_normal(&[d, hid], 0.02, rng),
                ));
                pairs.push((format!("{p}.mlp.fc1.bias"), Tensor::zeros([hid])));
                pairs.push((
                    format!("{p}.mlp.fc2.weight"),
                    init::trunc_normal(&[hid, d], 0.02, rng),
                ));
                pairs.push((format!("{p}.mlp.fc2.bias"), Tensor::zeros([d])));
            }
            if cfg.pool == Pool::Sequence {
                pairs.push((
                    format!("t{t}.pool.weight"),
                    init::trunc_normal(&[d, 1], 0.02, rng),
                ));
            }
        }
        pairs.push((
            "head.weight".into(),
            init::trunc_normal(&[cfg.towers() * d, cfg.num_classes], 0.02, rng),
        ));
        pairs.push(("head.bias".into(), Tensor::zeros([cfg.num_classes])));
        let weights = Self::from_pairs(pairs)?;
        weights.check_matches(cfg)?;
        Ok(weights)
    }

    pub fn from_pairs(pairs: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pairs.len());
        let mut names = Vec::with_capacity(pairs.len());
        let mut tensors = Vec::with_capacity(pairs.len());
        for (i, (name, tensor)) in pairs.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate parameter name '{name}'"
                )));
            }
            names.push(name);
            tensors.push(tensor);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// Verifies names, order and shapes against `cfg`.
    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        if expected.len() != self.len() {
            return Err(Error::Contract(format!(
                "config expects {} parameters, weights hold {}",
                expected.len(),
                self.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: expected {name}{shape:?}, found {have}{:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Replaces every tensor; shapes must be unchanged.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Contract(
                "replacement tensors do not match parameter shapes".into(),
            ));
        }
        self.tensors = tensors;
        Ok(())
    }

    /// Replaces one named tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return dim_err(format!(
                "{name}: expected {:?}, got {:?}",
                self.tensors[i].shape(),
                tensor.shape()
            ));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&'t self, tape: &'t Tape<T>) -> BoundWeights<'t, T> {
        BoundWeights {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            index: &self.index,
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&'t self, tape: &'t Tape<T>) -> BoundWeights<'t, T> {
        BoundWeights {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
            index: &self.index,
        }
    }
}

/// Model parameters registered on a tape for one pass.
pub struct BoundWeights<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
    index: &'t HashMap<String, usize>,
}

impl<'t, T: Real> BoundWeights<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::MissingNode(format!("parameter '{name}'")))
    }

    /// Vars in registration order.
    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Rearranges images `[B, H, W, C]` into flattened patches
/// `[B, L, P·P·C]`. Patches are in row-major grid order and each patch is
/// flattened as (row, column, channel).
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return dim_err(format!("patchify: expected [B, H, W, C], got {s:?}"));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = patch * c;
    let mut out = Vec::with_capacity(images.len());
    let data = images.data();
    for n in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let start = ((n * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&data[start..start + row]);
                }
            }
        }
    }
    Tensor::new([b, gh * gw, patch * patch * c], out)
}

/// Linear projection of every patch: `[B, H, W, C]` → `[B, L, D]`.
pub fn patch_embed<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    patch: usize,
) -> Result<Var<'t, T>> {
    let patches = tape.constant(patchify(images, patch)?);
    linear(patches, weight, Some(bias))
}

/// Pre-norm transformer block on `[B, L, D]`.
pub fn transformer_block_forward<'t, T: Real>(
    x: Var<'t, T>,
    params: &BoundWeights<'t, T>,
    prefix: &str,
    attn_cfg: &crate::attention::AttentionConfig,
) -> Result<(Var<'t, T>, AttentionTrace<'t, T>)> {
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let normed = x.layer_norm(p("ln1.gamma")?, p("ln1.beta")?)?;
    let weights = AttentionWeights::from_lookup(attn_cfg, |name| p(&format!("attn.{name}")))?;
    let (attn, trace) = mma_attention_traced(normed, &weights, attn_cfg)?;
    let x = x.add(attn)?;
    let normed = x.layer_norm(p("ln2.gamma")?, p("ln2.beta")?)?;
    let hidden = linear(normed, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?))?.gelu();
    let mlp = linear(hidden, p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?))?;
    Ok((x.add(mlp)?, trace))
}

/// Output of [`model_forward_traced`].
pub struct ForwardPass<'t, T: Real> {
    /// `[B, num_classes]`
    pub logits: Var<'t, T>,
    /// Pooled features fed to the classifier, `[B, towers·D]`.
    pub features: Var<'t, T>,
    /// `traces[tower][block]`
    pub traces: Vec<Vec<AttentionTrace<'t, T>>>,
}

fn pool<'t, T: Real>(x: Var<'t, T>, kind: Pool, weight: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    match kind {
        Pool::Mean => x.transpose()?.mean_last(),
        Pool::Sequence => {
            let w = weight.ok_or_else(|| Error::MissingNode("pool.weight".into()))?;
            let scores = linear(x, w, None)?.reshape(&[b, l])?.softmax_rows()?;
            scores.reshape(&[b, 1, l])?.matmul(x)?.reshape(&[b, d])
        }
    }
}

/// Class logits for a batch `[B, H, W, C]` (or one image `[H, W, C]`,
/// giving `[num_classes]`).
pub fn model_forward<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    params: &BoundWeights<'t, T>,
    cfg: &ModelConfig,
) -> Result<Var<'t, T>> {
    Ok(model_forward_traced(tape, images, params, cfg)?.logits)
}

pub fn model_forward_traced<'t, T: Real>(
    tape: &'t Tape<T>,
    images: &Tensor<T>,
    params: &BoundWeights<'t, T>,
    cfg: &ModelConfig,
) -> Result<ForwardPass<'t, T>> {
    let single = images.rank() == 3;
    let batch = if single {
        let mut s = vec![1];
        s.extend_from_slice(images.shape());
        images.reshape(s)?
    } else {
        images.clone()
    };
    let s = batch.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
        return dim_err(format!(
            "model_forward: images {:?} do not match {}×{}×{}",
            images.shape(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        ));
    }
    let embedded = patch_embed(
        tape,
        &batch,
        params.get("embed.weight")?,
        params.get("embed.bias")?,
        cfg.patch_size,
    )?
    .add_trailing(params.get("pos")?)?;

    let mut pooled = Vec::with_capacity(cfg.towers());
    let mut traces = Vec::with_capacity(cfg.towers());
    for (t, attn_cfg) in cfg.tower_attention().iter().enumerate() {
        let mut x = embedded;
        let mut tower_traces = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let (y, trace) = transformer_block_forward(x, params, &format!("t{t}.b{b}"), attn_cfg)?;
            x = y;
            tower_traces.push(trace);
        }
        let w = match cfg.pool {
            Pool::Sequence => Some(params.get(&format!("t{t}.pool.weight"))?),
            Pool::Mean => None,
        };
        pooled.push(pool(x, cfg.pool, w)?);
        traces.push(tower_traces);
    }
    let features = if pooled.len() == 1 {
        pooled[0]
    } else {
        concat(&pooled, 1)?
    };
    let mut logits = linear(
        features,
        params.get("head.weight")?,
        Some(params.get("head.bias")?),
    )?;
    if single {
        logits = logits.reshape(&[cfg.num_classes])?;
    }
    Ok(ForwardPass {
        logits,
        features,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Fusion, ManifoldSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(manifolds: ManifoldSet, fusion: Fusion) -> ModelConfig {
        let mut cfg = ModelConfig {
            image_size: 8,
            channels: 2,
            patch_size: 4,
            depth: 1,
            num_classes: 10,
            ..ModelConfig::default()
        };
        cfg.attention =
            crate::attention::AttentionConfig::euclidean(2, 8).with_manifolds(manifolds, fusion);
        cfg
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = Tensor::<f64>::from_fn([1, 4, 4, 1], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[8..12], &[8., 9., 12., 13.]);
        let whole = patchify(&img, 4).unwrap();
        assert_eq!(whole.shape(), &[1, 1, 16]);
        assert!(matches!(patchify(&img, 3), Err(Error::Config(_))));
    }

    #[test]
    fn logits_shape_and_determinism() {
        let cfg = small(ManifoldSet::ALL, Fusion::Early);
        let w = ModelWeights::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::from_fn([8, 8, 2], |i| (i as f64 * 0.37).sin());
        let tape = Tape::new();
        let p = w.bind_frozen(&tape);
        let a = model_forward(&tape, &img, &p, &cfg).unwrap().value();
        let b = model_forward(&tape, &img, &p, &cfg).unwrap().value();
        assert_eq!(a.shape(), &[10]);
        assert_eq!(a, b);
    }

    #[test]
    fn late_model_classifies_concatenated_towers() {
        let cfg = small(ManifoldSet::ALL, Fusion::Late);
        let w = ModelWeights::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(w.get("head.weight").unwrap().shape(), &[24, 10]);
        let imgs = Tensor::from_fn([3, 8, 8, 2], |i| (i as f64 * 0.11).cos());
        let tape = Tape::new();
        let pass = model_forward_traced(&tape, &imgs, &w.bind_frozen(&tape), &cfg).unwrap();
        assert_eq!(pass.logits.shape(), vec![3, 10]);
        assert_eq!(pass.features.shape(), vec![3, 24]);
        assert_eq!(pass.traces.len(), 3);
    }

    #[test]
    fn rejects_wrong_image_dims() {
        let cfg = small(ManifoldSet::EUCLIDEAN, Fusion::Early);
        let w = ModelWeights::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let img = Tensor::<f64>::zeros([8, 8, 3]);
        assert!(model_forward(&tape, &img, &w.bind_frozen(&tape), &cfg).is_err());
    }
}
