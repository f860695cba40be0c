//! Parameter and FLOP accounting.
//!
//! FLOPs are forward-pass multiply-accumulates times two, per image.
//! Elementwise work (softmax, layer norm, GELU, residual adds, bias adds)
//! is not counted.

use std::fmt;

use super::{param_shapes, ModelConfig, Pool};
use crate::attention::{AttentionConfig, Manifold};
use crate::tensor::numel;

/// Registered scalar counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Patch projection and positional table.
    pub embedder: usize,
    /// Attention projections, layer norms and MLPs of every block.
    pub blocks: usize,
    /// Early-fusion 1×1 channel mixes.
    pub fusion: usize,
    /// Pooling vectors and the classifier.
    pub classifier: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedder + self.blocks + self.fusion + self.classifier
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params.embedder   {}", self.embedder)?;
        writeln!(f, "params.blocks     {}", self.blocks)?;
        writeln!(f, "params.fusion     {}", self.fusion)?;
        writeln!(f, "params.classifier {}", self.classifier)?;
        write!(f, "params.total      {}", self.total())
    }
}

/// Exact count of registered scalars, by component.
pub fn count_params(cfg: &ModelConfig) -> ParamBreakdown {
    let mut out = ParamBreakdown::default();
    for (name, shape) in param_shapes(cfg) {
        let n = numel(&shape);
        if name.starts_with("embed.") || name == "pos" {
            out.embedder += n;
        } else if name.starts_with("head.") || name.ends_with(".pool.weight") {
            out.classifier += n;
        } else if name.contains(".attn.mix.") {
            out.fusion += n;
        } else {
            out.blocks += n;
        }
    }
    out
}

/// Forward FLOPs per image, by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub embedder: u64,
    /// Q/K/V and output projections.
    pub projections: u64,
    /// Euclidean scores, covariances, QR and projectors.
    pub distance_maps: u64,
    pub fusion: u64,
    /// Attention-weighted sums of values.
    pub attention_values: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embedder
            + self.projections
            + self.distance_maps
            + self.fusion
            + self.attention_values
            + self.mlp
            + self.head
    }

    /// Everything inside the attention layers.
    pub fn attention(&self) -> u64 {
        self.projections + self.distance_maps + self.fusion + self.attention_values
    }
}

impl fmt::Display for FlopBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flops.embedder         {}", self.embedder)?;
        writeln!(f, "flops.projections      {}", self.projections)?;
        writeln!(f, "flops.distance_maps    {}", self.distance_maps)?;
        writeln!(f, "flops.fusion           {}", self.fusion)?;
        writeln!(f, "flops.attention_values {}", self.attention_values)?;
        writeln!(f, "flops.mlp              {}", self.mlp)?;
        writeln!(f, "flops.head             {}", self.head)?;
        write!(f, "flops.total            {}", self.total())
    }
}

/// Multiply-accumulates of one modified Gram–Schmidt QR of an `L × d`
/// matrix: a dot product and an update per column pair, plus a norm and a
/// rescale per column.
pub fn qr_macs(l: u64, d: u64) -> u64 {
    l * d * (d - 1) + 2 * l * d
}

/// Multiply-accumulates of the distance maps of one attention layer.
fn distance_map_macs(attn: &AttentionConfig, l: u64) -> u64 {
    let h = attn.heads as u64;
    let d = attn.head_dim() as u64;
    attn.manifolds
        .iter()
        .map(|m| match m {
            Manifold::Euclidean => h * l * l * d,
            // one covariance each for Q and K
            Manifold::Spd => 2 * h * l * l * d,
            // QR and projector each for Q and K
            Manifold::Grassmann => 2 * h * (qr_macs(l, d) + l * l * d),
        })
        .sum()
}

/// Analytic forward FLOPs of one image.
pub fn count_flops(cfg: &ModelConfig) -> FlopBreakdown {
    let l = cfg.tokens() as u64;
    let dm = cfg.model_dim() as u64;
    let hid = cfg.mlp_hidden() as u64;
    let depth = cfg.depth as u64;
    let mut macs = FlopBreakdown {
        embedder: l * cfg.patch_dim() as u64 * dm,
        ..Default::default()
    };
    for attn in cfg.tower_attention() {
        let h = attn.heads as u64;
        let d = attn.head_dim() as u64;
        let k = attn.manifolds.len() as u64;
        macs.projections += depth * 4 * l * dm * dm;
        macs.distance_maps += depth * distance_map_macs(&attn, l);
        if attn.has_fusion_mix() {
            macs.fusion += depth * (k * h) * h * l * l;
        }
        macs.attention_values += depth * h * l * l * d;
        macs.mlp += depth * 2 * l * dm * hid;
        if cfg.pool == Pool::Sequence {
            macs.head += 2 * l * dm;
        }
    }
    macs.head += cfg.towers() as u64 * dm * cfg.num_classes as u64;
    FlopBreakdown {
        embedder: 2 * macs.embedder,
        projections: 2 * macs.projections,
        distance_maps: 2 * macs.distance_maps,
        fusion: 2 * macs.fusion,
        attention_values: 2 * macs.attention_values,
        mlp: 2 * macs.mlp,
        head: 2 * macs.head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Fusion, ManifoldSet};

    fn with(manifolds: ManifoldSet, fusion: Fusion) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.attention.manifolds = manifolds;
        cfg.attention.fusion = fusion;
        cfg
    }

    #[test]
    fn fusion_overhead_closed_form() {
        let base = count_params(&with(ManifoldSet::EUCLIDEAN, Fusion::Early));
        let all = count_params(&with(ManifoldSet::ALL, Fusion::Early));
        assert_eq!(all.total() - base.total(), 6 * (3 * 4 * 4 + 4));
        assert_eq!(all.fusion, 312);
        assert_eq!(base.fusion, 0);
    }

    #[test]
    fn euclidean_attention_flops_are_standard_mhsa() {
        let cfg = with(ManifoldSet::EUCLIDEAN, Fusion::Early);
        let f = count_flops(&cfg);
        let (l, dm, h, depth) = (64u64, 256u64, 4u64, 6u64);
        let d = dm / h;
        let mhsa = 2 * (4 * l * dm * dm + 2 * h * l * l * d);
        assert_eq!(f.attention(), depth * mhsa);
    }

    #[test]
    fn qr_cost_counts_pairs() {
        // d = 2: one pair (2L) plus a norm and rescale per column (4L)
        assert_eq!(qr_macs(10, 2), 20 + 40);
    }
}
