//! Multi-manifold multi-head attention.
//!
//! Queries and keys are compared in up to three geometries, each producing
//! one `[h × L × L]` map per input:
//!
//! * Euclidean: scaled dot products `Q Kᵀ / √d`.
//! * SPD: token covariance matrices `C_Q`, `C_K` compared entrywise,
//!   `|C_Q − C_K| / √d`.
//! * Grassmann: orthonormal bases from a Gram–Schmidt thin QR, compared
//!   through their projectors, `|G_Q G_Qᵀ − G_K G_Kᵀ| / √d`.
//!
//! Early fusion stacks the maps as channels, mixes them with a learned 1×1
//! convolution and softmaxes the result. Late fusion runs one attention
//! branch per manifold and concatenates the branch outputs.
//!
//! Every function accepts arbitrary leading batch axes: a query tensor may be
//! `[h, L, d]` for a single input or `[B, h, L, d]` for a batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::model::init::{trunc_normal, uniform};
use crate::tape::{channel_mix_1x1, concat, Tape, Var};
use crate::tensor::{numel, Real, Tensor};

/// Default pivot threshold below which a Gram–Schmidt column counts as
/// linearly dependent.
pub const DEFAULT_QR_TOLERANCE: f64 = 1e-10;

/// Geometry in which queries and keys are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Manifold {
    Euclidean,
    Spd,
    Grassmann,
}

impl Manifold {
    pub const ALL: [Manifold; 3] = [Manifold::Euclidean, Manifold::Spd, Manifold::Grassmann];

    pub fn short_name(self) -> &'static str {
        match self {
            Manifold::Euclidean => "e",
            Manifold::Spd => "s",
            Manifold::Grassmann => "g",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Manifold::Euclidean => "euclidean",
            Manifold::Spd => "spd",
            Manifold::Grassmann => "grassmann",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Non-empty set of manifolds, always iterated in the order
/// Euclidean, SPD, Grassmann.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ManifoldSet(u8);

impl ManifoldSet {
    pub const EUCLIDEAN: ManifoldSet = ManifoldSet(1);
    pub const ALL: ManifoldSet = ManifoldSet(0b111);

    pub fn new(manifolds: &[Manifold]) -> Result<Self> {
        let bits = manifolds.iter().fold(0u8, |b, m| b | m.bit());
        if bits == 0 {
            return Err(Error::Config("manifold set must not be empty".into()));
        }
        Ok(Self(bits))
    }

    pub fn single(m: Manifold) -> Self {
        Self(m.bit())
    }

    pub fn contains(self, m: Manifold) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Manifold> {
        Manifold::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl fmt::Debug for ManifoldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ManifoldSet({self})")
    }
}

impl fmt::Display for ManifoldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Manifold::short_name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ManifoldSet {
    type Err = Error;

    /// Parses a comma-separated list such as `e,s,g` or `euclidean,spd`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            out.push(match part.to_ascii_lowercase().as_str() {
                "e" | "euclidean" => Manifold::Euclidean,
                "s" | "spd" => Manifold::Spd,
                "g" | "grassmann" => Manifold::Grassmann,
                other => return Err(Error::Config(format!("unknown manifold '{other}'"))),
            });
        }
        Self::new(&out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Early,
    Late,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            other => Err(Error::Config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

/// Architecture of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub manifolds: ManifoldSet,
    pub fusion: Fusion,
    /// Softmax the negated SPD/Grassmann dissimilarities instead of the raw
    /// values. Only meaningful where a single map is softmaxed without a
    /// learned mix.
    pub negate_distances: bool,
    pub qr_tolerance: f64,
}

impl AttentionConfig {
    /// Plain scaled dot-product attention.
    pub fn euclidean(heads: usize, model_dim: usize) -> Self {
        Self {
            heads,
            model_dim,
            manifolds: ManifoldSet::EUCLIDEAN,
            fusion: Fusion::Early,
            negate_distances: false,
            qr_tolerance: DEFAULT_QR_TOLERANCE,
        }
    }

    pub fn with_manifolds(mut self, manifolds: ManifoldSet, fusion: Fusion) -> Self {
        self.manifolds = manifolds;
        self.fusion = fusion;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Whether early fusion uses a learned channel mix (two or more maps).
    pub fn has_fusion_mix(&self) -> bool {
        self.fusion == Fusion::Early && self.manifolds.len() >= 2
    }

    /// Number of independent Q/K/V projection triples.
    pub fn branches(&self) -> usize {
        match self.fusion {
            Fusion::Early => 1,
            Fusion::Late => self.manifolds.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("heads and model_dim must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.manifolds.contains(Manifold::Spd) && self.head_dim() < 2 {
            return Err(Error::Config("SPD attention needs head_dim >= 2".into()));
        }
        if self.fusion == Fusion::Late && self.manifolds.len() < 2 {
            return Err(Error::Config(
                "late fusion needs at least two manifolds".into(),
            ));
        }
        if self.has_fusion_mix() && self.negate_distances {
            return Err(Error::Config(
                "negate_distances applies to late fusion or single-manifold attention only".into(),
            ));
        }
        if !(self.qr_tolerance >= 0.0) {
            return Err(Error::Config("qr_tolerance must be non-negative".into()));
        }
        Ok(())
    }

    /// Named parameter shapes in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, dm, k) = (self.heads, self.model_dim, self.manifolds.len());
        let mut out = Vec::new();
        match self.fusion {
            Fusion::Early => {
                for role in ["wq", "wk", "wv"] {
                    out.push((role.to_string(), vec![dm, dm]));
                }
            }
            Fusion::Late => {
                for m in self.manifolds.iter() {
                    for role in ["wq", "wk", "wv"] {
                        out.push((format!("{}.{role}", m.name()), vec![dm, dm]));
                    }
                }
            }
        }
        out.push(("wo".into(), vec![self.branches() * dm, dm]));
        out.push(("wo_bias".into(), vec![dm]));
        if self.has_fusion_mix() {
            out.push(("mix.weight".into(), vec![h, k * h]));
            out.push(("mix.bias".into(), vec![h]));
        }
        out
    }

    /// Initial parameter values: truncated normal (σ = 0.02) projections,
    /// zero biases, and a fusion mix that selects the first enabled map plus
    /// uniform noise of half-width `mix_noise`.
    pub fn init_params<T: Real, R: Rng>(
        &self,
        rng: &mut R,
        mix_noise: f64,
    ) -> Vec<(String, Tensor<T>)> {
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = match name.as_str() {
                    "wo_bias" | "mix.bias" => Tensor::zeros(shape),
                    "mix.weight" => {
                        let cols = shape[1];
                        let noise = uniform(&shape, mix_noise, rng);
                        Tensor::from_fn(shape, |i| {
                            let sel = if i / cols == i % cols { 1.0 } else { 0.0 };
                            T::from_f64(sel + noise[i])
                        })
                    }
                    _ => trunc_normal(&shape, 0.02, rng),
                };
                (name, t)
            })
            .collect()
    }
}

/// Query/key/value projections of one attention branch, each `[D × D]`.
#[derive(Clone, Copy)]
pub struct QkvWeights<'t, T: Real> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
}

/// Learned 1×1 convolution over the stacked distance maps.
#[derive(Clone, Copy)]
pub struct FusionMix<'t, T: Real> {
    /// `[h × k·h]`
    pub weight: Var<'t, T>,
    /// `[h]`
    pub bias: Var<'t, T>,
}

/// Parameters of one attention layer bound to a tape.
#[derive(Clone)]
pub struct AttentionWeights<'t, T: Real> {
    /// One triple for early fusion, one per manifold for late fusion.
    pub branches: Vec<QkvWeights<'t, T>>,
    /// `[D × D]`, or `[k·D × D]` for late fusion.
    pub wo: Var<'t, T>,
    pub wo_bias: Var<'t, T>,
    pub mix: Option<FusionMix<'t, T>>,
}

impl<'t, T: Real> AttentionWeights<'t, T> {
    /// Builds the weights by looking up every name of
    /// [`AttentionConfig::param_shapes`].
    pub fn from_lookup(
        cfg: &AttentionConfig,
        mut lookup: impl FnMut(&str) -> Result<Var<'t, T>>,
    ) -> Result<Self> {
        let branches = match cfg.fusion {
            Fusion::Early => vec![QkvWeights {
                wq: lookup("wq")?,
                wk: lookup("wk")?,
                wv: lookup("wv")?,
            }],
            Fusion::Late => cfg
                .manifolds
                .iter()
                .map(|m| {
                    Ok(QkvWeights {
                        wq: lookup(&format!("{}.wq", m.name()))?,
                        wk: lookup(&format!("{}.wk", m.name()))?,
                        wv: lookup(&format!("{}.wv", m.name()))?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        let mix = if cfg.has_fusion_mix() {
            Some(FusionMix {
                weight: lookup("mix.weight")?,
                bias: lookup("mix.bias")?,
            })
        } else {
            None
        };
        Ok(Self {
            branches,
            wo: lookup("wo")?,
            wo_bias: lookup("wo_bias")?,
            mix,
        })
    }

    /// Registers freshly initialized parameters on `tape`.
    pub fn init<R: Rng>(
        tape: &'t Tape<T>,
        cfg: &AttentionConfig,
        rng: &mut R,
        mix_noise: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.init_params::<T, R>(rng, mix_noise);
        Self::from_lookup(cfg, |name| {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| tape.param(t.clone()))
                .ok_or_else(|| Error::MissingNode(name.to_string()))
        })
    }
}

/// Per-manifold distance maps, each `[..., h, L, L]`, in canonical order.
#[derive(Clone)]
pub struct DistanceMaps<'t, T: Real> {
    entries: Vec<(Manifold, Var<'t, T>)>,
}

impl<'t, T: Real> DistanceMaps<'t, T> {
    pub fn new(mut entries: Vec<(Manifold, Var<'t, T>)>) -> Self {
        entries.sort_by_key(|(m, _)| *m);
        Self { entries }
    }

    pub fn get(&self, m: Manifold) -> Option<Var<'t, T>> {
        self.entries.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Manifold, Var<'t, T>)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_pair<T: Real>(name: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return dim_err(format!("{name}: shapes {sa:?} and {sb:?} differ"));
    }
    if sa.len() < 2 {
        return dim_err(format!("{name}: need at least [L, d], got {sa:?}"));
    }
    Ok(sa)
}

fn inv_sqrt<T: Real>(d: usize) -> T {
    T::from_f64(1.0 / (d as f64).sqrt())
}

/// `Q Kᵀ / √d` per head.
pub fn euclidean_distance_map<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = check_pair("euclidean_distance_map", &q, &k)?;
    let d = s[s.len() - 1];
    Ok(q.matmul(k.transpose()?)?.scale(inv_sqrt(d)))
}

/// Covariance between tokens: each token row is centered by its mean over
/// the `d` features and `C = X_c X_cᵀ / (d − 1)`.
pub fn token_covariance<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() < 2 {
        return dim_err(format!("token_covariance: need at least [L, d], got {s:?}"));
    }
    let d = s[s.len() - 1];
    if d < 2 {
        return Err(Error::Config(format!(
            "token_covariance needs d >= 2, got {d}"
        )));
    }
    let centered = x.sub(x.mean_last()?.broadcast_last(d)?)?;
    Ok(centered
        .matmul(centered.transpose()?)?
        .scale(T::from_f64(1.0 / (d as f64 - 1.0))))
}

/// `|C_Q − C_K| / √d`, entrywise.
pub fn spd_distance_map<'t, T: Real>(
    cq: Var<'t, T>,
    ck: Var<'t, T>,
    head_dim: usize,
) -> Result<Var<'t, T>> {
    check_pair("spd_distance_map", &cq, &ck)?;
    Ok(cq.sub(ck)?.abs().scale(inv_sqrt(head_dim)))
}

/// Thin QR of `x` (`[..., L, d]`) by modified Gram–Schmidt, composed from
/// differentiable primitives.
///
/// Returns `(G, R)` with `G: [..., L, d]`, `R: [..., d, d]`. A column whose
/// residual norm falls below `tol` is linearly dependent on the previous
/// ones: its `G` column is zero and its `R` diagonal entry is zero.
pub fn gram_schmidt_thin_qr<'t, T: Real>(
    x: Var<'t, T>,
    tol: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (g, r) = modified_gram_schmidt(x, tol, true)?;
    Ok((g, r.expect("R requested")))
}

/// The orthonormal factor of [`gram_schmidt_thin_qr`] alone.
pub fn gram_schmidt_basis<'t, T: Real>(x: Var<'t, T>, tol: f64) -> Result<Var<'t, T>> {
    Ok(modified_gram_schmidt(x, tol, false)?.0)
}

fn modified_gram_schmidt<'t, T: Real>(
    x: Var<'t, T>,
    tol: f64,
    want_r: bool,
) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return dim_err(format!(
            "gram_schmidt_thin_qr: need at least [L, d], got {shape:?}"
        ));
    }
    x.value().check_finite("gram_schmidt_thin_qr")?;
    let r = shape.len();
    let (l, d) = (shape[r - 2], shape[r - 1]);
    let lead = &shape[..r - 2];
    let n = numel(lead);
    let tape = x.tape();
    let tol_t = T::from_f64(tol);

    // Columns of x as rows of xᵀ: [n, d, L].
    let xt = x.reshape(&[n, l, d])?.transpose()?;
    let mut basis: Vec<Var<'t, T>> = Vec::with_capacity(d);
    // coeffs[j][i] = R[i, j]
    let mut coeffs: Vec<Vec<Var<'t, T>>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v = xt.slice(1, j, 1)?.reshape(&[n, l])?;
        let mut col = Vec::with_capacity(j + 1);
        for q in &basis {
            let rij = q.mul(v)?.sum_last()?;
            v = v.sub(q.scale_rows(rij)?)?;
            col.push(rij);
        }
        let norm = v.norm_last()?;
        basis.push(v.scale_rows(norm.recip_or_zero(tol_t))?);
        if want_r {
            let mask = norm
                .value()
                .map(|x| if x.abs() >= tol_t { T::ONE } else { T::ZERO });
            col.push(norm.mul(tape.constant(mask))?);
            coeffs.push(col);
        }
    }

    let rows: Vec<Var<'t, T>> = basis
        .iter()
        .map(|q| q.reshape(&[n, 1, l]))
        .collect::<Result<_>>()?;
    let g = concat(&rows, 1)?.transpose()?;
    let mut g_shape = lead.to_vec();
    g_shape.extend([l, d]);
    let g = g.reshape(&g_shape)?;

    let r_factor = if want_r {
        let zero = tape.constant(Tensor::zeros([n, 1]));
        let mut r_rows = Vec::with_capacity(d);
        for i in 0..d {
            let entries: Vec<Var<'t, T>> = (0..d)
                .map(|j| {
                    if i <= j {
                        coeffs[j][i].reshape(&[n, 1])
                    } else {
                        Ok(zero)
                    }
                })
                .collect::<Result<_>>()?;
            r_rows.push(concat(&entries, 1)?.reshape(&[n, 1, d])?);
        }
        let mut r_shape = lead.to_vec();
        r_shape.extend([d, d]);
        Some(concat(&r_rows, 1)?.reshape(&r_shape)?)
    } else {
        None
    };
    Ok((g, r_factor))
}

/// Orthogonal projector `G Gᵀ` onto the column space of `G`.
pub fn grassmann_projector<'t, T: Real>(g: Var<'t, T>) -> Result<Var<'t, T>> {
    if g.shape().len() < 2 {
        return dim_err(format!(
            "grassmann_projector: need at least [L, d], got {:?}",
            g.shape()
        ));
    }
    g.matmul(g.transpose()?)
}

/// `|G_Q G_Qᵀ − G_K G_Kᵀ| / √d`, entrywise.
pub fn grassmann_distance_map<'t, T: Real>(gq: Var<'t, T>, gk: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = check_pair("grassmann_distance_map", &gq, &gk)?;
    let d = s[s.len() - 1];
    let diff = grassmann_projector(gq)?.sub(grassmann_projector(gk)?)?;
    Ok(diff.abs().scale(inv_sqrt(d)))
}

/// Computes every enabled distance map for per-head queries and keys
/// (`[..., h, L, d]`).
pub fn distance_maps<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    manifolds: ManifoldSet,
    qr_tolerance: f64,
) -> Result<DistanceMaps<'t, T>> {
    let s = check_pair("distance_maps", &q, &k)?;
    let d = s[s.len() - 1];
    let mut entries = Vec::with_capacity(manifolds.len());
    for m in manifolds.iter() {
        let map = match m {
            Manifold::Euclidean => euclidean_distance_map(q, k)?,
            Manifold::Spd => spd_distance_map(token_covariance(q)?, token_covariance(k)?, d)?,
            Manifold::Grassmann => grassmann_distance_map(
                gram_schmidt_basis(q, qr_tolerance)?,
                gram_schmidt_basis(k, qr_tolerance)?,
            )?,
        };
        entries.push((m, map));
    }
    Ok(DistanceMaps::new(entries))
}

/// `[..., L, h·d]` → `[..., h, L, d]`
pub fn split_heads<'t, T: Real>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let r = s.len();
    if r < 2 || s[r - 1] % heads != 0 {
        return dim_err(format!(
            "split_heads: {s:?} cannot be split into {heads} heads"
        ));
    }
    let mut shape = s[..r - 1].to_vec();
    shape.extend([heads, s[r - 1] / heads]);
    let mut axes: Vec<usize> = (0..r + 1).collect();
    axes.swap(r - 2, r - 1);
    x.reshape(&shape)?.permute(&axes)
}

/// `[..., h, L, d]` → `[..., L, h·d]`
pub fn merge_heads<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let r = s.len();
    if r < 3 {
        return dim_err(format!("merge_heads: need [..., h, L, d], got {s:?}"));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 3, r - 2);
    let mut shape = s[..r - 3].to_vec();
    shape.extend([s[r - 2], s[r - 3] * s[r - 1]]);
    x.permute(&axes)?.reshape(&shape)
}

/// `x · w (+ bias)` over the last axis, for any number of leading axes.
pub fn linear<'t, T: Real>(
    x: Var<'t, T>,
    w: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || s.last() != Some(&ws[0]) {
        return dim_err(format!("linear: input {s:?} does not match weight {ws:?}"));
    }
    let rows = numel(&s[..s.len() - 1]);
    let mut y = x.reshape(&[rows, ws[0]])?.matmul(w)?;
    if let Some(b) = bias {
        y = y.add_trailing(b)?;
    }
    let mut out = s[..s.len() - 1].to_vec();
    out.push(ws[1]);
    y.reshape(&out)
}

/// Early fusion: stack the maps as channels, mix them with the 1×1
/// convolution, softmax per head and apply to `v` (`[..., h, L, d]`).
/// Returns the head-merged `[..., L, D]` output and the attention
/// probabilities `[..., h, L, L]`.
pub fn fuse_early<'t, T: Real>(
    maps: &DistanceMaps<'t, T>,
    mix: &FusionMix<'t, T>,
    v: Var<'t, T>,
    expected: ManifoldSet,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let mut stacked = Vec::with_capacity(expected.len());
    for m in expected.iter() {
        let map = maps.get(m).ok_or_else(|| {
            Error::Contract(format!("fuse_early: missing {} distance map", m.name()))
        })?;
        stacked.push(map);
    }
    let rank = v.shape().len();
    if rank < 3 {
        return dim_err(format!(
            "fuse_early: values must be [..., h, L, d], got {:?}",
            v.shape()
        ));
    }
    let logits = channel_mix_1x1(concat(&stacked, rank - 3)?, mix.weight, mix.bias)?;
    let attn = logits.softmax_rows()?;
    Ok((merge_heads(attn.matmul(v)?)?, attn))
}

/// Late fusion: concatenates branch outputs along the feature axis.
pub fn fuse_late<'t, T: Real>(outputs: &[Var<'t, T>], expected: usize) -> Result<Var<'t, T>> {
    if outputs.len() != expected || outputs.len() < 2 {
        return Err(Error::Contract(format!(
            "fuse_late: expected {expected} branch outputs (at least 2), got {}",
            outputs.len()
        )));
    }
    let s0 = outputs[0].shape();
    if outputs.iter().any(|o| o.shape() != s0) {
        return dim_err("fuse_late: branch outputs differ in shape");
    }
    concat(outputs, s0.len() - 1)
}

/// Everything computed by one attention layer, for inspection.
#[derive(Clone)]
pub struct AttentionTrace<'t, T: Real> {
    /// Distance maps per branch (one entry per branch; early fusion has one).
    pub maps: Vec<DistanceMaps<'t, T>>,
    /// Attention probabilities per branch, `[..., h, L, L]`.
    pub attention: Vec<Var<'t, T>>,
}

/// Single-map attention: `softmax(±D) V`, merged over heads.
fn single_map_attention<'t, T: Real>(
    map: Var<'t, T>,
    manifold: Manifold,
    negate: bool,
    v: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let logits = if negate && manifold != Manifold::Euclidean {
        map.scale(-T::ONE)
    } else {
        map
    };
    let attn = logits.softmax_rows()?;
    Ok((merge_heads(attn.matmul(v)?)?, attn))
}

/// Full MMA layer on `x` (`[..., L, D]`).
///
/// Early fusion returns `[..., L, D]` after the output projection. Late
/// fusion returns the concatenated branch outputs `[..., L, k·D]`; apply
/// [`merge_late`] to project them back to `D`.
pub fn mma_attention_forward<'t, T: Real>(
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
) -> Result<Var<'t, T>> {
    Ok(mma_attention_traced(x, weights, cfg)?.0)
}

/// [`mma_attention_forward`] that also returns the intermediate maps.
pub fn mma_attention_traced<'t, T: Real>(
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    cfg: &AttentionConfig,
) -> Result<(Var<'t, T>, AttentionTrace<'t, T>)> {
    cfg.validate()?;
    x.value().check_finite("mma_attention_forward")?;
    if weights.branches.len() != cfg.branches() || weights.mix.is_some() != cfg.has_fusion_mix() {
        return Err(Error::Contract(
            "attention weights do not match the config".into(),
        ));
    }
    let h = cfg.heads;
    let mut trace = AttentionTrace {
        maps: Vec::new(),
        attention: Vec::new(),
    };
    match cfg.fusion {
        Fusion::Early => {
            let qkv = &weights.branches[0];
            let q = split_heads(linear(x, qkv.wq, None)?, h)?;
            let k = split_heads(linear(x, qkv.wk, None)?, h)?;
            let v = split_heads(linear(x, qkv.wv, None)?, h)?;
            let maps = distance_maps(q, k, cfg.manifolds, cfg.qr_tolerance)?;
            let (merged, attn) = match &weights.mix {
                Some(mix) => fuse_early(&maps, mix, v, cfg.manifolds)?,
                None => {
                    let (m, map) = maps.iter().next().expect("non-empty manifold set");
                    single_map_attention(map, m, cfg.negate_distances, v)?
                }
            };
            trace.maps.push(maps);
            trace.attention.push(attn);
            Ok((linear(merged, weights.wo, Some(weights.wo_bias))?, trace))
        }
        Fusion::Late => {
            let mut outputs = Vec::with_capacity(cfg.manifolds.len());
            for (m, qkv) in cfg.manifolds.iter().zip(&weights.branches) {
                let q = split_heads(linear(x, qkv.wq, None)?, h)?;
                let k = split_heads(linear(x, qkv.wk, None)?, h)?;
                let v = split_heads(linear(x, qkv.wv, None)?, h)?;
                let maps = distance_maps(q, k, ManifoldSet::single(m), cfg.qr_tolerance)?;
                let map = maps.get(m).expect("requested map");
                let (merged, attn) = single_map_attention(map, m, cfg.negate_distances, v)?;
                outputs.push(merged);
                trace.maps.push(maps);
                trace.attention.push(attn);
            }
            Ok((fuse_late(&outputs, cfg.manifolds.len())?, trace))
        }
    }
}

/// Output projection of late-fused branch outputs: `[..., L, k·D]` →
/// `[..., L, D]`.
pub fn merge_late<'t, T: Real>(
    fused: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
) -> Result<Var<'t, T>> {
    linear(fused, weights.wo, Some(weights.wo_bias))
}

/// Standard multi-head scaled dot-product attention, the baseline every
/// MMA variant is compared against.
pub fn vanilla_mhsa_forward<'t, T: Real>(
    x: Var<'t, T>,
    weights: &AttentionWeights<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let qkv = weights
        .branches
        .first()
        .ok_or_else(|| Error::Contract("vanilla attention needs one projection triple".into()))?;
    let q = split_heads(linear(x, qkv.wq, None)?, heads)?;
    let k = split_heads(linear(x, qkv.wk, None)?, heads)?;
    let v = split_heads(linear(x, qkv.wv, None)?, heads)?;
    let d = q.shape()[q.shape().len() - 1];
    let scores = q.matmul(k.transpose()?)?.scale(inv_sqrt(d));
    let out = merge_heads(scores.softmax_rows()?.matmul(v)?)?;
    linear(out, weights.wo, Some(weights.wo_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn manifold_set_parsing() {
        let s: ManifoldSet = "g, e".parse().unwrap();
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![Manifold::Euclidean, Manifold::Grassmann]
        );
        assert_eq!(s.to_string(), "e,g");
        assert!("".parse::<ManifoldSet>().is_err());
        assert!("e,x".parse::<ManifoldSet>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = AttentionConfig::euclidean(3, 8);
        assert!(c.validate().is_err());
        c = AttentionConfig::euclidean(4, 4).with_manifolds(ManifoldSet::ALL, Fusion::Early);
        assert!(c.validate().is_err(), "SPD with d = 1");
        c = AttentionConfig::euclidean(2, 8).with_manifolds(ManifoldSet::EUCLIDEAN, Fusion::Late);
        assert!(c.validate().is_err());
        c = AttentionConfig::euclidean(2, 8).with_manifolds(ManifoldSet::ALL, Fusion::Early);
        c.negate_distances = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn euclidean_identity_example() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::<f64>::eye(2).reshape([1, 2, 2]).unwrap());
        let d = euclidean_distance_map(i, i).unwrap().value();
        let s = 1.0 / 2f64.sqrt();
        assert!(d.max_abs_diff(&t(&[1, 2, 2], &[s, 0., 0., s])) < 1e-15);
    }

    #[test]
    fn euclidean_transpose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let q = tape.constant(random(&[2, 5, 3], &mut rng));
        let k = tape.constant(random(&[2, 5, 3], &mut rng));
        let a = euclidean_distance_map(q, k).unwrap();
        let b = euclidean_distance_map(k, q).unwrap().transpose().unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-15);
        let bad = tape.constant(random(&[3, 5, 3], &mut rng));
        assert!(matches!(
            euclidean_distance_map(q, bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn covariance_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 5.]));
        let c = token_covariance(x).unwrap().value();
        assert!(c.max_abs_diff(&t(&[1, 2, 2], &[0.5, 1., 1., 2.])) < 1e-15);

        let flat = tape.constant(t(&[2, 3], &[4., 4., 4., -1., -1., -1.]));
        assert_eq!(token_covariance(flat).unwrap().value().max_abs(), 0.0);

        let thin = tape.constant(t(&[2, 1], &[1., 2.]));
        assert!(matches!(token_covariance(thin), Err(Error::Config(_))));
    }

    #[test]
    fn spd_distance_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[2.]));
        let b = tape.constant(t(&[1, 1], &[-1.]));
        assert_eq!(spd_distance_map(a, b, 4).unwrap().value().data(), &[1.5]);
        assert_eq!(spd_distance_map(a, a, 4).unwrap().value().data(), &[0.]);
    }

    #[test]
    fn qr_single_column() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[3., 4.]));
        let (g, r) = gram_schmidt_thin_qr(x, DEFAULT_QR_TOLERANCE).unwrap();
        assert!(g.value().max_abs_diff(&t(&[2, 1], &[0.6, 0.8])) < 1e-15);
        assert!(r.value().max_abs_diff(&t(&[1, 1], &[5.])) < 1e-15);
    }

    #[test]
    fn qr_rank_deficient_columns() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1., 1., 2., 2., 2., 2.]));
        let (g, r) = gram_schmidt_thin_qr(x, DEFAULT_QR_TOLERANCE).unwrap();
        let g = g.value();
        assert_eq!(g.at(&[0, 1]), 0.0);
        assert_eq!(g.at(&[1, 1]), 0.0);
        assert_eq!(g.at(&[2, 1]), 0.0);
        assert_eq!(r.value().at(&[1, 1]), 0.0);
        let gr = tape.constant(g).matmul(r).unwrap().value();
        assert!(gr.max_abs_diff(&x.value()) < 1e-14);
    }

    #[test]
    fn qr_rejects_nan() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[f64::NAN, 1.]));
        assert!(matches!(
            gram_schmidt_thin_qr(x, 1e-10),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn projector_examples() {
        let tape = Tape::new();
        let e1 = tape.constant(t(&[2, 1], &[1., 0.]));
        assert_eq!(
            grassmann_projector(e1).unwrap().value().data(),
            &[1., 0., 0., 0.]
        );
    }

    #[test]
    fn head_split_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 5, 6], &mut rng));
        let split = split_heads(x, 3).unwrap();
        assert_eq!(split.shape(), vec![2, 3, 5, 2]);
        assert_eq!(split.value().at(&[1, 2, 4, 1]), x.value().at(&[1, 4, 5]));
        assert_eq!(merge_heads(split).unwrap().value(), x.value());
    }

    #[test]
    fn fuse_late_examples() {
        let tape = Tape::new();
        let o = tape.constant(Tensor::<f64>::from_fn([4, 8], |i| i as f64));
        let fused = fuse_late(&[o, o, o], 3).unwrap().value();
        assert_eq!(fused.shape(), &[4, 24]);
        for r in 0..4 {
            for c in 0..8 {
                let v = o.value().at(&[r, c]);
                assert_eq!(fused.at(&[r, c]), v);
                assert_eq!(fused.at(&[r, c + 8]), v);
                assert_eq!(fused.at(&[r, c + 16]), v);
            }
        }
        assert!(matches!(fuse_late(&[o, o], 3), Err(Error::Contract(_))));
        assert!(matches!(fuse_late(&[o], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn negated_zero_map_gives_uniform_rows() {
        let tape = Tape::new();
        let zero = tape.constant(Tensor::<f64>::zeros([2, 3, 3]));
        let v = tape.constant(Tensor::<f64>::from_fn([2, 3, 2], |i| i as f64));
        let (_, attn) = single_map_attention(zero, Manifold::Spd, true, v).unwrap();
        assert!(attn
            .value()
            .data()
            .iter()
            .all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let maps = DistanceMaps::new(vec![
            (
                Manifold::Euclidean,
                tape.constant(random(&[2, 1, 1], &mut rng)),
            ),
            (Manifold::Spd, tape.constant(random(&[2, 1, 1], &mut rng))),
        ]);
        let mix = FusionMix {
            weight: tape.constant(random(&[2, 4], &mut rng)),
            bias: tape.constant(random(&[2], &mut rng)),
        };
        let v = tape.constant(random(&[2, 1, 3], &mut rng));
        let set: ManifoldSet = "e,s".parse().unwrap();
        let (out, attn) = fuse_early(&maps, &mix, v, set).unwrap();
        assert_eq!(attn.value().data(), &[1.0, 1.0]);
        assert_eq!(out.value(), merge_heads(v).unwrap().value());

        let only_e = DistanceMaps::new(vec![(
            Manifold::Euclidean,
            maps.get(Manifold::Euclidean).unwrap(),
        )]);
        assert!(matches!(
            fuse_early(&only_e, &mix, v, set),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn late_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let cfg = AttentionConfig::euclidean(2, 8).with_manifolds(ManifoldSet::ALL, Fusion::Late);
        let w = AttentionWeights::init(&tape, &cfg, &mut rng, 1e-3).unwrap();
        assert_eq!(w.wo.shape(), vec![24, 8]);
        let x = tape.constant(random(&[4, 8], &mut rng));
        let out = mma_attention_forward(x, &w, &cfg).unwrap();
        assert_eq!(out.shape(), vec![4, 24]);
        assert_eq!(merge_late(out, &w).unwrap().shape(), vec![4, 8]);

        let early = cfg.clone().with_manifolds(ManifoldSet::ALL, Fusion::Early);
        let w = AttentionWeights::init(&tape, &early, &mut rng, 1e-3).unwrap();
        assert_eq!(
            mma_attention_forward(x, &w, &early).unwrap().shape(),
            vec![4, 8]
        );
    }
}
