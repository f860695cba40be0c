use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionConfig, Fusion, ManifoldSet, DEFAULT_QR_TOLERANCE};
use crate::error::{Error, Result};

/// Token pooling ahead of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// Softmax-weighted token sum with a learned scoring vector.
    Sequence,
    Mean,
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pool::Sequence => "sequence",
            Pool::Mean => "mean",
        })
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sequence" | "sequence_pool" => Ok(Pool::Sequence),
            "mean" | "mean_pool" => Ok(Pool::Mean),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

/// Architecture of the whole classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub pool: Pool,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    /// ViT-Lite-6/4 scale: 32×32 RGB input, 4×4 patches, six blocks of
    /// width 256 with four heads, all three manifolds fused early.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            depth: 6,
            mlp_ratio: 2.0,
            num_classes: 10,
            pool: Pool::Sequence,
            attention: AttentionConfig::euclidean(4, 256)
                .with_manifolds(ManifoldSet::ALL, Fusion::Early),
        }
    }
}

pub(crate) const KEYS: [&str; 13] = [
    "image_size",
    "channels",
    "patch_size",
    "depth",
    "heads",
    "model_dim",
    "mlp_ratio",
    "num_classes",
    "pool",
    "manifolds",
    "fusion",
    "negate_distances",
    "qr_tolerance",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.attention.heads
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length L.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.model_dim() as f64) * self.mlp_ratio).round() as usize
    }

    /// Attention config of every encoder tower. Early fusion has a single
    /// tower using the configured manifolds; late fusion has one
    /// single-manifold tower per manifold.
    pub fn tower_attention(&self) -> Vec<AttentionConfig> {
        match self.attention.fusion {
            Fusion::Early => vec![self.attention.clone()],
            Fusion::Late => self
                .attention
                .manifolds
                .iter()
                .map(|m| AttentionConfig {
                    manifolds: ManifoldSet::single(m),
                    fusion: Fusion::Early,
                    ..self.attention.clone()
                })
                .collect(),
        }
    }

    pub fn towers(&self) -> usize {
        self.tower_attention().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(
                "mlp_ratio must give a positive hidden width".into(),
            ));
        }
        self.attention.validate()?;
        for tower in self.tower_attention() {
            tower.validate()?;
        }
        Ok(())
    }

    /// Flat `key=value` representation, in a fixed key order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.attention;
        let values = [
            self.image_size.to_string(),
            self.channels.to_string(),
            self.patch_size.to_string(),
            self.depth.to_string(),
            a.heads.to_string(),
            a.model_dim.to_string(),
            format!("{:?}", self.mlp_ratio),
            self.num_classes.to_string(),
            self.pool.to_string(),
            a.manifolds.to_string(),
            a.fusion.to_string(),
            a.negate_distances.to_string(),
            format!("{:?}", a.qr_tolerance),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that
    /// do not belong to the model.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.attention;
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "heads" => a.heads = parse(key, value)?,
            "model_dim" => a.model_dim = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "pool" => self.pool = value.parse()?,
            "manifolds" => a.manifolds = value.parse()?,
            "fusion" => a.fusion = value.parse()?,
            "negate_distances" => a.negate_distances = parse(key, value)?,
            "qr_tolerance" => a.qr_tolerance = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Rebuilds a config from `key=value` pairs; every model key must be
    /// present and no unknown key is accepted.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self {
            attention: AttentionConfig {
                qr_tolerance: DEFAULT_QR_TOLERANCE,
                ..AttentionConfig::euclidean(1, 1)
            },
            ..Self::default()
        };
        let mut seen = Vec::new();
        for (k, v) in pairs {
            if !cfg.apply_kv(k, v)? {
                return Err(Error::Config(format!("unknown model key '{k}'")));
            }
            seen.push(k.to_string());
        }
        if let Some(missing) = KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("missing model key '{missing}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
