//! Flat `key=value` settings layered as defaults < config file < flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mma_core::data::{load_cifar10_bin, read_records, Dataset};
use mma_core::train::TrainConfig;
use mma_core::{Error, Fusion, ManifoldSet, ModelConfig, Result};

pub const DEFAULT_CIFAR_DIR: &str = "cifar-10-batches-bin";

/// Where images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10(PathBuf),
    /// Directory with `train.bin` / `test.bin` written by `gen-data`.
    Records(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "synthetic" {
            return Ok(DataSource::Synthetic);
        }
        match s.split_once(':') {
            Some(("cifar10", dir)) if !dir.is_empty() => Ok(DataSource::Cifar10(dir.into())),
            Some(("records", dir)) if !dir.is_empty() => Ok(DataSource::Records(dir.into())),
            _ => Err(Error::Config(format!(
                "data must be synthetic, cifar10:<dir> or records:<dir>, got '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "32" => Ok(Precision::Single),
            "64" => Ok(Precision::Double),
            other => Err(Error::Config(format!(
                "precision must be 32 or 64, got '{other}'"
            ))),
        }
    }
}

/// Parameters of the generated texture set. Image size follows the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 625,
            seed: 1,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub synthetic: SyntheticSpec,
    /// Model keys set by a config file or flag, in order.
    pub explicit_model_keys: Vec<String>,
}

/// Model used for the synthetic texture task unless overridden.
pub fn desk_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.image_size = 16;
    cfg.depth = 4;
    cfg.num_classes = 4;
    cfg.attention.heads = 4;
    cfg.attention.model_dim = 64;
    cfg
}

pub fn desk_recipe() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 64,
        base_lr: 1e-3,
        warmup_epochs: 3,
        mixup_alpha: 0.0,
        crop_pad: 0,
        flip: false,
        seed: 1,
        ..TrainConfig::default()
    }
}

impl Settings {
    pub fn defaults_for(data: DataSource) -> Self {
        let (model, train) = match data {
            DataSource::Synthetic => (desk_model(), desk_recipe()),
            _ => (ModelConfig::default(), TrainConfig::default()),
        };
        Self {
            data,
            model,
            train,
            precision: Precision::Single,
            synthetic: SyntheticSpec::default(),
            explicit_model_keys: Vec::new(),
        }
    }

    /// Resolves `entries` (file entries first, then flags) on top of the
    /// defaults for the data source they select.
    pub fn resolve(entries: &[(String, String)]) -> Result<Self> {
        let data = match entries.iter().rev().find(|(k, _)| k == "data") {
            Some((_, v)) => v.parse()?,
            None => DataSource::Cifar10(DEFAULT_CIFAR_DIR.into()),
        };
        let mut s = Self::defaults_for(data);
        let defaults = s.train.clone();
        for (k, v) in entries {
            s.apply(k, v)?;
        }
        // an unspecified warmup keeps its default share of the run
        if !entries.iter().any(|(k, _)| k == "warmup_epochs") {
            s.train.warmup_epochs =
                defaults.warmup_epochs * s.train.epochs / defaults.epochs.max(1);
        }
        s.model.validate()?;
        s.train.validate()?;
        Ok(s)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply_kv(key, value)? {
            self.explicit_model_keys.push(key.to_string());
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "data" => self.data = value.parse()?,
            "precision" => self.precision = value.parse()?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.base_lr = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "mixup_alpha" => t.mixup_alpha = parse(key, value)?,
            "crop_pad" => t.crop_pad = parse(key, value)?,
            "flip" => t.flip = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "mix_noise" => t.mix_noise = parse(key, value)?,
            "synthetic_per_class" => self.synthetic.per_class = parse(key, value)?,
            "synthetic_seed" => self.synthetic.seed = parse(key, value)?,
            "synthetic_noise" => self.synthetic.noise = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    /// Loads `(train, test)` for the configured source.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic => synthetic_split(&self.synthetic, self.model.image_size),
            DataSource::Cifar10(dir) => {
                require_dir(dir)?;
                load_cifar10_bin(dir)
            }
            DataSource::Records(dir) => {
                require_dir(dir)?;
                let (size, k) = (self.model.image_size, self.model.num_classes);
                Ok((
                    Dataset::new(read_records(&dir.join("train.bin"), size, k)?, k)?,
                    Dataset::new(read_records(&dir.join("test.bin"), size, k)?, k)?,
                ))
            }
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "data directory {} does not exist",
            dir.display()
        )))
    }
}

/// The texture set split 4:1 into train and test, in generation order.
pub fn synthetic_split(spec: &SyntheticSpec, size: usize) -> Result<(Dataset, Dataset)> {
    let mut cfg = mma_core::data::SyntheticConfig::new(spec.per_class, size, spec.seed);
    cfg.noise = spec.noise;
    let all = cfg.generate()?;
    let n_train = all.len() * 4 / 5;
    if n_train == 0 || n_train == all.len() {
        return Err(Error::Config(format!(
            "synthetic_per_class {} is too small to split",
            spec.per_class
        )));
    }
    let mut records = all.records;
    let test = records.split_off(n_train);
    Ok((
        Dataset::new(records, all.num_classes)?,
        Dataset::new(test, all.num_classes)?,
    ))
}

/// Parses a flat config file: `key=value` lines, `#` comments, blank lines.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    parse_config_text(&text)
}

/// Splits a `--set key=value` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected key=value, got '{s}'"))),
    }
}

/// Common model-selection flags shared by several subcommands.
#[derive(Clone, Debug, Default)]
pub struct ModelFlags {
    pub config: Option<PathBuf>,
    pub data: Option<String>,
    pub manifolds: Option<ManifoldSet>,
    pub fusion: Option<Fusion>,
    pub set: Vec<String>,
}

impl ModelFlags {
    /// File entries followed by flag entries, ready for [`Settings::resolve`].
    pub fn entries(&self, extra: Vec<(String, String)>) -> Result<Vec<(String, String)>> {
        let mut out = match &self.config {
            Some(p) => read_config_file(p)?,
            None => Vec::new(),
        };
        if let Some(d) = &self.data {
            out.push(("data".into(), d.clone()));
        }
        if let Some(m) = self.manifolds {
            out.push(("manifolds".into(), m.to_string()));
        }
        if let Some(f) = self.fusion {
            out.push(("fusion".into(), f.to_string()));
        }
        out.extend(extra);
        for s in &self.set {
            out.push(parse_assignment(s)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn later_entries_win() {
        let s = Settings::resolve(&kv(&[
            ("data", "synthetic"),
            ("epochs", "5"),
            ("epochs", "7"),
        ]))
        .unwrap();
        assert_eq!(s.train.epochs, 7);
        assert_eq!(s.model.image_size, 16);
    }

    #[test]
    fn warmup_follows_epochs_unless_given() {
        let s = Settings::resolve(&kv(&[("data", "synthetic"), ("epochs", "10")])).unwrap();
        assert_eq!(s.train.warmup_epochs, 1);
        let s = Settings::resolve(&kv(&[("epochs", "20")])).unwrap();
        assert_eq!(s.train.warmup_epochs, 1);
        let s = Settings::resolve(&kv(&[("epochs", "2"), ("warmup_epochs", "2")])).unwrap();
        assert_eq!(s.train.warmup_epochs, 2);
        assert!(Settings::resolve(&kv(&[("epochs", "2"), ("warmup_epochs", "3")])).is_err());
    }

    #[test]
    fn data_source_selects_defaults() {
        let s = Settings::resolve(&[]).unwrap();
        assert_eq!(s.model, ModelConfig::default());
        assert_eq!(s.data, DataSource::Cifar10(DEFAULT_CIFAR_DIR.into()));
        let s = Settings::resolve(&kv(&[("data", "synthetic")])).unwrap();
        assert_eq!(s.model, desk_model());
        assert_eq!(s.train, desk_recipe());
    }

    #[test]
    fn unknown_and_malformed_are_rejected() {
        assert!(Settings::resolve(&kv(&[("colour", "red")])).is_err());
        assert!(Settings::resolve(&kv(&[("epochs", "many")])).is_err());
        assert!(Settings::resolve(&kv(&[("data", "imagenet")])).is_err());
        assert!(parse_config_text("epochs 3").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    #[test]
    fn config_text_comments_and_blanks() {
        let e = parse_config_text("# run\n\nepochs = 3\nlr=1e-3\n").unwrap();
        assert_eq!(e, kv(&[("epochs", "3"), ("lr", "1e-3")]));
    }

    #[test]
    fn synthetic_split_sizes() {
        let (train, test) = synthetic_split(
            &SyntheticSpec {
                per_class: 5,
                ..SyntheticSpec::default()
            },
            8,
        )
        .unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
    }
}
