//! Binary checkpoint: magic `MMAC`, version `u32`, header length `u32`,
//! UTF-8 `key=value` header lines (model config and normalization
//! statistics), then per parameter a `u16` name length, the name, a `u8`
//! rank, `u32` dims and `f32` values. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MMAC";
pub const VERSION: u32 = 1;

/// A restored checkpoint. Parameters are stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights<f32>,
    pub stats: ChannelStats,
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn split(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Format(format!("checkpoint header: bad {key} value '{v}'")))
        })
        .collect()
}

/// Serializes a checkpoint into bytes.
pub fn write_checkpoint<T: Real>(
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    stats: &ChannelStats,
) -> Result<Vec<u8>> {
    weights.check_matches(cfg)?;
    let mut header = String::new();
    for (k, v) in cfg.to_kv() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("stats.mean={}\n", join(&stats.mean)));
    header.push_str(&format!("stats.std={}\n", join(&stats.std)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in weights.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} at byte offset {} needs {n} bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parses a checkpoint from bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = r.u32("header length")? as usize;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;

    let mut model_kv = Vec::new();
    let (mut mean, mut std) = (None, None);
    for line in header.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("checkpoint header line without '=': {line}")))?;
        match k {
            "stats.mean" => mean = Some(split(k, v)?),
            "stats.std" => std = Some(split(k, v)?),
            _ => model_kv.push((k, v)),
        }
    }
    let config = ModelConfig::from_kv(model_kv)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let stats = match (mean, std) {
        (Some(mean), Some(std))
            if mean.len() == config.channels && std.len() == config.channels =>
        {
            ChannelStats { mean, std }
        }
        _ => {
            return Err(Error::Format(
                "checkpoint header lacks per-channel statistics".into(),
            ))
        }
    };

    let expected = crate::model::param_shapes(&config);
    let mut pairs = Vec::with_capacity(expected.len());
    for _ in 0..expected.len() {
        let n = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("values of '{name}'"))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, values)
            .map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
        pairs.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    let weights = ModelWeights::from_pairs(pairs).map_err(|e| Error::Format(e.to_string()))?;
    weights
        .check_matches(&config)
        .map_err(|e| Error::Format(format!("checkpoint parameters: {e}")))?;
    Ok(Checkpoint {
        config,
        weights,
        stats,
    })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    stats: &ChannelStats,
) -> Result<()> {
    fs::write(path, write_checkpoint(cfg, weights, stats)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
