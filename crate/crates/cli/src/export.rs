//! CSV and binary PGM writers for square maps and feature vectors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mma_core::Result;

/// `row,col,value` lines for an `n × n` row-major map.
pub fn map_csv(values: &[f64], n: usize) -> String {
    let mut out = String::from("row,col,value\n");
    for (i, v) in values.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i / n, i % n, v);
    }
    out
}

/// Min–max quantization to `0..=255`; a constant map becomes all zeros.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary (P5) PGM with maxval 255.
pub fn map_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(quantize(values));
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm` into `dir`.
pub fn write_map(dir: &Path, stem: &str, values: &[f64], n: usize) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), map_csv(values, n))?;
    fs::write(dir.join(format!("{stem}.pgm")), map_pgm(values, n, n))?;
    Ok(())
}

/// One row per sample: `label,f0,f1,...`.
pub fn features_csv(rows: &[(usize, Vec<f64>)]) -> String {
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("label");
    for j in 0..width {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (label, f) in rows {
        let _ = write!(out, "{label}");
        for v in f {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}
