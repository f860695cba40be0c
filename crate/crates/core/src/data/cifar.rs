//! CIFAR-10 binary record framing: one label byte followed by the red,
//! green and blue planes, each `size × size` bytes in row-major order.

use std::fs;
use std::path::Path;

use super::{Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_SIZE: usize = 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
const CHANNELS: usize = 3;
const RECORDS_PER_FILE: usize = 10_000;

/// Bytes per record for `size × size` RGB images (3073 for CIFAR-10).
pub fn record_len(size: usize) -> usize {
    1 + CHANNELS * size * size
}

/// Parses a buffer of consecutive records.
pub fn parse_records(bytes: &[u8], size: usize, num_classes: usize) -> Result<Vec<ImageRecord>> {
    let rec = record_len(size);
    if bytes.len() % rec != 0 {
        let offset = bytes.len() / rec * rec;
        return Err(Error::Format(format!(
            "truncated record at byte offset {offset}: {} trailing bytes, record size {rec}",
            bytes.len() - offset
        )));
    }
    let plane = size * size;
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| {
            let label = chunk[0] as usize;
            if label >= num_classes {
                return Err(Error::Format(format!(
                    "label {label} out of range at byte offset {}",
                    i * rec
                )));
            }
            let planes = &chunk[1..];
            let pixels = Tensor::from_fn([size, size, CHANNELS], |j| {
                let (p, c) = (j / CHANNELS, j % CHANNELS);
                planes[c * plane + p] as f32 / 255.0
            });
            Ok(ImageRecord { pixels, label })
        })
        .collect()
}

/// Serializes records in the same framing. Pixels are quantized to
/// `round(255 · p)`, so parsed records re-encode to their original bytes.
pub fn encode_records(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let s = r.pixels.shape();
        if s.len() != 3 || s[2] != CHANNELS || s[0] != s[1] {
            return Err(Error::Format(format!(
                "record {i}: cannot encode shape {s:?}"
            )));
        }
        let label = u8::try_from(r.label).map_err(|_| {
            Error::Format(format!("record {i}: label {} does not fit a byte", r.label))
        })?;
        out.push(label);
        for c in 0..CHANNELS {
            for px in r.pixels.data().chunks_exact(CHANNELS) {
                out.push((px[c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_records(path: &Path, size: usize, num_classes: usize) -> Result<Vec<ImageRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_records(&bytes, size, num_classes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_records(path: &Path, records: &[ImageRecord]) -> Result<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}

fn read_exact_file(path: &Path) -> Result<Vec<ImageRecord>> {
    let expected = (RECORDS_PER_FILE * record_len(CIFAR_IMAGE_SIZE)) as u64;
    let meta = fs::metadata(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if meta.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            meta.len()
        )));
    }
    read_records(path, CIFAR_IMAGE_SIZE, 10)
}

/// Loads the five training batches (50000 images) and the test batch
/// (10000 images) from a directory of CIFAR-10 `.bin` files.
pub fn load_cifar10_bin(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::with_capacity(5 * RECORDS_PER_FILE);
    for f in CIFAR_TRAIN_FILES {
        train.extend(read_exact_file(&dir.join(f))?);
    }
    let test = read_exact_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok((Dataset::new(train, 10)?, Dataset::new(test, 10)?))
}
