use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Convex combination of each sample with the sample at `partner[i]`:
/// `x_i ← λ x_i + (1 − λ) x_partner[i]`, targets mixed with the same λ.
pub fn mixup_with<T: Real>(batch: &Batch<T>, lambda: f64, partner: &[usize]) -> Result<Batch<T>> {
    let b = batch.len();
    if partner.len() != b || partner.iter().any(|&p| p >= b) {
        return Err(Error::Contract("mixup pairing must index the batch".into()));
    }
    let lam = T::from_f64(lambda);
    let rest = T::from_f64(1.0 - lambda);
    let mix = |t: &Tensor<T>| {
        let row = t.len() / b;
        let d = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in partner.iter().enumerate() {
            for k in 0..row {
                out.push(lam * d[i * row + k] + rest * d[j * row + k]);
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok(Batch {
        images: mix(&batch.images)?,
        targets: mix(&batch.targets)?,
    })
}

/// Mixup with λ ~ Beta(alpha, alpha) and a random pairing permutation.
pub fn mixup_batch<T: Real, R: Rng>(
    batch: &Batch<T>,
    alpha: f64,
    rng: &mut R,
) -> Result<(Batch<T>, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(rng);
    let partner = super::shuffled_indices(batch.len(), rng);
    Ok((mixup_with(batch, lambda, &partner)?, lambda))
}

/// Random crop from a reflection-padded image plus optional horizontal
/// flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub pad: usize,
    pub flip: bool,
}

impl Default for CropFlip {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Reflect index `i` (possibly out of range by up to `n − 1`) into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Applies an independent random crop (and 50% horizontal flip when
/// enabled) to every image of the batch. Output dimensions equal input
/// dimensions; targets are untouched.
pub fn random_crop_flip<T: Real, R: Rng>(
    batch: &Batch<T>,
    aug: CropFlip,
    rng: &mut R,
) -> Result<Batch<T>> {
    let s = batch.images.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if aug.pad >= h || aug.pad >= w {
        return Err(Error::Config(format!(
            "crop padding {} too large for {h}×{w} images",
            aug.pad
        )));
    }
    let pad = aug.pad as isize;
    let src = batch.images.data();
    let mut out = Vec::with_capacity(src.len());
    for n in 0..b {
        let dy = rng.gen_range(-pad..=pad);
        let dx = rng.gen_range(-pad..=pad);
        let flip = aug.flip && rng.gen_bool(0.5);
        for y in 0..h {
            let sy = reflect(y as isize + dy, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + dx, w);
                let base = ((n * h + sy) * w + sx) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
    }
    Ok(Batch {
        images: Tensor::new(s.to_vec(), out)?,
        targets: batch.targets.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> Batch<f64> {
        Batch {
            images: Tensor::from_fn([2, 4, 4, 1], |i| i as f64),
            targets: Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap(),
        }
    }

    #[test]
    fn lambda_one_is_identity() {
        let b = batch();
        assert_eq!(mixup_with(&b, 1.0, &[1, 0]).unwrap(), b);
    }

    #[test]
    fn half_mix_of_one_hot_targets() {
        let m = mixup_with(&batch(), 0.5, &[1, 0]).unwrap();
        assert_eq!(m.targets.data(), &[0.5; 4]);
    }

    #[test]
    fn sampled_mixup_keeps_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, lam) = mixup_batch(&batch(), 1.0, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&lam));
        assert!(m.target_row_error() < 1e-12);
        assert!(mixup_batch(&batch(), 0.0, &mut rng).is_err());
    }

    #[test]
    fn crop_identity_and_reproducibility() {
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = random_crop_flip(
            &b,
            CropFlip {
                pad: 0,
                flip: false,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(same, b);
        let aug = CropFlip { pad: 2, flip: true };
        let x = random_crop_flip(&b, aug, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let y = random_crop_flip(&b, aug, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.images.shape(), b.images.shape());
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(6, 4), 0);
    }
}
