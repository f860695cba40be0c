use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adamw_step, label_smoothed_cross_entropy, AdamWConfig, OptimState, ScheduleConfig};
use crate::data::{
    mixup_batch, random_crop_flip, shuffled_indices, Batch, ChannelStats, CropFlip, Dataset,
};
use crate::error::{Error, Result};
use crate::model::{model_forward, model_forward_traced, ModelConfig, ModelWeights};
use crate::tape::Tape;
use crate::tensor::Real;

/// Optimization recipe. Defaults follow the reference CIFAR setup.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Beta parameter of mixup; `0` disables mixup.
    pub mixup_alpha: f64,
    /// Reflection padding of the random crop; `0` disables cropping.
    pub crop_pad: usize,
    pub flip: bool,
    pub seed: u64,
    /// Half-width of the uniform noise added to the fusion mix selector.
    pub mix_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            base_lr: 5e-4,
            warmup_epochs: 10,
            weight_decay: 0.01,
            label_smoothing: 0.1,
            mixup_alpha: 1.0,
            crop_pad: 4,
            flip: true,
            seed: 0,
            mix_noise: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.mixup_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "mixup_alpha must be >= 0, got {}",
                self.mixup_alpha
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything that evolves during training.
pub struct TrainState<T: Real> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub weights: ModelWeights<T>,
    pub optim: OptimState<T>,
    pub schedule: ScheduleConfig,
    pub stats: ChannelStats,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    /// Seeds the generator, initializes the weights and derives the
    /// normalization statistics from `train`.
    pub fn new(model: ModelConfig, config: TrainConfig, train: &Dataset) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        check_data(&model, train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let weights = ModelWeights::init_with_mix_noise(&model, &mut rng, config.mix_noise)?;
        let optim = OptimState::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            weights.tensors(),
        );
        let schedule = ScheduleConfig {
            base_lr: config.base_lr,
            warmup_epochs: config.warmup_epochs,
            total_epochs: config.epochs,
            steps_per_epoch: train.len().div_ceil(config.batch_size),
        };
        schedule.validate()?;
        Ok(Self {
            stats: ChannelStats::from_dataset(train),
            model,
            config,
            weights,
            optim,
            schedule,
            rng,
            epoch: 0,
            step: 0,
        })
    }
}

fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    if data.image_size != cfg.image_size
        || data.channels != cfg.channels
        || data.num_classes != cfg.num_classes
    {
        return Err(Error::Config(format!(
            "dataset ({}×{}×{}, {} classes) does not match the model ({}×{}×{}, {} classes)",
            data.image_size,
            data.image_size,
            data.channels,
            data.num_classes,
            cfg.image_size,
            cfg.image_size,
            cfg.channels,
            cfg.num_classes
        )));
    }
    Ok(())
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub const HEADER: &'static str = "epoch,train_loss,eval_loss,eval_acc,lr,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:.3}",
                r.epoch, r.train_loss, r.eval_loss, r.eval_acc, r.lr, r.seconds
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Runs one epoch over seeded-shuffled batches (augment → forward → loss →
/// backward → AdamW step) and evaluates on `eval` when given. Eval fields
/// are `NaN` without an eval set.
pub fn train_epoch<T: Real>(
    state: &mut TrainState<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<EpochRow> {
    check_data(&state.model, train)?;
    let start = Instant::now();
    let cfg = state.config.clone();
    let order = shuffled_indices(train.len(), &mut state.rng);
    let aug = CropFlip {
        pad: cfg.crop_pad,
        flip: cfg.flip,
    };
    let mut loss_sum = 0.0;
    let mut lr = 0.0;
    let mut tape = Tape::<T>::new();
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let mut batch = Batch::<T>::from_records(train, idx, &state.stats)?;
        if aug.pad > 0 || aug.flip {
            batch = random_crop_flip(&batch, aug, &mut state.rng)?;
        }
        if cfg.mixup_alpha > 0.0 {
            batch = mixup_batch(&batch, cfg.mixup_alpha, &mut state.rng)?.0;
        }
        lr = state.schedule.lr(state.step);

        tape.reset();
        let bound = state.weights.bind(&tape);
        let at = |e: Error| match e {
            Error::NumericDomain(m) => Error::NumericDomain(format!(
                "{m} at epoch {}, batch {b}, lr {lr:e}",
                state.epoch + 1
            )),
            other => other,
        };
        let logits = model_forward(&tape, &batch.images, &bound, &state.model).map_err(at)?;
        let loss = label_smoothed_cross_entropy(logits, &batch.targets, cfg.label_smoothing)?;
        let value = loss.value().data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite loss {value} at epoch {}, batch {b}, lr {lr:e}",
                state.epoch + 1
            )));
        }
        loss_sum += value * idx.len() as f64;
        let grads = tape.backward(loss)?;
        let grads: Vec<_> = bound
            .vars()
            .iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect();
        drop(bound);
        let next = adamw_step(state.weights.tensors(), &grads, &mut state.optim, lr)?;
        state.weights.set_tensors(next)?;
        state.step += 1;
    }
    state.epoch += 1;
    let (eval_loss, eval_acc) = match eval {
        Some(data) => {
            let r = evaluate(
                &state.model,
                &state.weights,
                data,
                &state.stats,
                cfg.batch_size,
                false,
            )?;
            (r.loss, r.accuracy)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(EpochRow {
        epoch: state.epoch,
        train_loss: loss_sum / train.len() as f64,
        eval_loss,
        eval_acc,
        lr,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains for the configured number of epochs, calling `on_epoch` after
/// each one.
pub fn fit<T: Real>(
    state: &mut TrainState<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    while state.epoch < state.config.epochs {
        let row = train_epoch(state, train, eval)?;
        on_epoch(&row);
        report.rows.push(row);
    }
    Ok(report)
}

/// Loss (unsmoothed cross-entropy), accuracy and optionally the pooled
/// features of every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    /// `(label, features)` per sample, in dataset order, when requested.
    pub features: Vec<(usize, Vec<f64>)>,
}

pub fn evaluate<T: Real>(
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    data: &Dataset,
    stats: &ChannelStats,
    batch_size: usize,
    export_features: bool,
) -> Result<EvalResult> {
    check_data(cfg, data)?;
    weights.check_matches(cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut features = Vec::new();
    let mut tape = Tape::<T>::new();
    for idx in all.chunks(batch_size.max(1)) {
        let batch = Batch::<T>::from_records(data, idx, stats)?;
        tape.reset();
        let bound = weights.bind_frozen(&tape);
        let pass = model_forward_traced(&tape, &batch.images, &bound, cfg)?;
        let loss = label_smoothed_cross_entropy(pass.logits, &batch.targets, 0.0)?;
        loss_sum += loss.value().data()[0].to_f64() * idx.len() as f64;
        let logits = pass.logits.value();
        let k = cfg.num_classes;
        for (row, &i) in logits.data().chunks_exact(k).zip(idx) {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == data.records[i].label);
        }
        if export_features {
            let f = pass.features.value();
            let width = f.shape()[1];
            for (row, &i) in f.data().chunks_exact(width).zip(idx) {
                features.push((
                    data.records[i].label,
                    row.iter().map(|v| v.to_f64()).collect(),
                ));
            }
        }
    }
    Ok(EvalResult {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_textures;

    fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.image_size = 8;
        cfg.patch_size = 4;
        cfg.depth = 1;
        cfg.num_classes = 4;
        cfg.attention.model_dim = 8;
        cfg.attention.heads = 2;
        cfg
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            base_lr: 5e-3,
            warmup_epochs: 1,
            mixup_alpha: 0.0,
            crop_pad: 0,
            flip: false,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let data = gen_synthetic_textures(2, 8, 0).unwrap();
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..quick(1)
        };
        let mut st = TrainState::<f64>::new(tiny_model(), cfg, &data).unwrap();
        let before = st.weights.clone();
        train_epoch(&mut st, &data, None).unwrap();
        assert_eq!(st.weights, before);
    }

    #[test]
    fn overfits_four_samples() {
        let data = gen_synthetic_textures(1, 8, 2).unwrap();
        let mut st = TrainState::<f64>::new(tiny_model(), quick(50), &data).unwrap();
        let report = fit(&mut st, &data, None, |_| {}).unwrap();
        let first = report.rows[0].train_loss;
        let last = report.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn csv_has_header_and_rows() {
        let report = TrainReport {
            rows: vec![EpochRow {
                epoch: 1,
                train_loss: 1.5,
                eval_loss: 1.25,
                eval_acc: 0.5,
                lr: 1e-4,
                seconds: 0.25,
            }],
        };
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], TrainReport::HEADER);
        assert_eq!(lines[1], "1,1.5,1.25,0.5,0.0001,0.250");
    }

    #[test]
    fn evaluation_exports_features() {
        let data = gen_synthetic_textures(2, 8, 0).unwrap();
        let st = TrainState::<f64>::new(tiny_model(), quick(1), &data).unwrap();
        let r = evaluate(&st.model, &st.weights, &data, &st.stats, 3, true).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!(r.features.len(), 8);
        assert_eq!(r.features[0].1.len(), 8);
        assert_eq!(r.features[1].0, data.records[1].label);
    }
}
