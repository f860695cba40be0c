use std::fs;
use std::path::{Path, PathBuf};

use mma_core::attention::Manifold;
use mma_core::data::{encode_records, Batch, ChannelStats, Dataset};
use mma_core::model::{count_flops, count_params, model_forward_traced};
use mma_core::tape::Fault;
use mma_core::train::{evaluate, fit, load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use mma_core::verification::{
    mma_block_grad_check, primitive_grad_checks, run_property_suite, GradCheck,
};
use mma_core::{Error, Fusion, ModelConfig, ModelWeights, Real, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::export::{features_csv, write_map};
use crate::settings::{synthetic_split, Precision, Settings, SyntheticSpec};

/// Failure of a subcommand, mapped to the process exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

#[derive(Debug)]
pub struct TrainArgs {
    pub settings: Settings,
    pub out: PathBuf,
    pub log: PathBuf,
    pub quiet: bool,
}

pub fn train(args: TrainArgs) -> Outcome {
    let s = &args.settings;
    let (train, test) = s.load_data()?;
    println!(
        "train: {} train / {} test images, manifolds {}, fusion {}, {}-bit",
        train.len(),
        test.len(),
        s.model.attention.manifolds,
        s.model.attention.fusion,
        match s.precision {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    );
    match s.precision {
        Precision::Single => run_training::<f32>(&args, &train, &test),
        Precision::Double => run_training::<f64>(&args, &train, &test),
    }
}

fn run_training<T: Real>(args: &TrainArgs, train: &Dataset, test: &Dataset) -> Outcome {
    let s = &args.settings;
    let mut state = TrainState::<T>::new(s.model.clone(), s.train.clone(), train)?;
    let quiet = args.quiet;
    let report = fit(&mut state, train, Some(test), |r| {
        if !quiet {
            println!(
                "epoch {:>3}  train_loss {:.4}  eval_loss {:.4}  eval_acc {:.4}  lr {:.3e}  {:.1}s",
                r.epoch, r.train_loss, r.eval_loss, r.eval_acc, r.lr, r.seconds
            );
        }
    })?;
    save_checkpoint(&args.out, &state.model, &state.weights, &state.stats)?;
    report.write_csv(&args.log)?;
    if let Some(last) = report.last() {
        println!(
            "final eval_acc={:.4} eval_loss={:.4}",
            last.eval_acc, last.eval_loss
        );
    }
    println!("wrote {} and {}", args.out.display(), args.log.display());
    Ok(())
}

#[derive(Debug)]
pub struct EvalArgs {
    pub settings: Settings,
    pub checkpoint: PathBuf,
    pub split: Split,
    pub batch: usize,
    pub export_features: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Loads a checkpoint and makes the settings agree with it; explicitly
/// requested model keys that disagree are an error.
fn checkpoint_settings(
    path: &Path,
    settings: &Settings,
) -> Result<(Checkpoint, Settings), Failure> {
    let ck = load_checkpoint(path)?;
    let ours = settings.model.to_kv();
    let theirs = ck.config.to_kv();
    for key in &settings.explicit_model_keys {
        let a = ours.iter().find(|(k, _)| k == key).map(|(_, v)| v);
        let b = theirs.iter().find(|(k, _)| k == key).map(|(_, v)| v);
        if a != b {
            return Err(Failure::Data(format!(
                "checkpoint {} has {key}={} but {} was requested",
                path.display(),
                b.map_or("?", |v| v.as_str()),
                a.map_or("?", |v| v.as_str())
            )));
        }
    }
    let mut s = settings.clone();
    s.model = ck.config.clone();
    Ok((ck, s))
}

fn pick(split: Split, data: (Dataset, Dataset)) -> Dataset {
    match split {
        Split::Train => data.0,
        Split::Test => data.1,
    }
}

pub fn eval(args: EvalArgs) -> Outcome {
    let (ck, s) = checkpoint_settings(&args.checkpoint, &args.settings)?;
    let data = pick(args.split, s.load_data()?);
    let r = evaluate(
        &ck.config,
        &ck.weights,
        &data,
        &ck.stats,
        args.batch,
        args.export_features.is_some(),
    )?;
    println!(
        "samples={} loss={:.6} accuracy={:.4}",
        data.len(),
        r.loss,
        r.accuracy
    );
    if let Some(path) = &args.export_features {
        fs::write(path, features_csv(&r.features)).map_err(Error::from)?;
        println!(
            "wrote {} feature rows to {}",
            r.features.len(),
            path.display()
        );
    }
    Ok(())
}

#[derive(Debug)]
pub struct GenDataArgs {
    pub spec: SyntheticSpec,
    pub size: usize,
    pub out: PathBuf,
}

pub fn gen_data(args: GenDataArgs) -> Outcome {
    let (train, test) = synthetic_split(&args.spec, args.size)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    for (name, set) in [("train.bin", &train), ("test.bin", &test)] {
        let path = args.out.join(name);
        fs::write(&path, encode_records(&set.records)?).map_err(Error::from)?;
        println!("wrote {} records to {}", set.len(), path.display());
    }
    Ok(())
}

fn fault(inject: bool) -> Option<Fault> {
    inject.then_some(Fault::AbsGradient)
}

pub fn gradcheck(seed: u64, inject_fault: bool) -> Outcome {
    let check = GradCheck {
        fault: fault(inject_fault),
        ..GradCheck::default()
    };
    let prims = primitive_grad_checks(seed, &check)?;
    for r in &prims {
        println!("{r}");
    }
    let block = mma_block_grad_check(seed, &check)?;
    println!("{block}");
    let failed = prims.iter().filter(|r| !r.passed()).count() + usize::from(!block.passed());
    println!("gradcheck: {} checks, {failed} failed", prims.len() + 1);
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} gradient checks failed"
        )));
    }
    Ok(())
}

pub fn verify(seed: u64, inject_fault: bool) -> Outcome {
    let suite = run_property_suite(seed, fault(inject_fault))?;
    println!("{suite}");
    let failed: Vec<&str> = suite.failures().map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "properties failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn report(cfg: &ModelConfig) -> Outcome {
    for (k, v) in cfg.to_kv() {
        println!("config.{k} {v}");
    }
    let p = count_params(cfg);
    let f = count_flops(cfg);
    println!("{p}");
    println!("{f}");
    println!("macs.total             {}", f.total() / 2);
    println!(
        "summary params={:.2}M flops={:.3}G macs={:.3}G",
        p.total() as f64 / 1e6,
        f.total() as f64 / 1e9,
        f.total() as f64 / 2e9
    );
    Ok(())
}

#[derive(Debug)]
pub struct InspectArgs {
    pub settings: Settings,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub index: usize,
    pub out: PathBuf,
}

pub fn inspect(args: InspectArgs) -> Outcome {
    let (cfg, weights, stats, s) = match &args.checkpoint {
        Some(path) => {
            let (ck, s) = checkpoint_settings(path, &args.settings)?;
            (ck.config, ck.weights, Some(ck.stats), s)
        }
        None => {
            let s = args.settings.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
            let w =
                ModelWeights::<f32>::init_with_mix_noise(&s.model, &mut rng, s.train.mix_noise)?;
            (s.model.clone(), w, None, s)
        }
    };
    let data = pick(args.split, s.load_data()?);
    if args.index >= data.len() {
        return Err(Failure::Usage(format!(
            "index {} out of range for {} images",
            args.index,
            data.len()
        )));
    }
    let stats = stats.unwrap_or_else(|| ChannelStats::from_dataset(&data));
    let batch = Batch::<f32>::from_records(&data, &[args.index], &stats)?;
    let tape = Tape::<f32>::new();
    let bound = weights.bind_frozen(&tape);
    let pass = model_forward_traced(&tape, &batch.images, &bound, &cfg)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;

    let l = cfg.tokens();
    let towers = cfg.tower_attention();
    let mut written = 0usize;
    for (tower, tower_traces) in towers.iter().zip(&pass.traces) {
        for (b, trace) in tower_traces.iter().enumerate() {
            let mut maps: Vec<(String, Vec<f64>)> = Vec::new();
            for dm in &trace.maps {
                for (m, var) in dm.iter() {
                    maps.push((format!("dist_{}", tag(m)), to_f64(var.value().data())));
                }
            }
            for attn in &trace.attention {
                let name = match cfg.attention.fusion {
                    Fusion::Early => "fused".to_string(),
                    Fusion::Late => {
                        let m = tower.manifolds.iter().next().expect("tower manifold");
                        format!("attn_{}", tag(m))
                    }
                };
                maps.push((name, to_f64(attn.value().data())));
            }
            for (name, values) in &maps {
                for (h, head) in values.chunks(l * l).enumerate() {
                    write_map(&args.out, &format!("block{b}_head{h}_{name}"), head, l)?;
                    written += 1;
                }
            }
        }
    }
    let logits = to_f64(pass.logits.value().data());
    let predicted = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
        .unwrap_or(0);
    println!(
        "image {} label {} predicted {predicted}",
        args.index, data.records[args.index].label
    );
    println!("wrote {written} maps ({l}x{l}) to {}", args.out.display());
    Ok(())
}

/// File-name tag of a manifold's distance map.
fn tag(m: Manifold) -> &'static str {
    match m {
        Manifold::Euclidean => "e",
        Manifold::Spd => "spd",
        Manifold::Grassmann => "g",
    }
}

fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}
