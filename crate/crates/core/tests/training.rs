use mma_core::data::gen_synthetic_textures;
use mma_core::train::{evaluate, fit, load_checkpoint, save_checkpoint, TrainConfig, TrainState};
use mma_core::{Error, Fusion, ManifoldSet, ModelConfig};

fn tiny_model(fusion: Fusion) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.depth = 1;
    cfg.num_classes = 4;
    cfg.attention.heads = 2;
    cfg.attention.model_dim = 16;
    cfg.attention.manifolds = ManifoldSet::ALL;
    cfg.attention.fusion = fusion;
    cfg
}

fn tiny_recipe(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        base_lr: 3e-3,
        warmup_epochs: 1,
        crop_pad: 1,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_drops_for_both_fusions() {
    let data = gen_synthetic_textures(16, 8, 2).unwrap();
    for fusion in [Fusion::Early, Fusion::Late] {
        let mut state = TrainState::<f32>::new(tiny_model(fusion), tiny_recipe(6), &data).unwrap();
        let report = fit(&mut state, &data, Some(&data), |_| {}).unwrap();
        let first = report.rows.first().unwrap().train_loss;
        let last = report.last().unwrap().train_loss;
        assert!(last < first, "{fusion:?}: {first} -> {last}");
        assert_eq!(report.rows.len(), 6);
        assert!(report.rows.iter().all(|r| r.eval_acc.is_finite()));
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let data = gen_synthetic_textures(8, 8, 3).unwrap();
    let run = || {
        let mut s =
            TrainState::<f64>::new(tiny_model(Fusion::Early), tiny_recipe(2), &data).unwrap();
        let r = fit(&mut s, &data, None, |_| {}).unwrap();
        let losses: Vec<u64> = r.rows.iter().map(|row| row.train_loss.to_bits()).collect();
        (losses, s.weights)
    };
    assert_eq!(run(), run());
}

#[test]
fn saved_model_evaluates_the_same() {
    let data = gen_synthetic_textures(8, 8, 5).unwrap();
    let mut state =
        TrainState::<f32>::new(tiny_model(Fusion::Late), tiny_recipe(2), &data).unwrap();
    fit(&mut state, &data, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mmac");
    save_checkpoint(&path, &state.model, &state.weights, &state.stats).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let before = evaluate(&state.model, &state.weights, &data, &state.stats, 8, true).unwrap();
    let after = evaluate(&ck.config, &ck.weights, &data, &ck.stats, 8, true).unwrap();
    assert_eq!(before, after);
    assert_eq!(after.features.len(), data.len());
}

#[test]
fn divergent_rate_reports_numeric_error() {
    let data = gen_synthetic_textures(4, 8, 1).unwrap();
    let recipe = TrainConfig {
        base_lr: 1e30,
        warmup_epochs: 0,
        ..tiny_recipe(3)
    };
    let mut state = TrainState::<f32>::new(tiny_model(Fusion::Early), recipe, &data).unwrap();
    match fit(&mut state, &data, None, |_| {}) {
        Err(Error::NumericDomain(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn mismatched_image_size_is_rejected() {
    let data = gen_synthetic_textures(2, 16, 1).unwrap();
    assert!(TrainState::<f32>::new(tiny_model(Fusion::Early), tiny_recipe(1), &data).is_err());
}
