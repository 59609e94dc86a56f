use dequmx::separator::{
    toy_dataset, Adam, Checkpoint, Dataset, ModelSpec, SeparatorModel, Stage, TrainConfig, Trainer, Variant, CHECKPOINT_VERSION,
};
use dequmx::{Error, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(pretrain_epochs: usize) -> TrainConfig {
    TrainConfig {
        pretrain_epochs,
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::toy()
    }
}

fn tiny_trainer(data: &Dataset, config: TrainConfig) -> Trainer {
    let mut model = SeparatorModel::new(&ModelSpec::toy(Variant::DeqUmx), "tone", &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mixes: Vec<_> = data.train.iter().map(|e| e.mixture_magnitude()).collect();
    model.fit_normalization(&mixes).unwrap();
    Trainer::new(model, config).unwrap()
}

fn trained_checkpoint() -> Vec<u8> {
    let data = toy_dataset(4, 1, 3).unwrap();
    let mut t = tiny_trainer(&data, tiny_config(1));
    t.run_epoch(&data).unwrap();
    t.checkpoint().to_bytes()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let bytes = trained_checkpoint();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);
    assert_eq!(ckpt.state.epoch, 1);
    assert!(ckpt.state.optimizer.step > 0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
}

#[test]
fn restored_model_separates_identically() {
    let data = toy_dataset(4, 1, 3).unwrap();
    let mut t = tiny_trainer(&data, tiny_config(0));
    t.run_epoch(&data).unwrap();
    let restored = Checkpoint::from_bytes(&t.checkpoint().to_bytes()).unwrap().model().unwrap();
    let mix = data.valid[0].mixture_magnitude();
    let (a, b) = (t.model.separate(&mix).unwrap().0, restored.separate(&mix).unwrap().0);
    assert_eq!(a.data(), b.data());
}

#[test]
fn version_and_truncation_errors() {
    let bytes = trained_checkpoint();
    let mut future = bytes.clone();
    future[8] = 255;
    assert!(matches!(Checkpoint::from_bytes(&future), Err(Error::UnsupportedVersion(255))));
    assert_eq!(bytes[8], CHECKPOINT_VERSION);

    let cut = bytes.len() - 5;
    match Checkpoint::from_bytes(&bytes[..cut]) {
        Err(Error::Checkpoint { offset, .. }) => assert!(offset <= cut, "{offset}"),
        other => panic!("{other:?}"),
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Checkpoint { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Checkpoint { .. })));
}

#[test]
fn foreign_parameters_are_a_spec_mismatch() {
    let mut ckpt = Checkpoint::from_bytes(&trained_checkpoint()).unwrap();
    ckpt.params.insert("extra.w".to_string(), Tensor::zeros(vec![2, 2])).unwrap();
    ckpt.state.optimizer.m.insert("extra.w".to_string(), Tensor::zeros(vec![2, 2])).unwrap();
    ckpt.state.optimizer.v.insert("extra.w".to_string(), Tensor::zeros(vec![2, 2])).unwrap();
    assert!(matches!(ckpt.model(), Err(Error::SpecMismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corrupt_bytes_never_panic(cut in 0.0f64..1.0, flip in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let bytes = trained_checkpoint_cached();
        let n = (cut * bytes.len() as f64) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] = byte;
        let _ = Checkpoint::from_bytes(&bad);
    }
}

fn trained_checkpoint_cached() -> &'static Vec<u8> {
    static BYTES: std::sync::OnceLock<Vec<u8>> = std::sync::OnceLock::new();
    BYTES.get_or_init(trained_checkpoint)
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = toy_dataset(4, 2, 9).unwrap();
    let mut full = tiny_trainer(&data, tiny_config(1));
    let full_log = full.train(&data, |_, _| Ok(())).unwrap();

    let mut part = tiny_trainer(&data, tiny_config(1));
    let mut log = vec![part.run_epoch(&data).unwrap()];
    let ckpt = Checkpoint::from_bytes(&part.checkpoint().to_bytes()).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, ckpt.config.clone()).unwrap();
    log.extend(resumed.train(&data, |_, _| Ok(())).unwrap());

    assert_eq!(log, full_log);
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn stage_switch_resets_budgets_but_keeps_moments() {
    let data = toy_dataset(4, 1, 5).unwrap();
    let mut t = tiny_trainer(&data, tiny_config(2));
    assert_eq!(t.state.stage, Stage::PretrainWt);
    t.run_epoch(&data).unwrap();
    t.state.lr = 1e-5;
    t.state.since_best = 1;
    t.state.plateau = 1;
    let moments = t.state.optimizer.clone();
    t.switch_to_deq().unwrap();
    assert_eq!(t.state.stage, Stage::Deq);
    assert_eq!(t.state.stage_epoch, 0);
    assert_eq!(t.state.epoch, 1);
    assert_eq!(t.state.lr, t.config.lr);
    assert_eq!((t.state.since_best, t.state.plateau), (0, 0));
    assert_eq!(t.state.best_val, f64::INFINITY);
    assert_eq!(t.state.optimizer, moments);
    let log = t.run_epoch(&data).unwrap();
    assert_eq!(log.stage, Stage::Deq);
    assert!(log.nfe_mean >= 1.0 && log.nfe_mean <= t.config.l_max_after_pretrain as f64);
}

#[test]
fn plateau_decays_rate_and_patience_stops() {
    let data = toy_dataset(2, 1, 6).unwrap();
    let config = TrainConfig {
        plateau_patience_epochs: 2,
        early_stop_patience_epochs: 3,
        epochs: 50,
        ..tiny_config(0)
    };
    let mut t = tiny_trainer(&data, config);
    // Nothing can beat this, so every epoch counts as a plateau epoch.
    t.state.best_val = f64::NEG_INFINITY;
    let lr0 = t.state.lr;
    let mut rates = Vec::new();
    while !t.done() {
        rates.push(t.run_epoch(&data).unwrap().lr);
    }
    assert_eq!(rates, [lr0, lr0, lr0 * 0.3]);
    assert_eq!(t.state.since_best, 3);
}

#[test]
fn first_adam_step_moves_each_weight_by_the_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamSet::new();
    params.insert("w".to_string(), Tensor::randn(vec![3, 4], &mut rng)).unwrap();
    let grads = {
        let mut g = ParamSet::new();
        g.insert("w".to_string(), Tensor::randn(vec![3, 4], &mut rng)).unwrap();
        g
    };
    let before = params.get("w").unwrap().clone();
    let mut adam = Adam::new(&params);
    adam.update(&mut params, &grads, 1e-3, 0.0).unwrap();
    let after = params.get("w").unwrap();
    for ((b, a), g) in before.data().iter().zip(after.data()).zip(grads.get("w").unwrap().data()) {
        let expected = -1e-3 * g.signum();
        assert!((a - b - expected).abs() < 1e-8, "{} vs {expected}", a - b);
    }
}

#[test]
fn duplicated_clip_leaves_loss_and_gradient_unchanged() {
    let data = toy_dataset(1, 0, 2).unwrap();
    let mut model = tiny_trainer(&data, tiny_config(0)).model;
    let (mix, target) = (data.train[0].mixture_magnitude(), data.train[0].target_magnitude());
    let mut other = model.clone();
    let (l1, g1, _) = model.train_step(&mix, &target).unwrap();
    let (l2, g2, _) = other.train_batch(&[mix.clone(), mix], &[target.clone(), target]).unwrap();
    assert!((l1 - l2).abs() < 1e-12 * l1.abs());
    for (name, g) in g1.iter() {
        let diff = g.max_abs_diff(g2.get(name).unwrap()).unwrap();
        assert!(diff <= 1e-9 * (1.0 + g.max_abs()), "{name}: {diff:e}");
    }
}
