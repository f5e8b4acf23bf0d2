use tsaug::data::{
    augment, ema_smooth, load_price_csv, make_windows, normalize_set, split_dataset, synthetic_count, Origin, SplitMethod,
    SplitSpec, SplitTag, WindowSpec,
};
use tsaug::forecaster::{evaluate_mse, train_forecaster, ForecastModel, ForecasterConfig};
use tsaug::gan::{load_checkpoint, DiscriminatorConfig, GeneratorConfig};
use tsaug::metrics::compare;
use tsaug::toy::noisy_sine_prices;
use tsaug::training::{generate_dataset, train_from, TrainOptions, TrainingConfig, TrainingState};

fn tiny_nets(k: usize) -> (GeneratorConfig, DiscriminatorConfig) {
    let g = GeneratorConfig {
        depth: 1,
        heads: 2,
        embed_dim: 4,
        patch_size: 4,
        latent_dim: 8,
        seq_len: k,
        ..GeneratorConfig::for_seq_len(k)
    };
    let d = DiscriminatorConfig {
        depth: 1,
        heads: 2,
        embed_dim: 4,
        patch_size: 4,
        seq_len: k,
        ..DiscriminatorConfig::for_seq_len(k)
    };
    (g, d)
}

#[test]
fn csv_to_augmented_forecast() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("prices.csv");
    noisy_sine_prices(200, 20.0, 0.01, 5).unwrap().write_csv(&csv).unwrap();

    let window = WindowSpec::new(16, 8, 1).unwrap();
    let series = ema_smooth(&load_price_csv(&csv).unwrap(), 5).unwrap();
    let (set, dropped) = normalize_set(&make_windows(&series, &window).unwrap()).unwrap();
    assert_eq!(dropped, 0);
    assert_eq!(set.len(), 200 - 24 + 1);
    for s in &set.samples {
        let obs = s.observation(&window);
        assert!(obs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let splits = split_dataset(&set, &SplitSpec::default(), SplitMethod::Chronological, 0).unwrap();
    assert_eq!(splits.train.len() + splits.validation.len() + splits.test.len(), set.len());
    assert_eq!(splits.test.split, SplitTag::Test);

    // GAN on train ∪ validation, checkpointed to disk and reloaded
    let (g, d) = tiny_nets(window.k);
    let t_cfg = TrainingConfig {
        epochs: 2,
        batch_size: 16,
        metric_every: 1,
        metric_sample_n: 8,
        seed: 1,
        ..Default::default()
    };
    let gan_data = splits.train.concat(&splits.validation, SplitTag::Train).unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        ..Default::default()
    };
    let state = TrainingState::new(&g, &d, &t_cfg).unwrap();
    let outcome = train_from(&gan_data, state, &t_cfg, &opts).unwrap();
    assert_eq!(outcome.log.len(), 2);
    let (generator, _) = load_checkpoint(&dir.path().join("ckpt/final")).unwrap();

    let n = synthetic_count(splits.train.len(), 1.0);
    let synthetic = generate_dataset(&generator, n, 3, &window).unwrap();
    let report = compare(&splits.train, &synthetic, Some(8), 0).unwrap();
    assert!(report.wasserstein.is_finite() && report.dtw_dedims.is_finite());

    let augmented = augment(&splits.train, &synthetic, 1.0).unwrap();
    assert_eq!(augmented.count_origin(Origin::Real), splits.train.len());
    assert_eq!(augmented.count_origin(Origin::Synthetic), n);

    // forecaster trained on the augmented set survives a save/load round trip
    let f_cfg = ForecasterConfig {
        hidden_size: 8,
        num_layers: 2,
        epochs: 3,
        ..ForecasterConfig::for_window(&window)
    };
    let trained = train_forecaster(&augmented, &splits.validation, &f_cfg).unwrap();
    let before = evaluate_mse(&trained.model, &splits.test).unwrap();
    let model_dir = dir.path().join("model");
    trained.model.save(&model_dir).unwrap();
    let after = evaluate_mse(&ForecastModel::load(&model_dir).unwrap(), &splits.test).unwrap();
    // weights are stored as f32
    assert!((before.mse - after.mse).abs() <= 1e-5 * before.mse, "{} vs {}", before.mse, after.mse);
    assert_eq!(before.n_samples, splits.test.len());
}

#[test]
fn test_split_never_reaches_training() {
    let window = WindowSpec::new(16, 8, 1).unwrap();
    let series = noisy_sine_prices(120, 20.0, 0.01, 2).unwrap();
    let (set, _) = normalize_set(&make_windows(&series, &window).unwrap()).unwrap();
    let splits = split_dataset(&set, &SplitSpec::default(), SplitMethod::Random, 4).unwrap();

    let (g, d) = tiny_nets(window.k);
    let t_cfg = TrainingConfig {
        epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    let state = TrainingState::new(&g, &d, &t_cfg).unwrap();
    assert!(train_from(&splits.test, state, &t_cfg, &TrainOptions::default()).is_err());

    let f_cfg = ForecasterConfig {
        hidden_size: 4,
        num_layers: 1,
        epochs: 1,
        ..ForecasterConfig::for_window(&window)
    };
    assert!(train_forecaster(&splits.test, &splits.validation, &f_cfg).is_err());
    let trained = train_forecaster(&splits.train, &splits.validation, &f_cfg).unwrap();
    assert!(evaluate_mse(&trained.model, &splits.validation).is_err());
}
