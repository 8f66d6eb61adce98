use cluda_core::data::{load_csv, synth_generate, write_csv, SynthConfig};
use cluda_core::experiment::{desk_config, run_variant, DomainSplits};
use cluda_core::pipeline::{evaluate, train, CludaModel, Variant};
use cluda_core::Error;

fn small_synth() -> SynthConfig {
    SynthConfig {
        train_per_domain: 80,
        val_per_domain: 30,
        test_per_domain: 40,
        ..SynthConfig::default()
    }
}

fn quick(splits: &DomainSplits) -> cluda_core::pipeline::TrainConfig {
    let mut c = desk_config(splits.source_train.channels(), splits.source_train.history());
    c.tcn.channels = 8;
    c.batch_size = 16;
    c.queue_size = 64;
    c.max_steps = 30;
    c.eval_interval = 10;
    c
}

#[test]
fn csv_round_trip_preserves_every_split() {
    let data = synth_generate(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, raw) in data.splits() {
        let samples = dir.path().join(format!("{name}.csv"));
        let labels = dir.path().join(format!("{name}_labels.csv"));
        write_csv(
            raw,
            std::fs::File::create(&samples).unwrap(),
            Some(std::fs::File::create(&labels).unwrap()),
        )
        .unwrap();
        let back = load_csv(&samples, Some(&labels)).unwrap();
        assert_eq!(&back, raw, "{name}");
    }
}

#[test]
fn train_checkpoint_evaluate() {
    let data = synth_generate(&small_synth()).unwrap();
    let splits = DomainSplits::from_synth(&data, 48).unwrap();
    let config = quick(&splits);
    let mut history = Vec::new();
    let outcome = train(
        &config,
        &splits.source_train,
        &splits.source_val,
        &splits.target_train,
        Some(&mut history),
    )
    .unwrap();
    assert_eq!(outcome.steps_run, 30);
    assert_eq!(String::from_utf8(history).unwrap().lines().count(), 3);
    let best = outcome.evaluations().filter_map(|r| r.val_metric).fold(f64::MIN, f64::max);
    assert_eq!(outcome.best_metric, best);
    assert_eq!(evaluate(&outcome.model, &splits.source_val, config.task).unwrap().primary(), best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    outcome.model.save(&path, &config, outcome.best_step).unwrap();
    let (loaded, loaded_config, step) = CludaModel::load(&path).unwrap();
    assert_eq!(loaded_config, config);
    assert_eq!(step, outcome.best_step);
    let x = splits.target_test.batch_values(&[0, 1, 2]).unwrap();
    assert_eq!(loaded.predict(&x).unwrap(), outcome.model.predict(&x).unwrap());
}

#[test]
fn source_only_needs_no_target_data() {
    let data = synth_generate(&small_synth()).unwrap();
    let splits = DomainSplits::from_synth(&data, 48).unwrap();
    let mut config = quick(&splits);
    Variant::SourceOnly.apply(&mut config);
    let empty = splits.target_train.subset(&[]);
    train(&config, &splits.source_train, &splits.source_val, &empty, None).unwrap();
    let full = quick(&splits);
    let err = train(&full, &splits.source_train, &splits.source_val, &empty, None).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
}

#[test]
fn runs_are_reproducible_per_seed() {
    let data = synth_generate(&small_synth()).unwrap();
    let splits = DomainSplits::from_synth(&data, 48).unwrap();
    let config = quick(&splits);
    let (a, _) = run_variant(&splits, &config, Variant::Full, 5).unwrap();
    let (b, _) = run_variant(&splits, &config, Variant::Full, 5).unwrap();
    let (c, _) = run_variant(&splits, &config, Variant::Full, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
