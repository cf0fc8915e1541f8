//! Images on disk through load, split, training, checkpointing and
//! evaluation.

use shrimpnet::datapipe::{
    generate_synthetic, load_dataset, load_prepared, parse_manifest, save_prepared, split, write_image_tree,
    BackgroundMode, PreparedInfo, SplitKind,
};
use shrimpnet::metrics::EvalReport;
use shrimpnet::model::Checkpoint;
use shrimpnet::trainer::{evaluate, ModelOptions, TrainConfig, Trainer};

#[test]
fn disk_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate_synthetic(10, 3, 24, 2).unwrap();
    write_image_tree(&set.samples, dir.path()).unwrap();

    let (samples, names) = load_dataset(dir.path(), (16, 16), BackgroundMode::None).unwrap();
    let mut sorted = set.class_names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    assert_eq!(samples.len(), 30);
    assert!(samples.iter().all(|s| s.image.shape() == [3, 16, 16]));
    assert!(samples.windows(2).all(|w| w[0].source_id < w[1].source_id));

    let sp = split(samples, &names, 9).unwrap();
    let rows = parse_manifest(&sp.manifest()).unwrap();
    assert_eq!(rows.len(), 30);
    assert_eq!(rows.iter().filter(|r| r.2 == SplitKind::Train).count(), 21);

    let info = PreparedInfo {
        image_size: (16, 16),
        background: "none".into(),
        split_seed: 9,
        class_names: names.clone(),
    };
    let data = dir.path().join("data.bin");
    save_prepared(&sp, &info, &data).unwrap();
    let (back, _) = load_prepared(&data).unwrap();
    assert_eq!(back, sp);

    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        model: ModelOptions {
            filters: vec![4, 8],
            hidden_width: 8,
            ..ModelOptions::default()
        },
        ..TrainConfig::default()
    };
    let spec = config.model.spec(3, (16, 16));
    let mut trainer = Trainer::new(config, spec).unwrap();
    trainer.run(&back).unwrap();
    let outcome = trainer.outcome();
    assert_eq!(outcome.history.epochs.len(), 2);

    let ck_path = dir.path().join("model.ckpt");
    trainer.checkpoint().save(&ck_path).unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(&ck.params, trainer.params());

    let ev = evaluate(&ck.spec, &ck.params, &back.test, 4).unwrap();
    assert_eq!(ev.labels.len(), back.test.len());
    let probs: Vec<f64> = ev.probabilities.data().iter().map(|&p| p as f64).collect();
    let report = EvalReport::build(&names, &ev.labels, &ev.predictions, &probs, 100, 2.576, 0).unwrap();
    assert!((report.accuracy - ev.accuracy).abs() < 1e-12);
    assert_eq!(report.confusion.total() as usize, back.test.len());
}
