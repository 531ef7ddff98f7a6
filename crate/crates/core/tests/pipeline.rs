use ssaclr_core::config::{parse_flat, TrainConfig};
use ssaclr_core::data::{gen_synthetic, load_cifar10_file, write_cifar10, DatasetSpec, LabeledSet, Split};
use ssaclr_core::encoder::read_checkpoint;
use ssaclr_core::eval::ProbeConfig;
use ssaclr_core::shift_gap::ShiftGapConfig;
use ssaclr_core::train::{evaluate_checkpoint, read_metrics, train_ssl, EvalSettings, METRICS_FILE};
use ssaclr_core::{Error, Image};

fn small_config(dir: &std::path::Path) -> TrainConfig {
    let flat = parse_flat(
        r#"
        data = "synthetic:n=8,classes=2,size=8,seed=1"
        epochs = 2
        batch_size = 4
        seed = 5
        [encoder]
        hidden = [16]
        feature_dim = 8
        projection_hidden = 8
        projection_dim = 4
        [sam]
        enabled = true
        [fft]
        enabled = true
        "#,
    )
    .unwrap();
    let mut cfg = TrainConfig::from_flat(&flat).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = train_ssl(&cfg).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics.iter().all(|m| m.mean_loss.is_some_and(f64::is_finite)));
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.metrics);

    let ckpt = read_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(ckpt.header.epoch, 2);
    assert_eq!(ckpt.header.config_hash, cfg.config_hash());

    let settings = EvalSettings {
        probe: ProbeConfig { epochs: 5, ..ProbeConfig::default() },
        gap: ShiftGapConfig { n_mc_aug: 2, ..ShiftGapConfig::default() },
        ..EvalSettings::default()
    };
    let report = evaluate_checkpoint(&out.checkpoint, &cfg.data, &cfg, &settings).unwrap();
    assert!((0.0..=1.0).contains(&report.top1));
    assert!(report.robust <= 1.0);
    assert!(report.gap_base.aggregate >= 0.0 && report.gap_fft.aggregate >= 0.0);
}

#[test]
fn resume_with_changed_config_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = train_ssl(&cfg).unwrap();
    let mut other = small_config(&dir.path().join("other"));
    other.tau = 0.2;
    other.resume = Some(out.checkpoint);
    let err = train_ssl(&other).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("refusing")), "{err}");
}

#[test]
fn cifar_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = Vec::new();
    for i in 0..3 {
        let px = (0..32 * 32 * 3).map(|j| ((i * 7 + j) % 256) as f64 / 255.0).collect();
        images.push(Image::new(32, 32, 3, px).unwrap());
    }
    let set = LabeledSet::new(images, vec![0, 9, 4], 10).unwrap();
    let path = dir.path().join("data_batch_1.bin");
    write_cifar10(&path, &set).unwrap();
    let back = load_cifar10_file(&path).unwrap();
    assert_eq!(back.labels, set.labels);
    assert_eq!(back.images, set.images);

    std::fs::copy(&path, dir.path().join("test_batch.bin")).unwrap();
    let spec: DatasetSpec = format!("cifar10:{},limit=2", dir.path().display()).parse().unwrap();
    assert_eq!(spec.load(Split::Train).unwrap().len(), 2);
    assert_eq!(spec.load(Split::Test).unwrap().labels, vec![0, 9]);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(load_cifar10_file(&path), Err(Error::Ingest { .. })));
}

#[test]
fn synthetic_splits_differ_but_repeat() {
    let spec = DatasetSpec::default();
    let train = spec.load(Split::Train).unwrap();
    let test = spec.load(Split::Test).unwrap();
    assert_eq!(train.len(), 200);
    assert_ne!(train.images, test.images);
    assert_eq!(train.images, spec.load(Split::Train).unwrap().images);
    assert_eq!(gen_synthetic(3, 2, 4, 0).unwrap().labels, vec![0, 1, 0, 1, 0, 1]);
}
