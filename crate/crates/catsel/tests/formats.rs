use std::fs;
use std::path::Path;

use catsel::checkpoint::Checkpoint;
use catsel::config::RunConfig;
use catsel::dataset::{generate_dataset, manifest_path, write_split, LoadedDataset, SplitReader};
use catsel::{Error, FormatError};
use catsel_core::synth::SynthConfig;
use catsel_core::train::{prepare, evaluate, train_supervised, Attachment, TrainConfig, TrainData};

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig { channels: 6, planted: 2, len: 160, fs: 1000, samples_per_class: 10, ..SynthConfig::desk(seed) }
}

fn format_err(r: catsel::Result<impl std::fmt::Debug>) -> FormatError {
    match r {
        Err(Error::Format(f)) => f,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn dataset_write_read_write_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = small_synth(1);
    let meta = generate_dataset(&a, &cfg).unwrap();
    let ds = LoadedDataset::open(&a).unwrap();
    let counts = ds.manifest.split_counts;
    for (name, segs) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        write_split(&b, name, &meta, counts, segs).unwrap();
        for ext in ["json", "bin"] {
            let f = format!("{name}.{ext}");
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{f}");
        }
    }
    assert_eq!((counts.train, counts.val, counts.test), (32, 4, 4));
}

#[test]
fn read_back_matches_generated_data_at_32_bits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(2);
    generate_dataset(dir.path(), &cfg).unwrap();
    let mem = catsel_core::synth::generate(&cfg).unwrap();
    let ds = LoadedDataset::open(dir.path()).unwrap();
    let mut seen = 0;
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        // Every stored segment is the f32 image of exactly one generated segment.
        let hit = mem.segments.iter().any(|m| {
            m.label == s.label && m.data.data().iter().zip(s.data.data()).all(|(x, y)| (*x as f32) as f64 == *y)
        });
        assert!(hit);
        seen += 1;
    }
    assert_eq!(seen, cfg.total());
    assert_eq!(ds.manifest.planted.as_deref(), Some(mem.planted.as_slice()));
}

#[test]
fn generation_is_deterministic_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&a, &small_synth(7)).unwrap();
    generate_dataset(&b, &small_synth(7)).unwrap();
    for f in ["train.json", "train.bin", "val.bin", "test.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

fn corrupt(path: &Path, f: impl FnOnce(&mut Vec<u8>)) {
    let mut bytes = fs::read(path).unwrap();
    f(&mut bytes);
    fs::write(path, bytes).unwrap();
}

#[test]
fn dataset_corruptions_map_to_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_synth(3)).unwrap();
    let mp = manifest_path(dir.path(), "train");
    let blob = dir.path().join("train.bin");
    let pristine = fs::read(&blob).unwrap();

    let mut r = SplitReader::open(&mp).unwrap();
    assert!(matches!(format_err(r.read_segment(32)), FormatError::OutOfBounds { index: 32, count: 32 }));

    corrupt(&blob, |b| b[0] = b'X');
    assert!(matches!(format_err(SplitReader::open(&mp)), FormatError::BadMagic { .. }));

    fs::write(&blob, &pristine).unwrap();
    corrupt(&blob, |b| b[4] = 9);
    assert!(matches!(format_err(SplitReader::open(&mp)), FormatError::VersionMismatch { found: 9, expected: 1, .. }));

    fs::write(&blob, &pristine).unwrap();
    corrupt(&blob, |b| b.truncate(b.len() - 10));
    assert!(matches!(format_err(SplitReader::open(&mp)), FormatError::Truncated { .. }));

    fs::write(&blob, &pristine).unwrap();
    let text = fs::read_to_string(&mp).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
    fs::write(&mp, text).unwrap();
    assert!(matches!(format_err(SplitReader::open(&mp)), FormatError::VersionMismatch { found: 2, .. }));
}

#[test]
fn checkpoint_round_trip_and_corruptions() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_synth(4)).unwrap();
    let ds = LoadedDataset::open(dir.path()).unwrap();
    let data = TrainData { train: &ds.train, val: &ds.val, test: &ds.test, classes: 4 };
    let mut cfg = TrainConfig::desk(Attachment::ChatClassifier);
    cfg.optim.epochs = 2;
    cfg.chat.n_cat = 2;
    let trained = train_supervised(&cfg, &data, 5, None, &mut |_| {}).unwrap();
    let ck = Checkpoint::new(RunConfig::default(), 5, trained.outcome.best_epoch, trained.models);

    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    ck.save(&first).unwrap();
    let loaded = Checkpoint::load(&first).unwrap();
    loaded.save(&second).unwrap();
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());

    // Restored models predict exactly like the originals, running BN statistics included.
    let test: Vec<_> = ds.test.iter().map(|s| prepare(s).unwrap()).collect();
    let mut a = ck.into_models().unwrap();
    let mut b = loaded.into_models().unwrap();
    let (ea, eb) = (evaluate(&mut a, &test, 8).unwrap(), evaluate(&mut b, &test, 8).unwrap());
    assert_eq!(ea.predictions, eb.predictions);
    assert_eq!(ea.weights, eb.weights);

    let bytes = fs::read(&first).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(format_err(Checkpoint::from_bytes(&first, &bad)), FormatError::BadMagic { .. }));
    for cut in [3, 10, 40, bytes.len() - 1] {
        assert!(matches!(format_err(Checkpoint::from_bytes(&first, &bytes[..cut])), FormatError::Truncated { .. }), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(format_err(Checkpoint::from_bytes(&first, &bad)), FormatError::VersionMismatch { found: 7, .. }));
}
