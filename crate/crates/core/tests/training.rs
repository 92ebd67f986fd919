use simvae::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use simvae::data::{CorpusSpec, Dataset, GenerativeFactors, Split, SubjectRecord, Volume};
use simvae::error::Error;
use simvae::model::{ModelConfig, VaeModel};
use simvae::training::*;

fn corpus(n: usize) -> Dataset {
    let spec = CorpusSpec {
        subjects: n,
        shape: [16, 16, 16],
        ..CorpusSpec::default()
    };
    Dataset::synthesize(&spec, 1.0).unwrap()
}

fn split(n: usize) -> Split {
    simvae::data::split_dataset(n, Default::default(), 1).unwrap()
}

fn hyper(epochs: usize) -> HyperParams {
    HyperParams {
        learning_rate: 1e-3,
        epochs,
        batch_size: 4,
        beta: 1e-3,
        alpha: 1.0,
        seed: 5,
        ..HyperParams::default()
    }
}

fn identical_subjects(n: usize) -> Dataset {
    let spec = CorpusSpec {
        shape: [16, 16, 16],
        ..CorpusSpec::default()
    };
    let v = simvae::data::generate_phantom(&spec, &GenerativeFactors::neutral(30.0)).unwrap();
    let v = simvae::data::normalize_intensity(&v, 1.0).unwrap();
    let records = (0..n)
        .map(|i| SubjectRecord {
            id: format!("s{i}"),
            volume_path: "unused.vol".into(),
            score: 30.0,
            diagnosis: simvae::data::Diagnosis::MCI,
            factors: None,
        })
        .collect();
    Dataset::from_parts(records, vec![v; n]).unwrap()
}

#[test]
fn descent_on_identical_volumes() {
    let data = identical_subjects(4);
    let split = Split {
        train: vec![0, 1, 2, 3],
        val: vec![0, 1, 2, 3],
        test: vec![],
    };
    let h = HyperParams {
        beta: 0.0,
        alpha: 0.0,
        batch_size: 4,
        ..hyper(5)
    };
    let mut t = Trainer::from_config(ModelConfig::tiny(4).with_seed(2), h).unwrap();
    fit(&mut t, &data, &split, None, None).unwrap();
    let mse: Vec<f64> = t.history.epochs.iter().map(|e| e.train.mse).collect();
    assert!(mse.windows(2).all(|w| w[1] < w[0]), "{mse:?}");
}

#[test]
fn memorization_smoothed_mse_decreases() {
    let data = corpus(4);
    let split = Split {
        train: vec![0, 1, 2, 3],
        val: vec![0, 1, 2, 3],
        test: vec![],
    };
    let h = HyperParams {
        beta: 0.0,
        alpha: 0.0,
        batch_size: 4,
        ..hyper(50)
    };
    let mut t = Trainer::from_config(ModelConfig::tiny(4).with_seed(3), h).unwrap();
    fit(&mut t, &data, &split, None, None).unwrap();
    let mse: Vec<f64> = t.history.epochs.iter().map(|e| e.train.mse).collect();
    let smooth: Vec<f64> = mse.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
}

#[test]
fn fixed_seed_gives_identical_histories() {
    let data = corpus(24);
    let s = split(24);
    let run = || {
        let mut t = Trainer::from_config(ModelConfig::tiny(4).with_seed(9), hyper(3)).unwrap();
        fit(&mut t, &data, &s, None, None).unwrap();
        (t.history, t.model.parameter_hash())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for e in &a.0.epochs {
        assert!((-1.0..=1.0).contains(&e.val_r));
        assert!(e.train.total.is_finite() && e.val.total.is_finite());
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let data = corpus(16);
    let s = split(16);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = Trainer::from_config(ModelConfig::tiny(3).with_seed(4), hyper(2)).unwrap();
            fit(&mut t, &data, &s, None, None).unwrap();
            t.model.parameter_hash()
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn empty_training_set_rejected() {
    let data = corpus(4);
    let s = Split {
        train: vec![],
        val: vec![0, 1, 2],
        test: vec![],
    };
    let mut t = Trainer::from_config(ModelConfig::tiny(2), hyper(1)).unwrap();
    assert!(matches!(t.train_epoch(&data, &s.train), Err(Error::InvalidArgument(_))));
}

#[test]
fn non_finite_loss_aborts_with_batch_context() {
    let data = corpus(8);
    let s = Split {
        train: (0..8).collect(),
        val: vec![0, 1, 2],
        test: vec![],
    };
    let mut model = VaeModel::new(ModelConfig::tiny(2)).unwrap();
    model.params_mut()[0].data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, hyper(1)).unwrap();
    match t.train_epoch(&data, &s.train) {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn resume_equals_uninterrupted_training() {
    let data = corpus(24);
    let s = split(24);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::from_config(ModelConfig::tiny(4).with_seed(6), hyper(3)).unwrap();
    fit(&mut full, &data, &s, None, None).unwrap();

    let mut part = Trainer::from_config(ModelConfig::tiny(4).with_seed(6), hyper(2)).unwrap();
    fit(&mut part, &data, &s, None, None).unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&part, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    resumed.hyper.epochs = 3;
    fit(&mut resumed, &data, &s, None, None).unwrap();

    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model.parameter_hash(), full.model.parameter_hash());
    assert_eq!(resumed.adam, full.adam);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let t = Trainer::from_config(ModelConfig::tiny(3).with_seed(8), hyper(1)).unwrap();
    let bytes = encode_checkpoint(&t).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.model.parameter_hash(), t.model.parameter_hash());
    assert_eq!(back.hyper, t.hyper);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let err = decode_checkpoint(&flipped).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    assert!(decode_checkpoint(&bytes[..bytes.len() - 10]).is_err());

    let mut version = bytes.clone();
    version[8] = 9;
    let err = decode_checkpoint(&version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let data = corpus(16);
    let s = split(16);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("metrics.csv");
    let ck = dir.path().join("model.ckpt");
    let mut t = Trainer::from_config(ModelConfig::tiny(2), hyper(2)).unwrap();
    fit(&mut t, &data, &s, Some(&log), Some(&ck)).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(ck.exists());
    assert!(!dir.path().join("model.ckpt.tmp").exists());
}

#[test]
fn volume_shape_mismatch_rejected() {
    let records = vec![
        SubjectRecord {
            id: "a".into(),
            volume_path: "a.vol".into(),
            score: 1.0,
            diagnosis: simvae::data::Diagnosis::HC,
            factors: None,
        };
        3
    ];
    let vols = vec![Volume::new([8, 8, 8], vec![1.0; 512]).unwrap(); 3];
    let data = Dataset::from_parts(records, vols).unwrap();
    let s = Split {
        train: vec![0, 1, 2],
        val: vec![],
        test: vec![],
    };
    let mut t = Trainer::from_config(ModelConfig::tiny(2), hyper(1)).unwrap();
    assert!(matches!(fit(&mut t, &data, &s, None, None), Err(Error::Config(_))));
}
