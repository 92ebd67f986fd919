use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[corpus]
subjects = 60
shape = [16, 16, 16]

[model]
input_shape = [16, 16, 16]
hidden_width = 64

[train]
epochs = 2
batch_size = 8
learning_rate = 1e-3
alpha = 1.0

[sweep]
d_values = [2, 4]
beta_values = [0.0, 1.0]
alpha_values = [0.0, 10.0]
fixed_d = 4

[analysis]
levels = 5
samples = 4
traversal_steps = 3
"#;

fn simvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SIMVAE_OUT")
        .env_remove("SIMVAE_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    let o = simvae(&["gen-data", "--spec", s(&config), "--out", s(&data), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(f: &Fixture, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(out), "--seed", "3"];
    args.extend_from_slice(extra);
    simvae(&args)
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let f = fixture();
    let again = f.root.join("again");
    let o = simvae(&["gen-data", "--spec", s(&f.config), "--out", s(&again), "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("subjects: 60") && out.contains("score histogram"), "{out}");
    assert_eq!(
        fs::read(f.data.join("MANIFEST.txt")).unwrap(),
        fs::read(again.join("MANIFEST.txt")).unwrap()
    );
    assert_eq!(
        fs::read(f.data.join("manifest.csv")).unwrap(),
        fs::read(again.join("manifest.csv")).unwrap()
    );
}

#[test]
fn gen_data_subject_override_sets_row_count() {
    let f = fixture();
    let out = f.root.join("big");
    let o = simvae(&["gen-data", "--spec", s(&f.config), "--out", s(&out), "--subjects", "200"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("manifest.csv")).unwrap().lines().count();
    assert_eq!(rows, 201);
}

#[test]
fn default_spec_generates_with_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = simvae(&["gen-data", "--out", s(&out), "--seed", "7", "--subjects", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("volumes/sub-0004.vol").is_file());
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[corpus]\nsubjekts = 3\n").unwrap();
    let o = simvae(&["gen-data", "--spec", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("subjekts"), "{}", stderr(&o));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(code(&simvae(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&simvae(&["sweep", "--grid", "nope"])), 2);
}

#[test]
fn help_lists_config_keys_and_defaults() {
    for sub in ["gen-data", "train", "sweep", "analyze"] {
        let o = simvae(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8(o.stdout).unwrap();
        for key in ["learning_rate", "latent_dim", "subjects", "beta_values", "resamples", "gamma", "root"] {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
    }
}

#[test]
fn train_resume_and_analyze() {
    let f = fixture();
    let run = f.root.join("run");
    let o = train(&f, &run, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("val_mse") && summary.contains("val_r") && summary.contains("val_dispersion"));
    assert!(run.join("checkpoint.svae").is_file());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);

    // same seed, same bytes
    let twin = f.root.join("twin");
    assert_eq!(code(&train(&f, &twin, &[])), 0);
    assert_eq!(
        fs::read(run.join("checkpoint.svae")).unwrap(),
        fs::read(twin.join("checkpoint.svae")).unwrap()
    );

    // a 1-epoch run resumed to 2 epochs matches the straight run
    let short_cfg = f.root.join("short.toml");
    fs::write(&short_cfg, SMALL.replace("epochs = 2", "epochs = 1")).unwrap();
    let resumed = f.root.join("resumed");
    let args = |cfg: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            s(cfg).into(),
            "--data".into(),
            s(&f.data).into(),
            "--out".into(),
            s(&resumed).into(),
            "--seed".into(),
            "3".into(),
            "--resume".into(),
        ]
    };
    let a: Vec<String> = args(&short_cfg);
    assert_eq!(code(&simvae(&a.iter().map(String::as_str).collect::<Vec<_>>())), 0);
    let b: Vec<String> = args(&f.config);
    assert_eq!(code(&simvae(&b.iter().map(String::as_str).collect::<Vec<_>>())), 0);
    assert_eq!(
        fs::read(run.join("checkpoint.svae")).unwrap(),
        fs::read(resumed.join("checkpoint.svae")).unwrap()
    );
    assert_eq!(
        fs::read(run.join("metrics.csv")).unwrap(),
        fs::read(resumed.join("metrics.csv")).unwrap()
    );

    let ckpt = run.join("checkpoint.svae");
    let full = f.root.join("analysis");
    let o = simvae(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&full), "--seed", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in [
        "correlations.csv",
        "classification.csv",
        "roi_summary.csv",
        "glm_slope.vol",
        "glm_slope.hdr",
        "glm_t.vol",
        "traversal_centroids.csv",
        "traversal_z0_axial.pgm",
        "traversal_z7_sagittal.pgm",
        "MANIFEST.txt",
    ] {
        assert!(full.join(name).is_file(), "missing {name}");
    }
    let rois = fs::read_to_string(full.join("roi_summary.csv")).unwrap();
    assert!(rois.contains("posterior_left") && rois.contains("sensorimotor"), "{rois}");
    let classes = fs::read_to_string(full.join("classification.csv")).unwrap();
    assert!(classes.contains("covariate") && classes.contains("supervised") && classes.contains("latent-7"));

    let again = f.root.join("analysis2");
    let o = simvae(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&again), "--seed", "5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(full.join("MANIFEST.txt")).unwrap(),
        fs::read(again.join("MANIFEST.txt")).unwrap()
    );

    let glm_only = f.root.join("glm");
    let o = simvae(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&glm_only),
        "--tasks",
        "glm",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&glm_only)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "MANIFEST.txt",
            "config.toml",
            "glm_intercept.hdr",
            "glm_intercept.vol",
            "glm_levels.csv",
            "glm_slope.hdr",
            "glm_slope.vol",
            "glm_t.hdr",
            "glm_t.vol",
            "roi_summary.csv"
        ]
    );

    let o = simvae(&[
        "analyze",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("m")),
        "--masks",
        "hippo=/no/such/mask.vol",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hippo"));

    // a corpus of another shape is incompatible with the checkpoint
    let other_cfg = f.root.join("other.toml");
    fs::write(&other_cfg, "[corpus]\nsubjects = 6\nshape = [12, 12, 12]\n").unwrap();
    let other = f.root.join("other");
    assert_eq!(code(&simvae(&["gen-data", "--spec", s(&other_cfg), "--out", s(&other)])), 0);
    let o = simvae(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&other), "--out", s(&f.root.join("x"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_results() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    assert_eq!(code(&train(&f, &a, &["--threads", "1"])), 0);
    assert_eq!(code(&train(&f, &b, &["--threads", "3"])), 0);
    assert_eq!(
        fs::read(a.join("checkpoint.svae")).unwrap(),
        fs::read(b.join("checkpoint.svae")).unwrap()
    );
}

#[test]
fn runtime_failure_exits_one() {
    let f = fixture();
    let vol = f.data.join("volumes/sub-0003.vol");
    let bytes = fs::read(&vol).unwrap();
    fs::write(&vol, &bytes[..bytes.len() - 8]).unwrap();
    let o = train(&f, &f.root.join("r"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sub-0003"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let f = fixture();
    let run = f.root.join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("checkpoint.svae"), b"not a checkpoint").unwrap();
    let o = train(&f, &run, &["--resume"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn sweep_smoke_and_dim_beta_rejects_alpha() {
    let f = fixture();
    let o = simvae(&["sweep", "--grid", "dim-beta", "--config", s(&f.config), "--data", s(&f.data)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("alpha"));

    let cfg = f.root.join("sweep.toml");
    fs::write(&cfg, SMALL.replace("alpha = 1.0", "alpha = 0.0")).unwrap();
    let out = f.root.join("sw");
    let o = simvae(&["sweep", "--grid", "dim-beta", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("dim_beta.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(csv.lines().next().unwrap().contains("regime"));
    assert!(out.join("dim_beta.pgm").is_file());
}

#[test]
fn output_root_from_environment() {
    let f = fixture();
    let root = f.root.join("runs");
    let o = Command::new(env!("CARGO_BIN_EXE_simvae"))
        .args(["gen-data", "--spec", s(&f.config), "--subjects", "4"])
        .env("SIMVAE_OUT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    let d = dirs[0].as_ref().unwrap().path();
    assert!(d.file_name().unwrap().to_string_lossy().starts_with("gen-data-"));
    assert!(d.join("manifest.csv").is_file());
}
