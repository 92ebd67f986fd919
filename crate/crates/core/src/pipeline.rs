//! End-to-end stages shared by the command-line tool and the tests. Every
//! stage writes into one output directory and finishes by listing the files
//! it produced, with their sha256, in `MANIFEST.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::analysis::{
    bootstrap_classify, correlate_columns, latent_traversal, roi_summary, severity_glm, ClassificationData,
    ClassificationReport, InputSet, Plane,
};
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{
    generate_corpus, load_volume, split_dataset, CorpusSpec, Dataset, Diagnosis, Split, SubjectRecord,
    CORPUS_SPEC_FILE, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sweep::{sweep_beta_alpha, sweep_dim_beta, GridKind, PhaseGrid, SweepBase};
use crate::training::{fit, Trainer, METRICS_HEADER};

pub const RUN_MANIFEST: &str = "MANIFEST.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.svae";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SPLIT_FILE: &str = "split.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Deterministic run directory name under `root` for a resolved config.
pub fn run_dir(root: &Path, command: &str, config: &RunConfig) -> PathBuf {
    let digest = Sha256::digest(config.to_toml().as_bytes());
    let stamp: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
    root.join(format!("{command}-{stamp}"))
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.is_dir() {
            collect_files(&path, base, out)?;
        } else {
            out.push(path.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

/// Lists every file under `dir` (except the manifest itself) as
/// `sha256  relative/path`, sorted by path.
pub fn write_run_manifest(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.retain(|p| p != Path::new(RUN_MANIFEST) && p.extension().is_none_or(|e| e != "tmp"));
    files.sort();
    let mut text = String::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        writeln!(text, "{hex}  {}", rel.to_string_lossy().replace('\\', "/")).unwrap();
    }
    write(&dir.join(RUN_MANIFEST), text)
}

/// Accepts either a corpus directory or a manifest path.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

/// Score histogram and diagnosis counts, for the `gen-data` summary.
pub fn corpus_summary(records: &[SubjectRecord], score_max: f64, bins: usize) -> String {
    let mut counts = vec![0usize; bins];
    for r in records {
        let b = ((r.score / score_max) * bins as f64).floor() as isize;
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    let mut text = format!("subjects: {}\n", records.len());
    for d in [Diagnosis::HC, Diagnosis::MCI, Diagnosis::AD] {
        let n = records.iter().filter(|r| r.diagnosis == d).count();
        writeln!(text, "  {:<3} {n}", d.as_str()).unwrap();
    }
    text.push_str("score histogram:\n");
    let width = score_max / bins as f64;
    for (i, c) in counts.iter().enumerate() {
        let lo = i as f64 * width;
        writeln!(text, "  [{:>5.1}, {:>5.1}) {:>5} {}", lo, lo + width, c, "#".repeat(*c)).unwrap();
    }
    text
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<Vec<SubjectRecord>> {
    config.corpus.validate()?;
    create_dir(out)?;
    let records = generate_corpus(&config.corpus, out)?;
    write(&out.join(CONFIG_FILE), config.to_toml())?;
    write_run_manifest(out)?;
    Ok(records)
}

/// Loads a corpus and its split, both as configured.
pub fn load_data(config: &RunConfig, data: &Path) -> Result<(Dataset, Split)> {
    let manifest = manifest_path(data);
    if !manifest.is_file() {
        return Err(Error::Config(format!("no manifest at {}", manifest.display())));
    }
    let dataset = Dataset::load(&manifest, config.data.gamma)?;
    let split = split_dataset(dataset.len(), config.data.split, config.data.split_seed)?;
    Ok((dataset, split))
}

pub fn split_csv(data: &Dataset, split: &Split) -> String {
    let mut rows: Vec<(usize, &str)> = Vec::new();
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        rows.extend(idx.iter().map(|&i| (i, name)));
    }
    rows.sort();
    let mut text = String::from("id,set\n");
    for (i, name) in rows {
        writeln!(text, "{},{name}", data.records[i].id).unwrap();
    }
    text
}

/// Reads a split written by [`split_csv`], mapping ids back to positions.
pub fn read_split(path: &Path, data: &Dataset) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let (id, set) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("{}: malformed row `{line}`", path.display())))?;
        let i = data
            .records
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("{}: subject {id} is not in the dataset", path.display())))?;
        match set {
            "train" => split.train.push(i),
            "val" => split.val.push(i),
            "test" => split.test.push(i),
            other => return Err(Error::Config(format!("{}: unknown set `{other}`", path.display()))),
        }
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub val_mse: f64,
    pub val_r: f64,
    pub val_dispersion: f64,
}

/// Trains into `out`. With `resume`, continues from `out/checkpoint.svae`
/// when it exists; the model section must then match the checkpoint.
pub fn train(config: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<TrainSummary> {
    config.validate()?;
    let (dataset, split) = load_data(config, data)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics = out.join(METRICS_FILE);
    let mut trainer = if resume && ckpt.exists() {
        let mut t = load_checkpoint(&ckpt)?;
        if t.model.config() != &config.model {
            return Err(Error::Config(format!(
                "checkpoint model {} does not match config model {}",
                t.model.config().hash_hex(),
                config.model.hash_hex()
            )));
        }
        t.hyper.epochs = config.train.epochs;
        t
    } else {
        Trainer::from_config(config.model.clone(), config.train.clone())?
    };
    // the metrics file always mirrors the history held by the trainer
    let mut text = format!("{METRICS_HEADER}\n");
    for rec in &trainer.history.epochs {
        text.push_str(&rec.csv_row());
        text.push('\n');
    }
    write(&metrics, text)?;
    write(&out.join(CONFIG_FILE), config.to_toml())?;
    write(&out.join(SPLIT_FILE), split_csv(&dataset, &split))?;
    fit(&mut trainer, &dataset, &split, Some(&metrics), Some(&ckpt))?;
    if !ckpt.exists() {
        crate::checkpoint::save_checkpoint(&trainer, &ckpt)?;
    }
    write_run_manifest(out)?;
    let last = trainer.history.last();
    Ok(TrainSummary {
        epochs: trainer.epochs_done(),
        val_mse: last.map_or(f64::NAN, |e| e.val.mse),
        val_r: last.map_or(f64::NAN, |e| e.val_r),
        val_dispersion: last.map_or(f64::NAN, |e| e.val_dispersion),
    })
}

/// Runs one phase grid. Fails only when every cell failed.
pub fn sweep(config: &RunConfig, kind: GridKind, data: Option<&Path>, out: &Path) -> Result<PhaseGrid> {
    config.validate()?;
    let (dataset, split) = match data {
        Some(d) => load_data(config, d)?,
        None => {
            let ds = Dataset::synthesize(&config.corpus, config.data.gamma)?;
            let split = split_dataset(ds.len(), config.data.split, config.data.split_seed)?;
            (ds, split)
        }
    };
    let mut hyper = config.train.clone();
    if kind == GridKind::DimBeta && hyper.alpha != 0.0 {
        return Err(Error::Config(format!(
            "the dim-beta grid fixes alpha = 0; set train.alpha = 0 (got {})",
            hyper.alpha
        )));
    }
    hyper.seed = config.train.seed;
    let base = SweepBase {
        model: config.model.clone(),
        hyper,
        data: &dataset,
        split: &split,
    };
    let grid = match kind {
        GridKind::DimBeta => sweep_dim_beta(&config.sweep, &base)?,
        GridKind::BetaAlpha => sweep_beta_alpha(&config.sweep, &base)?,
    };
    if grid.cells.iter().all(|c| c.outcome.is_err()) {
        return Err(Error::InvalidArgument("every sweep cell failed".into()));
    }
    create_dir(out)?;
    let stem = match kind {
        GridKind::DimBeta => "dim_beta",
        GridKind::BetaAlpha => "beta_alpha",
    };
    grid.write(out, stem)?;
    write(&out.join(CONFIG_FILE), config.to_toml())?;
    write_run_manifest(out)?;
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Glm,
    Classify,
    Traverse,
    Correlate,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Glm, Task::Classify, Task::Traverse, Task::Correlate];

    pub fn name(self) -> &'static str {
        match self {
            Task::Glm => "glm",
            Task::Classify => "classify",
            Task::Traverse => "traverse",
            Task::Correlate => "correlate",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected glm, classify, traverse, correlate)")))
    }
}

/// A named binary mask for ROI summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub name: String,
    pub path: PathBuf,
}

impl std::str::FromStr for MaskSpec {
    type Err = Error;

    /// `name=path`, or a bare path named after its file stem.
    fn from_str(s: &str) -> Result<Self> {
        let (name, path) = match s.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(s);
                let stem = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        if name.is_empty() || path.as_os_str().is_empty() {
            return Err(Error::Config(format!("bad mask `{s}`, expected name=path")));
        }
        Ok(MaskSpec { name, path })
    }
}

pub struct AnalyzeRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub tasks: &'a [Task],
    /// Extra masks; the corpus's planted ROIs are added when its spec is
    /// next to the manifest.
    pub masks: &'a [MaskSpec],
}

fn min_max(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)))
}

/// Runs the requested analyses on a trained checkpoint and returns the list
/// of files written.
pub fn analyze(config: &RunConfig, req: &AnalyzeRequest) -> Result<Vec<PathBuf>> {
    config.validate()?;
    for m in req.masks {
        if !m.path.is_file() {
            return Err(Error::Config(format!("mask {} not found at {}", m.name, m.path.display())));
        }
    }
    if !req.checkpoint.is_file() {
        return Err(Error::Config(format!("no checkpoint at {}", req.checkpoint.display())));
    }
    let trainer = load_checkpoint(req.checkpoint)?;
    let model = &trainer.model;
    let (dataset, mut split) = load_data(config, req.data)?;
    if dataset.shape() != model.config().input_shape {
        return Err(Error::Config(format!(
            "checkpoint expects volumes of shape {:?}, data has {:?}",
            model.config().input_shape,
            dataset.shape()
        )));
    }
    let saved_split = req.checkpoint.with_file_name(SPLIT_FILE);
    if saved_split.is_file() {
        split = read_split(&saved_split, &dataset)?;
    }
    if split.test.len() < 3 {
        return Err(Error::InvalidArgument(format!("test split has {} subjects, need 3", split.test.len())));
    }
    create_dir(req.out)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let eval = crate::training::evaluate_model(model, &trainer.hyper, &dataset, &all)?;
    let d = model.latent_dim();
    let codes: Vec<Vec<f64>> = eval.mu.data().chunks(d).map(<[f64]>::to_vec).collect();
    let scores = dataset.scores(&all);
    let k0 = model.config().supervised[0];
    let test_codes: Vec<Vec<f64>> = split.test.iter().map(|&i| codes[i].clone()).collect();
    let test_scores = dataset.scores(&split.test);
    let observed = |k: usize| min_max(test_codes.iter().map(|c| c[k]));
    let opts = &config.analysis;
    let mut written = Vec::new();
    let emit = |written: &mut Vec<PathBuf>, name: &str, contents: Vec<u8>| -> Result<()> {
        let p = req.out.join(name);
        write(&p, contents)?;
        written.push(p);
        Ok(())
    };

    if req.tasks.contains(&Task::Correlate) {
        let results = correlate_columns(&test_codes, &test_scores)?;
        let mut text = String::from("latent,supervised,r,t,p_value,n,degenerate\n");
        for (k, c) in results.iter().enumerate() {
            let sup = model.config().supervised.contains(&k);
            writeln!(text, "{k},{sup},{},{},{},{},{}", c.r, c.t, c.p_value, c.n, c.degenerate).unwrap();
        }
        emit(&mut written, "correlations.csv", text.into_bytes())?;
    }

    if req.tasks.contains(&Task::Glm) {
        let (z0, _, map) = severity_glm(model, observed(k0), opts.levels, opts.samples, opts.seed)?;
        for (name, vol) in [
            ("glm_slope.vol", map.slope_volume()),
            ("glm_intercept.vol", map.intercept_volume()),
            ("glm_t.vol", map.t_volume()),
        ] {
            let p = req.out.join(name);
            crate::data::save_volume(&vol, &p, "voxelwise regression on z0")?;
            written.push(p.clone());
            written.push(crate::data::header_path(&p));
        }
        let mut levels = String::from("level,z0\n");
        for (i, z) in z0.iter().enumerate() {
            writeln!(levels, "{i},{z}").unwrap();
        }
        emit(&mut written, "glm_levels.csv", levels.into_bytes())?;
        let mut masks = Vec::new();
        let spec_path = manifest_path(req.data).with_file_name(CORPUS_SPEC_FILE);
        if spec_path.is_file() {
            let text = fs::read_to_string(&spec_path)
                .map_err(|e| Error::io(format!("reading {}", spec_path.display()), e))?;
            let spec: CorpusSpec =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
            if spec.shape == dataset.shape() {
                for roi in &spec.rois {
                    masks.push((roi.name.clone(), spec.roi_mask(roi)));
                }
            }
        }
        for m in req.masks {
            masks.push((m.name.clone(), load_volume(&m.path)?));
        }
        let mut text = String::from("roi,voxels,mean_slope,fraction_negative,mean_t\n");
        for (name, mask) in &masks {
            let s = roi_summary(&map, mask)?;
            writeln!(text, "{name},{},{},{},{}", s.voxels, s.mean_slope, s.fraction_negative, s.mean_t).unwrap();
        }
        emit(&mut written, "roi_summary.csv", text.into_bytes())?;
    }

    if req.tasks.contains(&Task::Classify) {
        let diagnosis: Vec<Diagnosis> = dataset.records.iter().map(|r| r.diagnosis).collect();
        let cdata = ClassificationData {
            codes: &codes,
            covariate: &scores,
            diagnosis: &diagnosis,
            supervised: &model.config().supervised,
        };
        let mut sets = vec![InputSet::Covariate, InputSet::Supervised];
        if d > model.config().supervised.len() {
            sets.push(InputSet::Remaining);
        }
        sets.extend((0..d).map(InputSet::Latent));
        let mut text = format!("{}\n", ClassificationReport::CSV_HEADER);
        for set in &sets {
            let report = bootstrap_classify(&cdata, set, &split.train, &split.test, &opts.bootstrap)?;
            text.push_str(&report.csv_row());
            text.push('\n');
        }
        emit(&mut written, "classification.csv", text.into_bytes())?;
    }

    if req.tasks.contains(&Task::Traverse) {
        let mut text = String::from("latent,step,value,centroid_z,centroid_y,centroid_x\n");
        for k in 0..d {
            let (lo, hi) = observed(k);
            let range = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
            let sheet = latent_traversal(model, k, range, opts.traversal_steps)?;
            for (s, (v, c)) in sheet.values.iter().zip(sheet.centroids()).enumerate() {
                writeln!(text, "{k},{s},{v},{},{},{}", c[0], c[1], c[2]).unwrap();
            }
            for plane in Plane::ALL {
                emit(&mut written, &format!("traversal_z{k}_{}.pgm", plane.name()), sheet.mosaic(plane).encode_pgm())?;
            }
        }
        emit(&mut written, "traversal_centroids.csv", text.into_bytes())?;
    }

    write(&req.out.join(CONFIG_FILE), config.to_toml())?;
    write_run_manifest(req.out)?;
    Ok(written)
}

/// Seeds a config the way the `--seed` flag does.
pub fn with_global_seed(mut config: RunConfig, seed: Option<u64>) -> RunConfig {
    if seed.is_some() {
        config.seed = seed;
    }
    config.resolve_seeds();
    config
}

/// Per-stage seed derivation used by the acceptance harness for cohorts
/// that must be independent of the training corpus.
pub fn held_out_spec(spec: &CorpusSpec, subjects: usize) -> CorpusSpec {
    CorpusSpec {
        subjects,
        seed: derive_seed(spec.seed, &[0x4845_4c44]),
        ..spec.clone()
    }
}
