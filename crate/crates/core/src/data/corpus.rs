use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normalize::normalize_intensity;
use super::phantom::{generate_phantom, CorpusSpec, Diagnosis, GenerativeFactors};
use super::volume::{load_volume, save_volume, Volume};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CORPUS_SPEC_FILE: &str = "corpus.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub volume_path: PathBuf,
    pub score: f64,
    pub diagnosis: Diagnosis,
    pub factors: Option<GenerativeFactors>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    volume_path: String,
    score: f64,
    diagnosis: String,
    tz: Option<f64>,
    ty: Option<f64>,
    tx: Option<f64>,
    rz: Option<f64>,
    ry: Option<f64>,
    rx: Option<f64>,
    sz: Option<f64>,
    sy: Option<f64>,
    sx: Option<f64>,
    gain: Option<f64>,
    noise: Option<f64>,
    seed: Option<u64>,
}

impl From<&SubjectRecord> for ManifestRow {
    fn from(r: &SubjectRecord) -> Self {
        let f = r.factors.as_ref();
        ManifestRow {
            id: r.id.clone(),
            volume_path: r.volume_path.to_string_lossy().replace('\\', "/"),
            score: r.score,
            diagnosis: r.diagnosis.as_str().into(),
            tz: f.map(|f| f.translation[0]),
            ty: f.map(|f| f.translation[1]),
            tx: f.map(|f| f.translation[2]),
            rz: f.map(|f| f.rotation[0]),
            ry: f.map(|f| f.rotation[1]),
            rx: f.map(|f| f.rotation[2]),
            sz: f.map(|f| f.scale[0]),
            sy: f.map(|f| f.scale[1]),
            sx: f.map(|f| f.scale[2]),
            gain: f.map(|f| f.gain),
            noise: f.map(|f| f.noise),
            seed: f.map(|f| f.seed),
        }
    }
}

impl TryFrom<ManifestRow> for SubjectRecord {
    type Error = Error;

    fn try_from(row: ManifestRow) -> Result<Self> {
        let parts = [
            row.tz, row.ty, row.tx, row.rz, row.ry, row.rx, row.sz, row.sy, row.sx, row.gain, row.noise,
        ];
        let factors = match (parts.iter().all(Option::is_some), row.seed) {
            (true, Some(seed)) => {
                let p = parts.map(Option::unwrap);
                Some(GenerativeFactors {
                    score: row.score,
                    translation: [p[0], p[1], p[2]],
                    rotation: [p[3], p[4], p[5]],
                    scale: [p[6], p[7], p[8]],
                    gain: p[9],
                    noise: p[10],
                    seed,
                })
            }
            _ => None,
        };
        if !row.score.is_finite() {
            return Err(Error::Config(format!("subject {}: non-finite score", row.id)));
        }
        Ok(SubjectRecord {
            diagnosis: row.diagnosis.parse()?,
            id: row.id,
            volume_path: PathBuf::from(row.volume_path),
            score: row.score,
            factors,
        })
    }
}

pub fn write_manifest(records: &[SubjectRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(format!("creating {}", path.display()), e))?;
    for r in records {
        w.serialize(ManifestRow::from(r))
            .map_err(|e| Error::csv(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
        out.push(SubjectRecord::try_from(row)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: manifest has no subjects", path.display())));
    }
    Ok(out)
}

fn subject_id(i: usize) -> String {
    format!("sub-{i:04}")
}

/// Factors for every subject, each drawn from an independent seed derived
/// from the corpus seed and the subject index.
pub fn sample_subjects(spec: &CorpusSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    if spec.subjects == 0 {
        return Err(Error::Config("corpus needs at least one subject".into()));
    }
    Ok((0..spec.subjects)
        .map(|i| {
            let factors = spec.sample_factors(derive_seed(spec.seed, &[i as u64]));
            let id = subject_id(i);
            SubjectRecord {
                volume_path: PathBuf::from(format!("volumes/{id}.vol")),
                id,
                score: factors.score,
                diagnosis: Diagnosis::from_score(factors.score, &spec.thresholds),
                factors: Some(factors),
            }
        })
        .collect())
}

/// Writes `manifest.csv`, `corpus.toml` and `volumes/*.vol` under `out`.
pub fn generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<Vec<SubjectRecord>> {
    let records = sample_subjects(spec)?;
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(format!("creating {}", vol_dir.display()), e))?;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let f = r.factors.as_ref().expect("synthetic subject");
        let v = generate_phantom(spec, f)?;
        let provenance = format!("simvae phantom {} corpus-seed {}", r.id, spec.seed);
        save_volume(&v, &out.join(&r.volume_path), &provenance)
    })?;
    let spec_text = toml::to_string(spec).map_err(|e| Error::Config(format!("corpus spec serialization: {e}")))?;
    let spec_path = out.join(CORPUS_SPEC_FILE);
    fs::write(&spec_path, spec_text).map_err(|e| Error::io(format!("writing {}", spec_path.display()), e))?;
    write_manifest(&records, &out.join(MANIFEST_FILE))?;
    Ok(records)
}

/// Normalized volumes held in memory with their subject records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    shape: [usize; 3],
    volumes: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn from_parts(records: Vec<SubjectRecord>, volumes: Vec<Volume>) -> Result<Self> {
        if records.is_empty() || records.len() != volumes.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs matching non-empty records ({}) and volumes ({})",
                records.len(),
                volumes.len()
            )));
        }
        let shape = volumes[0].shape();
        if let Some((i, v)) = volumes.iter().enumerate().find(|(_, v)| v.shape() != shape) {
            return Err(Error::Shape(format!(
                "subject {} has shape {:?}, expected {shape:?}",
                records[i].id,
                v.shape()
            )));
        }
        Ok(Dataset {
            records,
            shape,
            volumes: volumes.into_iter().map(Volume::into_data).collect(),
        })
    }

    /// Loads a manifest (synthetic or external) and normalizes each volume.
    pub fn load(manifest: &Path, gamma: f64) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let volumes = records
            .par_iter()
            .map(|r| {
                let p = if r.volume_path.is_absolute() {
                    r.volume_path.clone()
                } else {
                    base.join(&r.volume_path)
                };
                normalize_intensity(&load_volume(&p)?, gamma)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_parts(records, volumes)
    }

    /// Same contents as generating the corpus to disk and loading it back.
    pub fn synthesize(spec: &CorpusSpec, gamma: f64) -> Result<Self> {
        let records = sample_subjects(spec)?;
        let volumes = records
            .par_iter()
            .map(|r| normalize_intensity(&generate_phantom(spec, r.factors.as_ref().unwrap())?, gamma))
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_parts(records, volumes)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn volume(&self, i: usize) -> Volume {
        Volume::new(self.shape, self.volumes[i].clone()).expect("validated shape")
    }

    pub fn voxels(&self, i: usize) -> &[f64] {
        &self.volumes[i]
    }

    pub fn scores(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.records[i].score).collect()
    }

    /// `[N, 1, D, H, W]` batch of the given subjects.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let n: usize = self.shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.volumes[i]);
        }
        let [d, h, w] = self.shape;
        Tensor::new(vec![idx.len(), 1, d, h, w], data).expect("batch shape")
    }
}
