//! Phantom corpus generation, volume I/O, normalization and splitting.

pub mod corpus;
pub mod normalize;
pub mod phantom;
pub mod split;
pub mod volume;

pub use corpus::{
    generate_corpus, read_manifest, sample_subjects, write_manifest, Dataset, SubjectRecord, CORPUS_SPEC_FILE, MANIFEST_FILE,
};
pub use normalize::{contrast_map, normalize_intensity, percentile};
pub use phantom::{
    apply_affine, default_rois, generate_phantom, severity_phantom, CorpusSpec, Diagnosis, DiagnosisThresholds,
    Effect, FactorRanges, GenerativeFactors, Range, RoiSpec,
};
pub use split::{split_dataset, Split, SplitProportions};
pub use volume::{header_path, load_volume, save_volume, Volume};
