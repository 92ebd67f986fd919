//! The single TOML run configuration, one section per module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::BootstrapConfig;
use crate::data::{CorpusSpec, SplitProportions};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed::derive_seed;
use crate::sweep::SweepSpec;
use crate::training::HyperParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Contrast exponent of the intensity normalization; 0 disables it.
    pub gamma: f64,
    pub split: SplitProportions,
    pub split_seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            gamma: 1.0,
            split: SplitProportions::default(),
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    /// Number of z0 levels for the average reconstructions.
    pub levels: usize,
    /// Decoded samples per level.
    pub samples: usize,
    pub traversal_steps: usize,
    pub seed: u64,
    pub bootstrap: BootstrapConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            levels: 11,
            samples: 32,
            traversal_steps: 7,
            seed: 0,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// Root under which run directories are created when `--out` is absent.
    pub root: PathBuf,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions { root: "runs".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces every section's seed with one derived from it.
    pub seed: Option<u64>,
    pub corpus: CorpusSpec,
    pub data: DataOptions,
    pub model: ModelConfig,
    pub train: HyperParams,
    pub sweep: SweepSpec,
    pub analysis: AnalysisOptions,
    pub output: OutputOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the global seed, if any, to every section.
    pub fn resolve_seeds(&mut self) {
        if let Some(s) = self.seed {
            self.corpus.seed = derive_seed(s, &[1]);
            self.data.split_seed = derive_seed(s, &[2]);
            self.model.seed = derive_seed(s, &[3]);
            self.train.seed = derive_seed(s, &[4]);
            self.sweep.seed = derive_seed(s, &[5]);
            self.analysis.seed = derive_seed(s, &[6]);
            self.analysis.bootstrap.seed = derive_seed(s, &[7]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.plan()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if !(self.data.gamma >= 0.0) || !self.data.gamma.is_finite() {
            return Err(Error::Config(format!("data.gamma must be >= 0, got {}", self.data.gamma)));
        }
        let a = &self.analysis;
        if a.levels < 3 || a.samples == 0 || a.traversal_steps < 2 || a.bootstrap.resamples == 0 {
            return Err(Error::Config(
                "analysis needs levels >= 3, samples >= 1, traversal_steps >= 2, resamples >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The default configuration as TOML, with every key present.
pub fn default_config_toml() -> String {
    RunConfig::default().to_toml()
}
