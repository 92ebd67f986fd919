//! Post-training analyses on a frozen model.

pub mod classify;
pub mod correlate;
pub mod glm;
pub mod traversal;

pub use classify::{
    binary_metrics, bootstrap_classify, logistic_fit, logistic_objective, standardize, BinaryMetrics,
    BootstrapConfig, ClassificationData, ClassificationReport, InputSet, LogisticModel, MeanStd,
};
pub use correlate::{correlate_columns, correlate_latent, CorrelationResult};
pub use glm::{glm_voxelwise, roi_summary, GlmMap, RoiSummary};
pub use traversal::{
    average_reconstruction, average_reconstruction_from_tails, is_monotone, latent_traversal, linspace, mid_slice,
    Plane, TraversalSheet,
};

use crate::data::Volume;
use crate::error::Result;
use crate::model::VaeModel;

/// Average reconstructions at `levels` evenly spaced `z0` values over
/// `range`, and the voxelwise GLM of their intensity on `z0`.
pub fn severity_glm(
    model: &VaeModel,
    range: (f64, f64),
    levels: usize,
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Volume>, GlmMap)> {
    let z0 = linspace(range.0, range.1, levels);
    let volumes = z0
        .iter()
        .map(|&z| average_reconstruction(model, z, samples, seed))
        .collect::<Result<Vec<_>>>()?;
    let map = glm_voxelwise(&volumes, &z0)?;
    Ok((z0, volumes, map))
}
