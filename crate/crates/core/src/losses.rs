//! Training objective: reconstruction + β·KL + α·similarity.
//!
//! The KL term is the standard non-negative Gaussian divergence, so the
//! composite is `mse + beta * kl + alpha * similarity` with every weight
//! non-negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Variance guard for Pearson denominators.
pub const PEARSON_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub similarity: f64,
    pub total: f64,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Either series had (near) zero variance; `r` is reported as 0.
    pub degenerate: bool,
}

/// Pearson correlation coefficient.
pub fn pearson(z: &[f64], y: &[f64]) -> Result<Correlation> {
    if z.len() != y.len() {
        return Err(Error::Shape(format!("pearson: lengths {} and {} differ", z.len(), y.len())));
    }
    if z.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 3 samples, got {}",
            z.len()
        )));
    }
    let n = z.len() as f64;
    let zbar = z.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let (mut szz, mut syy, mut szy) = (0.0, 0.0, 0.0);
    for (a, b) in z.iter().zip(y) {
        let (dz, dy) = (a - zbar, b - ybar);
        szz += dz * dz;
        syy += dy * dy;
        szy += dz * dy;
    }
    if szz < PEARSON_EPSILON || syy < PEARSON_EPSILON {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    let r = (szy / (szz.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, degenerate: false })
}

/// A similarity measure `D(z_(k), y)` between supervised latents and an
/// external variable. Lower is more similar.
pub trait SimilarityMetric: Send + Sync {
    fn name(&self) -> &'static str;

    /// Differentiable loss for `z: [N, k]`.
    fn loss(&self, g: &mut Graph, z: Var, y: &[f64]) -> Result<Var>;
}

/// `-r` averaged over supervised columns.
#[derive(Clone, Copy, Debug)]
pub struct PearsonSimilarity {
    pub epsilon: f64,
}

impl Default for PearsonSimilarity {
    fn default() -> Self {
        PearsonSimilarity {
            epsilon: PEARSON_EPSILON,
        }
    }
}

impl SimilarityMetric for PearsonSimilarity {
    fn name(&self) -> &'static str {
        "pearson"
    }

    fn loss(&self, g: &mut Graph, z: Var, y: &[f64]) -> Result<Var> {
        g.neg_pearson(z, y, self.epsilon)
    }
}

/// Names accepted by [`similarity_metric`].
pub const REGISTERED_METRICS: &[&str] = &["pearson"];

pub fn similarity_metric(name: &str) -> Result<Box<dyn SimilarityMetric>> {
    match name {
        "pearson" => Ok(Box::new(PearsonSimilarity::default())),
        other => Err(Error::Config(format!(
            "unknown similarity metric `{other}` (registered: {})",
            REGISTERED_METRICS.join(", ")
        ))),
    }
}

/// Batch-mean over subjects of the voxel-summed squared error.
pub fn mse_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    g.mse(x, x_hat)
}

/// Batch-mean of `0.5 * sum_i(mu_i^2 + sigma_i^2 - log sigma_i^2 - 1)`.
pub fn kl_gaussian(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    g.kl_gaussian(mu, logvar)
}

pub fn similarity_loss(g: &mut Graph, z_supervised: Var, y: &[f64], metric: &dyn SimilarityMetric) -> Result<Var> {
    let n = g.value(z_supervised).shape()[0];
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "similarity needs at least 3 subjects per batch, got {n}"
        )));
    }
    metric.loss(g, z_supervised, y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
}

/// Inputs to [`total_loss`], all nodes of the same graph.
pub struct LossInputs<'a> {
    pub x: Var,
    pub x_hat: Var,
    pub mu: Var,
    pub logvar: Var,
    /// Supervised latent columns `[N, k]`.
    pub z_supervised: Var,
    pub y: &'a [f64],
}

/// Builds the composite objective and reports each term.
///
/// With `alpha == 0` the similarity is still reported when the batch allows
/// it (N >= 3) but contributes nothing to the graph.
pub fn total_loss(
    g: &mut Graph,
    inputs: &LossInputs<'_>,
    weights: LossWeights,
    metric: &dyn SimilarityMetric,
) -> Result<(Var, LossBreakdown)> {
    if weights.beta < 0.0 || weights.alpha < 0.0 || !weights.beta.is_finite() || !weights.alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be finite and non-negative, got beta={} alpha={}",
            weights.beta, weights.alpha
        )));
    }
    let mse = mse_loss(g, inputs.x, inputs.x_hat)?;
    let kl = kl_gaussian(g, inputs.mu, inputs.logvar)?;
    let n = g.value(inputs.z_supervised).shape()[0];
    let sim = if weights.alpha > 0.0 || n >= 3 {
        Some(similarity_loss(g, inputs.z_supervised, inputs.y, metric)?)
    } else {
        None
    };
    let mut total = mse;
    if weights.beta > 0.0 {
        let wkl = g.scale(kl, weights.beta);
        total = g.add(total, wkl)?;
    }
    if let (Some(s), true) = (sim, weights.alpha > 0.0) {
        let ws = g.scale(s, weights.alpha);
        total = g.add(total, ws)?;
    }
    let breakdown = LossBreakdown {
        mse: g.value(mse).item(),
        kl: g.value(kl).item(),
        similarity: sim.map(|s| g.value(s).item()).unwrap_or(0.0),
        total: g.value(total).item(),
        beta: weights.beta,
        alpha: weights.alpha,
    };
    Ok((total, breakdown))
}

/// Value-only composite, for evaluation without gradients.
pub fn evaluate_loss(
    x: &Tensor,
    x_hat: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    z_supervised: &Tensor,
    y: &[f64],
    weights: LossWeights,
    metric: &dyn SimilarityMetric,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let inputs = LossInputs {
        x: g.constant(x.clone()),
        x_hat: g.constant(x_hat.clone()),
        mu: g.constant(mu.clone()),
        logvar: g.constant(logvar.clone()),
        z_supervised: g.constant(z_supervised.clone()),
        y,
    };
    Ok(total_loss(&mut g, &inputs, weights, metric)?.1)
}
