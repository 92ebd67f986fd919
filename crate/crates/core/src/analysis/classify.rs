use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Diagnosis;
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

/// Binary logistic model. Features are standardized with the training mean
/// and standard deviation before the linear predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(&self.weights)
                .enumerate()
                .map(|(j, (v, w))| w * (v - self.mean[j]) / self.scale[j])
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Standardizes columns; zero-variance columns keep scale 1.
pub fn standardize(features: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let f = features[0].len();
    let mean: Vec<f64> = (0..f).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..f)
        .map(|j| {
            let s = (features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let z = features
        .iter()
        .map(|r| (0..f).map(|j| (r[j] - mean[j]) / scale[j]).collect())
        .collect();
    (z, mean, scale)
}

/// `mean(log(1 + e^s) - y s) + lambda/2 |w|^2` over standardized features;
/// the intercept is not penalized.
pub fn logistic_objective(z: &[Vec<f64>], labels: &[bool], w: &[f64], b: f64, lambda: f64) -> f64 {
    let n = z.len() as f64;
    let data: f64 = z
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let s = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
            softplus(s) - if y { s } else { 0.0 }
        })
        .sum::<f64>()
        / n;
    data + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
}

/// Newton / iteratively reweighted least squares with step halving.
pub fn logistic_fit(features: &[Vec<f64>], labels: &[bool], lambda: f64) -> Result<LogisticModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Shape(format!(
            "logistic_fit: {} rows, {} labels",
            features.len(),
            labels.len()
        )));
    }
    let f = features[0].len();
    if f == 0 || features.iter().any(|r| r.len() != f) {
        return Err(Error::Shape("logistic_fit: feature rows must share a width >= 1".into()));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::InvalidArgument("logistic_fit needs both classes".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    let (z, mean, scale) = standardize(features);
    let n = z.len() as f64;
    let p = f + 1;
    // theta = [b, w...]
    let mut theta = vec![0.0; p];
    let mut iterations = 0;
    let mut gnorm = f64::INFINITY;
    let mut obj = logistic_objective(&z, labels, &theta[1..], theta[0], lambda);
    for _ in 0..500 {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for (x, &y) in z.iter().zip(labels) {
            let s = theta[0] + x.iter().zip(&theta[1..]).map(|(a, c)| a * c).sum::<f64>();
            let mu = sigmoid(s);
            let r = mu - if y { 1.0 } else { 0.0 };
            let wgt = mu * (1.0 - mu);
            let row: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
            for a in 0..p {
                grad[a] += r * row[a] / n;
                for c in 0..p {
                    hess[(a, c)] += wgt * row[a] * row[c] / n;
                }
            }
        }
        for j in 1..p {
            grad[j] += lambda * theta[j];
            hess[(j, j)] += lambda;
        }
        gnorm = grad.norm();
        if gnorm <= GRADIENT_TOLERANCE {
            break;
        }
        iterations += 1;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = (0..p).map(|a| theta[a] - t * step[a]).collect();
            let c_obj = logistic_objective(&z, labels, &cand[1..], cand[0], lambda);
            if c_obj <= obj {
                theta = cand;
                obj = c_obj;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(LogisticModel {
        weights: theta[1..].to_vec(),
        intercept: theta[0],
        mean,
        scale,
        iterations,
        gradient_norm: gnorm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

pub fn binary_metrics(predicted: &[bool], actual: &[bool]) -> BinaryMetrics {
    let (mut tp, mut tn, mut fp, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    let sensitivity = ratio(tp, fneg);
    let specificity = ratio(tn, fp);
    BinaryMetrics {
        accuracy: (tp + tn) / predicted.len() as f64,
        sensitivity,
        specificity,
        balanced_accuracy: 0.5 * (sensitivity + specificity),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSet {
    /// The supervised latent indices.
    Supervised,
    /// Every latent index that is not supervised.
    Remaining,
    /// The external covariate itself.
    Covariate,
    Latent(usize),
}

impl InputSet {
    pub fn describe(&self) -> String {
        match self {
            InputSet::Supervised => "supervised".into(),
            InputSet::Remaining => "remaining".into(),
            InputSet::Covariate => "covariate".into(),
            InputSet::Latent(k) => format!("latent-{k}"),
        }
    }

    /// Feature row for one subject.
    pub fn features(&self, code: &[f64], covariate: f64, supervised: &[usize]) -> Result<Vec<f64>> {
        Ok(match self {
            InputSet::Supervised => supervised.iter().map(|&k| code[k]).collect(),
            InputSet::Remaining => (0..code.len())
                .filter(|k| !supervised.contains(k))
                .map(|k| code[k])
                .collect(),
            InputSet::Covariate => vec![covariate],
            InputSet::Latent(k) => {
                if *k >= code.len() {
                    return Err(Error::InvalidArgument(format!(
                        "latent {k} out of range for width {}",
                        code.len()
                    )));
                }
                vec![code[*k]]
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Redraws allowed per resample when a draw misses a class.
    pub max_retries: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 10,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            max_retries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub input_set: String,
    pub resamples: usize,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub balanced_accuracy: MeanStd,
}

impl ClassificationReport {
    pub const CSV_HEADER: &'static str = "input_set,resamples,accuracy_mean,accuracy_std,sensitivity_mean,sensitivity_std,specificity_mean,specificity_std,balanced_accuracy_mean,balanced_accuracy_std";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.input_set,
            self.resamples,
            self.accuracy.mean,
            self.accuracy.std,
            self.sensitivity.mean,
            self.sensitivity.std,
            self.specificity.mean,
            self.specificity.std,
            self.balanced_accuracy.mean,
            self.balanced_accuracy.std
        )
    }
}

/// Per-subject inputs shared by every input set.
pub struct ClassificationData<'a> {
    /// Latent means, one row per subject.
    pub codes: &'a [Vec<f64>],
    pub covariate: &'a [f64],
    pub diagnosis: &'a [Diagnosis],
    pub supervised: &'a [usize],
}

/// AD vs HC (MCI excluded, AD positive). Each resample draws the training
/// subjects with replacement from `train`; `test` is fixed.
pub fn bootstrap_classify(
    data: &ClassificationData,
    input: &InputSet,
    train: &[usize],
    test: &[usize],
    cfg: &BootstrapConfig,
) -> Result<ClassificationReport> {
    if cfg.resamples == 0 {
        return Err(Error::InvalidArgument("resamples must be at least 1".into()));
    }
    let keep = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .copied()
            .filter(|&i| matches!(data.diagnosis[i], Diagnosis::AD | Diagnosis::HC))
            .collect()
    };
    let (train, test) = (keep(train), keep(test));
    let row = |i: usize| input.features(&data.codes[i], data.covariate[i], data.supervised);
    let label = |i: usize| data.diagnosis[i] == Diagnosis::AD;
    let test_x = test.iter().map(|&i| row(i)).collect::<Result<Vec<_>>>()?;
    let test_y: Vec<bool> = test.iter().map(|&i| label(i)).collect();
    if !test_y.iter().any(|&y| y) || test_y.iter().all(|&y| y) {
        return Err(Error::InvalidArgument("test split needs both AD and HC subjects".into()));
    }
    if test_x.first().is_some_and(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("input set {} has no features", input.describe())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.resamples);
    for b in 0..cfg.resamples {
        let mut draw = None;
        for _ in 0..=cfg.max_retries {
            let idx: Vec<usize> = (0..train.len()).map(|_| train[rng.random_range(0..train.len())]).collect();
            let ys: Vec<bool> = idx.iter().map(|&i| label(i)).collect();
            if ys.iter().any(|&y| y) && !ys.iter().all(|&y| y) {
                draw = Some((idx, ys));
                break;
            }
        }
        let Some((idx, ys)) = draw else {
            return Err(Error::InvalidArgument(format!(
                "resample {b}: no draw with both classes after {} retries",
                cfg.max_retries
            )));
        };
        let xs = idx.iter().map(|&i| row(i)).collect::<Result<Vec<_>>>()?;
        let model = logistic_fit(&xs, &ys, cfg.lambda)?;
        let pred: Vec<bool> = test_x.iter().map(|x| model.predict(x)).collect();
        metrics.push(binary_metrics(&pred, &test_y));
    }
    let col = |f: fn(&BinaryMetrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
    Ok(ClassificationReport {
        input_set: input.describe(),
        resamples: cfg.resamples,
        accuracy: col(|m| m.accuracy),
        sensitivity: col(|m| m.sensitivity),
        specificity: col(|m| m.specificity),
        balanced_accuracy: col(|m| m.balanced_accuracy),
    })
}
