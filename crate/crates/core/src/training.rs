//! Adam optimization of the composite objective with per-epoch validation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{evaluate_loss, pearson, similarity_metric, total_loss, LossBreakdown, LossInputs, LossWeights};
use crate::model::{ModelConfig, VaeModel};
use crate::seed::derive_seed;
use crate::sweep::dispersion;
use crate::tensor::{BatchNormMode, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub beta: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub similarity: String,
    pub adam: AdamConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            beta: 1e-4,
            alpha: 1e-4,
            learning_rate: 2e-5,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            similarity: "pearson".into(),
            adam: AdamConfig::default(),
        }
    }
}

impl HyperParams {
    /// Smallest batch that batch-norm and the similarity term accept.
    pub fn min_batch(&self) -> usize {
        if self.alpha > 0.0 {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() || !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("beta and alpha must be finite and >= 0 (beta={}, alpha={})", self.beta, self.alpha));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < self.min_batch() {
            return bad(format!(
                "batch_size {} is below the minimum {} (batch-norm needs 2, similarity needs 3)",
                self.batch_size,
                self.min_batch()
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        similarity_metric(&self.similarity)?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            alpha: self.alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Returns `false` (and changes nothing) if
/// any gradient entry is non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!("adam: tensor {i} has {} entries, gradient {}", p.len(), g.len())));
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// `pearson(mu_k, y)` on the validation set for the first supervised index.
    pub val_r: f64,
    pub val_dispersion: f64,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Mean of `metric` over the final `ceil(fraction * epochs)` records.
    pub fn tail_mean(&self, fraction: f64, metric: impl Fn(&EpochRecord) -> f64) -> Option<f64> {
        if self.epochs.is_empty() {
            return None;
        }
        let k = ((self.epochs.len() as f64 * fraction).ceil() as usize).clamp(1, self.epochs.len());
        let tail = &self.epochs[self.epochs.len() - k..];
        Some(tail.iter().map(metric).sum::<f64>() / k as f64)
    }
}

pub const METRICS_HEADER: &str = "epoch,train_mse,train_kl,train_similarity,train_total,val_mse,val_kl,val_similarity,val_total,val_r,val_dispersion,skipped_steps";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let (t, v) = (&self.train, &self.val);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            t.mse,
            t.kl,
            t.similarity,
            t.total,
            v.mse,
            v.kl,
            v.similarity,
            v.total,
            self.val_r,
            self.val_dispersion,
            self.skipped_steps
        )
    }
}

/// Appends one row, writing the header when the file is new.
pub fn append_metrics(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&record.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Splits a shuffled index list into batches, folding a too-short tail into
/// the previous batch.
pub fn make_batches(indices: &[usize], batch_size: usize, min_batch: usize) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if indices.len() < min_batch {
        return Err(Error::InvalidArgument(format!(
            "training set has {} subjects, fewer than the minimum batch of {min_batch}",
            indices.len()
        )));
    }
    let mut batches: Vec<Vec<usize>> = indices.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().unwrap().len() < min_batch {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok(batches)
}

/// Model plus optimizer state: everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: VaeModel,
    pub hyper: HyperParams,
    pub adam: AdamState,
    pub history: TrainingHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub r: f64,
    pub dispersion: f64,
}

impl Trainer {
    pub fn new(model: VaeModel, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            hyper,
            adam,
            history: TrainingHistory::default(),
        })
    }

    pub fn from_config(config: ModelConfig, hyper: HyperParams) -> Result<Self> {
        Trainer::new(VaeModel::new(config)?, hyper)
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// One pass over `train` with one optimizer step per batch. Batch order
    /// and reparameterization noise depend only on `(seed, epoch)`.
    pub fn train_epoch(&mut self, data: &Dataset, train: &[usize]) -> Result<(LossBreakdown, usize)> {
        let epoch = self.epochs_done();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.hyper.seed, &[epoch as u64]));
        let mut order = train.to_vec();
        order.shuffle(&mut rng);
        let batches = make_batches(&order, self.hyper.batch_size, self.hyper.min_batch())?;
        let metric = similarity_metric(&self.hyper.similarity)?;
        let d = self.model.latent_dim();
        let supervised = self.model.config().supervised.clone();
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        let mut skipped = 0;
        for (b, idx) in batches.iter().enumerate() {
            let n = idx.len();
            let noise = Tensor::from_fn(&[n, d], |_| rng.sample::<f64, _>(StandardNormal));
            let y = data.scores(idx);
            let mut g = Graph::new();
            let params = self.model.bind(&mut g);
            let x = g.constant(data.batch(idx));
            let eps = g.constant(noise);
            let mut stats = self.model.running_stats().to_vec();
            let fv = self
                .model
                .forward_graph(&mut g, &params, &mut stats, x, Some(eps), BatchNormMode::Train)?;
            let zs = g.columns(fv.z, &supervised)?;
            let inputs = LossInputs {
                x,
                x_hat: fv.recon,
                mu: fv.mu,
                logvar: fv.logvar,
                z_supervised: zs,
                y: &y,
            };
            let (loss, parts) = total_loss(&mut g, &inputs, self.hyper.weights(), metric.as_ref())?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: parts.total,
                });
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .map(|&p| grads.take(p).expect("parameter gradient"))
                .collect();
            self.model.set_running_stats(stats);
            let lr = self.hyper.learning_rate;
            let adam = self.hyper.adam;
            if !adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &adam)? {
                skipped += 1;
                log::warn!("epoch {epoch} batch {b}: non-finite gradient, step skipped");
            }
            let w = n as f64;
            sum.mse += w * parts.mse;
            sum.kl += w * parts.kl;
            sum.similarity += w * parts.similarity;
            sum.total += w * parts.total;
            seen += n;
        }
        let s = seen as f64;
        Ok((
            LossBreakdown {
                mse: sum.mse / s,
                kl: sum.kl / s,
                similarity: sum.similarity / s,
                total: sum.total / s,
                beta: self.hyper.beta,
                alpha: self.hyper.alpha,
            },
            skipped,
        ))
    }

    /// Eval-mode metrics on `idx`, decoding from `mu`.
    pub fn evaluate(&self, data: &Dataset, idx: &[usize]) -> Result<Evaluation> {
        evaluate_model(&self.model, &self.hyper, data, idx)
    }

    /// Trains one epoch, validates, and appends the record.
    pub fn run_epoch(&mut self, data: &Dataset, split: &Split) -> Result<&EpochRecord> {
        let (train, skipped) = self.train_epoch(data, &split.train)?;
        let val_idx = if split.val.is_empty() { &split.train } else { &split.val };
        let eval = self.evaluate(data, val_idx)?;
        self.history.epochs.push(EpochRecord {
            epoch: self.history.len(),
            train,
            val: eval.loss,
            val_r: eval.r,
            val_dispersion: eval.dispersion,
            skipped_steps: skipped,
        });
        Ok(self.history.last().unwrap())
    }
}

/// Eval-mode metrics for any model on `idx`.
pub fn evaluate_model(model: &VaeModel, hyper: &HyperParams, data: &Dataset, idx: &[usize]) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let d = model.latent_dim();
    let voxels: usize = data.shape().iter().product();
    let (mut mu, mut lv, mut rec) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in idx.chunks(hyper.batch_size.max(1)) {
        let (m, l) = model.encode_eval(&data.batch(chunk))?;
        rec.extend_from_slice(model.decode_eval(&m)?.data());
        mu.extend_from_slice(m.data());
        lv.extend_from_slice(l.data());
    }
    let n = idx.len();
    let [a, b, c] = data.shape();
    let mu = Tensor::new(vec![n, d], mu)?;
    let logvar = Tensor::new(vec![n, d], lv)?;
    let recon = Tensor::new(vec![n, 1, a, b, c], rec)?;
    debug_assert_eq!(recon.len(), n * voxels);
    let supervised = &model.config().supervised;
    let k = supervised.len();
    let zs = Tensor::from_fn(&[n, k], |i| mu.data()[(i / k) * d + supervised[i % k]]);
    let y = data.scores(idx);
    let metric = similarity_metric(&hyper.similarity)?;
    let loss = if n >= 3 {
        evaluate_loss(&data.batch(idx), &recon, &mu, &logvar, &zs, &y, hyper.weights(), metric.as_ref())?
    } else {
        let zero_alpha = LossWeights {
            alpha: 0.0,
            ..hyper.weights()
        };
        evaluate_loss(&data.batch(idx), &recon, &mu, &logvar, &zs, &y, zero_alpha, metric.as_ref())?
    };
    let r = if n >= 3 {
        let col: Vec<f64> = (0..n).map(|i| mu.data()[i * d + supervised[0]]).collect();
        pearson(&col, &y)?.r
    } else {
        0.0
    };
    let rows: Vec<Vec<f64>> = mu.data().chunks(d).map(<[f64]>::to_vec).collect();
    let dispersion = dispersion(&rows)?.d_mu;
    Ok(Evaluation {
        loss,
        mu,
        logvar,
        r,
        dispersion,
    })
}

/// Runs `trainer` to its configured epoch count, appending each record to
/// `metrics` and checkpointing atomically after every epoch when a path is
/// given.
pub fn fit(
    trainer: &mut Trainer,
    data: &Dataset,
    split: &Split,
    metrics: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    if data.shape() != trainer.model.config().input_shape {
        return Err(Error::Config(format!(
            "dataset volumes {:?} do not match model input {:?}",
            data.shape(),
            trainer.model.config().input_shape
        )));
    }
    if let Some(dir) = metrics.and_then(Path::parent).filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    while trainer.epochs_done() < trainer.hyper.epochs {
        let rec = trainer.run_epoch(data, split)?.clone();
        log::info!(
            "epoch {} train {:.4} val mse {:.4} r {:.3} D_mu {:.4}",
            rec.epoch,
            rec.train.total,
            rec.val.mse,
            rec.val_r,
            rec.val_dispersion
        );
        if let Some(p) = metrics {
            append_metrics(p, &rec)?;
        }
        if let Some(p) = checkpoint {
            crate::checkpoint::save_checkpoint(trainer, p)?;
        }
    }
    Ok(())
}
