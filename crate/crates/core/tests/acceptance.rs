//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run alone with `cargo test -p simvae --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use simvae::analysis::{
    bootstrap_classify, glm_voxelwise, is_monotone, latent_traversal, roi_summary, severity_glm, BootstrapConfig,
    ClassificationData, ClassificationReport, InputSet,
};
use simvae::config::RunConfig;
use simvae::data::{split_dataset, CorpusSpec, Dataset, Diagnosis, Effect, Split, SplitProportions, Volume};
use simvae::losses::{kl_gaussian, pearson, total_loss, LossInputs, LossWeights, PearsonSimilarity};
use simvae::model::{ModelConfig, VaeModel};
use simvae::pipeline::{self, AnalyzeRequest, Task};
use simvae::sweep::{stable_mse, sweep_beta_alpha, sweep_dim_beta, PhaseGrid, Regime, SweepBase, SweepSpec};
use simvae::tensor::{
    grad_check, BatchNormMode, ConvGeometry, GradCheckConfig, GradCheckReport, Graph, RunningStats, Tensor, Var,
};
use simvae::training::{evaluate_model, fit, HyperParams, Trainer};

// Stable-regime recipe for the 32^3 desk model.
const STABLE_ALPHA: f64 = 100.0;
const STABLE_BETA: f64 = 10.0;
const LEARNING_RATE: f64 = 1e-3;
const EPOCHS: usize = 150;
const SEEDS: [u64; 3] = [1, 2, 3];
const HELD_OUT_SUBJECTS: usize = 300;

// Phase sweeps run on the 16^3 preset.
const SWEEP_EPOCHS: usize = 40;
const SWEEP_LR: f64 = 1e-3;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> simvae::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(random(&shape, &mut rng));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(
    build: impl FnMut(&mut Graph, &[Var]) -> simvae::Result<Var>,
    params: &[Tensor],
    tol: f64,
    max_entries: usize,
) -> (bool, f64) {
    let report = check_report(build, params, tol, max_entries);
    (report.passed && report.failure.is_none(), report.max_rel_error())
}

fn check_report(
    mut build: impl FnMut(&mut Graph, &[Var]) -> simvae::Result<Var>,
    params: &[Tensor],
    tol: f64,
    max_entries: usize,
) -> GradCheckReport {
    let cfg = GradCheckConfig {
        step: 1e-3,
        tolerance: tol,
        max_entries: Some(max_entries),
        seed: 5,
        // down to 1e-6 when a probe straddles a ReLU kink
        kink_retries: 3,
    };
    grad_check(&mut build, params, &cfg)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = 1e-5;
    let mut ops: Vec<(&str, bool, f64)> = Vec::new();
    let p = [random(&[2, 2, 4, 3, 5], &mut rng), random(&[3, 2, 3, 3, 3], &mut rng), random(&[3], &mut rng)];
    let (ok, e) = check(
        |g, p| {
            let y = g.conv3d(p[0], p[1], p[2], ConvGeometry::new(2, 1))?;
            weighted_sum(g, y, 1)
        },
        &p,
        tol,
        40,
    );
    ops.push(("conv3d", ok, e));
    let p = [random(&[2, 2, 2, 3, 2], &mut rng), random(&[2, 3, 3, 3, 3], &mut rng), random(&[3], &mut rng)];
    let (ok, e) = check(
        |g, p| {
            let y = g.conv_transpose3d(p[0], p[1], p[2], ConvGeometry::new(2, 1).with_output_padding([1, 0, 1]))?;
            weighted_sum(g, y, 2)
        },
        &p,
        tol,
        40,
    );
    ops.push(("conv_transpose3d", ok, e));
    let p = [random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)];
    let (ok, e) = check(
        |g, p| {
            let y = g.dense(p[0], p[1], p[2])?;
            weighted_sum(g, y, 3)
        },
        &p,
        tol,
        40,
    );
    ops.push(("dense", ok, e));
    let p = [Tensor::from_fn(&[4, 6], |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })];
    let (ok, e) = check(
        |g, p| {
            let y = g.relu(p[0]);
            weighted_sum(g, y, 4)
        },
        &p,
        tol,
        40,
    );
    ops.push(("relu", ok, e));
    let p = [random(&[3, 2, 2, 2, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let (ok, e) = check(
            |g, p| {
                let mut stats = RunningStats::new(2);
                stats.mean = vec![0.3, -0.2];
                stats.var = vec![0.5, 2.0];
                let y = g.batchnorm(p[0], p[1], p[2], &mut stats, mode)?;
                weighted_sum(g, y, 5)
            },
            &p,
            tol,
            40,
        );
        ops.push(("batchnorm", ok, e));
    }
    let p = [random(&[2, 1, 3, 3, 2], &mut rng), random(&[2, 1, 3, 3, 2], &mut rng)];
    let (ok, e) = check(
        |g, p| {
            let a = g.mul(p[0], p[1])?;
            let e = g.exp(p[0]);
            let s = g.sub(a, e)?;
            let s = g.add(s, p[1])?;
            let s = g.sigmoid(s);
            let c = g.crop(s, [1, 0, 1], [2, 2, 1])?;
            let r = g.reshape(c, &[2, 4])?;
            let cols = g.columns(r, &[3, 0])?;
            let sc = g.scale(cols, -1.5);
            weighted_sum(g, sc, 6)
        },
        &p,
        tol,
        40,
    );
    ops.push(("elementwise+shape", ok, e));
    let p = [random(&[3, 5], &mut rng), random(&[3, 5], &mut rng)];
    let (ok, e) = check(
        |g, p| {
            let m = g.mse(p[0], p[1])?;
            let k = g.kl_gaussian(p[0], p[1])?;
            g.add(m, k)
        },
        &p,
        tol,
        40,
    );
    ops.push(("mse+kl", ok, e));
    let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..85.0)).collect();
    let p = [random(&[6, 2], &mut rng)];
    let (ok, e) = check(|g, p| g.neg_pearson(p[0], &y, 1e-8), &p, tol, 40);
    ops.push(("neg_pearson", ok, e));

    // the full objective at the desk preset, on phantom volumes
    let spec = CorpusSpec {
        subjects: 4,
        ..CorpusSpec::default()
    };
    let data = Dataset::synthesize(&spec, 1.0).unwrap();
    let model = VaeModel::new(ModelConfig::desk(8).with_seed(3)).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let batch = data.batch(&idx);
    let y = data.scores(&idx);
    let noise = Tensor::from_fn(&[4, 8], |_| rng.sample::<f64, _>(StandardNormal));
    let weights = LossWeights { beta: 0.5, alpha: 50.0 };
    let metric = PearsonSimilarity::default();
    let full = check_report(
        |g, p| {
            let x = g.constant(batch.clone());
            let eps = g.constant(noise.clone());
            let mut stats = model.running_stats().to_vec();
            let fv = model.forward_graph(g, p, &mut stats, x, Some(eps), BatchNormMode::Train)?;
            let zs = g.columns(fv.z, &model.config().supervised)?;
            let inputs = LossInputs {
                x,
                x_hat: fv.recon,
                mu: fv.mu,
                logvar: fv.logvar,
                z_supervised: zs,
                y: &y,
            };
            Ok(total_loss(g, &inputs, weights, &metric)?.0)
        },
        model.params(),
        1e-4,
        6,
    );
    let (full_ok, full_err) = (full.passed && full.failure.is_none(), full.max_rel_error());
    let probed: usize = full.params.iter().map(|p| p.probed).sum();
    let skipped: usize = full.params.iter().map(|p| p.skipped).sum();
    for (name, p) in model.param_names().iter().zip(&full.params) {
        if p.max_rel_error > 1e-4 {
            println!("    {name}: {:.2e} at {:?}", p.max_rel_error, p.worst);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ops_ok = ops.iter().all(|o| o.1);
    let worst = ops.iter().map(|o| o.2).fold(0.0, f64::max);
    let failed: Vec<&str> = ops.iter().filter(|o| !o.1).map(|o| o.0).collect();
    verdict(
        ops_ok && full_ok && secs < 120.0,
        format!(
            "ops max rel err {worst:.2e} (<= 1e-5{}), desk objective {full_err:.2e} (<= 1e-4) over {probed} entries \
             ({skipped} skipped at kinks), {secs:.0}s",
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
        ),
    )
}

fn mc_kl(mu: &[f64], logvar: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = 0.0;
        for (m, lv) in mu.iter().zip(logvar) {
            let e: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * lv).exp() * e;
            v += -0.5 * e * e - 0.5 * lv + 0.5 * z * z;
        }
        sum += v;
        sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn two_pass(z: &[f64], y: &[f64]) -> f64 {
    let n = z.len() as f64;
    let (mz, my) = (z.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = z.iter().zip(y).map(|(a, b)| (a - mz) * (b - my)).sum();
    let vz: f64 = z.iter().map(|a| (a - mz).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vz.sqrt() * vy.sqrt())
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut kl_worst: f64 = 0.0;
    let mut kl_fail = 0;
    for _ in 0..50 {
        let mu = vec![rng.random_range(-2.0..2.0)];
        let lv = vec![rng.random_range(-2.0..1.5)];
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![1, 1], mu.clone()).unwrap());
        let l = g.constant(Tensor::new(vec![1, 1], lv.clone()).unwrap());
        let k = kl_gaussian(&mut g, m, l).unwrap();
        let analytic = g.value(k).item();
        let (est, se) = mc_kl(&mu, &lv, 1_000_000, &mut rng);
        let z = (analytic - est).abs() / se;
        kl_worst = kl_worst.max(z);
        if z > 3.0 {
            kl_fail += 1;
        }
    }
    let mut pearson_worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(3..200);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = z.iter().map(|v| 0.3 * v + rng.random_range(0.0..85.0)).collect();
        pearson_worst = pearson_worst.max((pearson(&z, &y).unwrap().r - two_pass(&z, &y)).abs());
    }
    let mut glm_worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(5..30);
        let shape = [rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5)];
        let voxels: usize = shape.iter().product();
        let vols: Vec<Volume> = (0..n)
            .map(|_| Volume::new(shape, (0..voxels).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let map = glm_voxelwise(&vols, &x).unwrap();
        let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let inv = (design.transpose() * &design).try_inverse().unwrap();
        for i in 0..voxels {
            let yv = DVector::from_fn(n, |k, _| vols[k].data()[i]);
            let beta = &inv * design.transpose() * &yv;
            glm_worst = glm_worst
                .max((map.intercept[i] - beta[0]).abs())
                .max((map.slope[i] - beta[1]).abs());
        }
    }
    verdict(
        kl_fail == 0 && pearson_worst <= 1e-12 && glm_worst <= 1e-10,
        format!(
            "KL worst |z| {kl_worst:.2} (<= 3), pearson {pearson_worst:.1e} (<= 1e-12), GLM {glm_worst:.1e} (<= 1e-10)"
        ),
    )
}

/// Models and cohorts shared by criteria 3, 6, 7 and 8.
struct Trained {
    spec: CorpusSpec,
    held: Dataset,
    /// `(seed, held-out r, model)` with the similarity term on.
    supervised: Vec<(u64, f64, VaeModel)>,
    /// Held-out r of the alpha = 0 runs.
    baseline: Vec<(u64, f64)>,
    worst_minutes: f64,
}

impl Trained {
    /// The first supervised model that reached the correlation target.
    fn model(&self) -> &VaeModel {
        &self
            .supervised
            .iter()
            .find(|m| m.1.abs() >= 0.7)
            .unwrap_or(&self.supervised[0])
            .2
    }
}

fn held_out_r(model: &VaeModel, hyper: &HyperParams, held: &Dataset) -> f64 {
    let all: Vec<usize> = (0..held.len()).collect();
    evaluate_model(model, hyper, held, &all).unwrap().r
}

fn train_desk(data: &Dataset, alpha: f64, seed: u64) -> (Trainer, f64) {
    let split = split_dataset(data.len(), SplitProportions::default(), 0).unwrap();
    let hyper = HyperParams {
        alpha,
        beta: STABLE_BETA,
        learning_rate: LEARNING_RATE,
        epochs: EPOCHS,
        seed,
        ..HyperParams::default()
    };
    let mut trainer = Trainer::from_config(ModelConfig::desk(8).with_seed(seed), hyper).unwrap();
    let start = Instant::now();
    fit(&mut trainer, data, &split, None, None).unwrap();
    (trainer, start.elapsed().as_secs_f64() / 60.0)
}

fn train_all() -> Trained {
    let spec = CorpusSpec::default();
    let data = Dataset::synthesize(&spec, 1.0).unwrap();
    let held = Dataset::synthesize(&pipeline::held_out_spec(&spec, HELD_OUT_SUBJECTS), 1.0).unwrap();
    let mut worst: f64 = 0.0;
    let mut supervised = Vec::new();
    for seed in SEEDS {
        let (t, minutes) = train_desk(&data, STABLE_ALPHA, seed);
        worst = worst.max(minutes);
        let r = held_out_r(&t.model, &t.hyper, &held);
        println!("    alpha {STABLE_ALPHA} seed {seed}: held-out r {r:.3} ({minutes:.1} min)");
        supervised.push((seed, r, t.model));
    }
    let mut baseline = Vec::new();
    for seed in SEEDS {
        let (t, minutes) = train_desk(&data, 0.0, seed);
        worst = worst.max(minutes);
        let r = held_out_r(&t.model, &t.hyper, &held);
        println!("    alpha 0 seed {seed}: held-out r {r:.3} ({minutes:.1} min)");
        baseline.push((seed, r));
    }
    Trained {
        spec,
        held,
        supervised,
        baseline,
        worst_minutes: worst,
    }
}

fn criterion_3(t: &Trained) -> Verdict {
    let hits = t.supervised.iter().filter(|m| m.1.abs() >= 0.7).count();
    let base_ok = t.baseline.iter().all(|b| b.1.abs() < 0.2);
    let rs: Vec<String> = t.supervised.iter().map(|m| format!("{:.3}", m.1)).collect();
    let bs: Vec<String> = t.baseline.iter().map(|b| format!("{:.3}", b.1)).collect();
    verdict(
        hits >= 2 && base_ok && t.worst_minutes <= 30.0,
        format!(
            "held-out r [{}] ({hits}/3 >= 0.7), alpha=0 r [{}] (all < 0.2), slowest run {:.1} min",
            rs.join(", "),
            bs.join(", "),
            t.worst_minutes
        ),
    )
}

fn sweep_data() -> (Dataset, Split) {
    let spec = CorpusSpec {
        shape: [16; 3],
        ..CorpusSpec::default()
    };
    let data = Dataset::synthesize(&spec, 1.0).unwrap();
    let split = split_dataset(data.len(), SplitProportions::default(), 0).unwrap();
    (data, split)
}

fn sweep_hyper() -> HyperParams {
    HyperParams {
        alpha: 0.0,
        beta: 0.0,
        learning_rate: SWEEP_LR,
        epochs: SWEEP_EPOCHS,
        ..HyperParams::default()
    }
}

fn describe(grid: &PhaseGrid) -> String {
    let mut s = String::new();
    for r in 0..grid.rows.len() {
        let cells: Vec<String> = grid
            .row_cells(r)
            .iter()
            .map(|c| {
                format!(
                    "{:.3}/{}",
                    c.metric(grid.kind).unwrap_or(f64::NAN),
                    c.regime.map(|x| x.to_string()).unwrap_or_default()
                )
            })
            .collect();
        s.push_str(&format!("\n    {} = {}: {}", grid.kind.axis_names().0, grid.rows[r], cells.join("  ")));
    }
    s
}

fn criterion_4() -> Verdict {
    let (data, split) = sweep_data();
    let spec = SweepSpec::default();
    let base = SweepBase {
        model: ModelConfig::tiny(8),
        hyper: sweep_hyper(),
        data: &data,
        split: &split,
    };
    let grid = sweep_dim_beta(&spec, &base).unwrap();
    let last = grid.cols.len() - 1;
    let collapse = grid.column(last).all(|c| c.regime == Some(Regime::Collapse));
    let autoencoder = grid.column(0).all(|c| c.regime == Some(Regime::AutoencoderLike));
    let monotone = (0..grid.rows.len()).all(|r| {
        let d: Vec<f64> = grid.row_cells(r).iter().map(|c| c.metric(grid.kind).unwrap_or(f64::NAN)).collect();
        d.windows(2).filter(|w| !(w[1] <= w[0])).count() <= 1
    });
    verdict(
        collapse && autoencoder && monotone,
        format!(
            "largest-beta collapse {collapse}, beta=0 autoencoder-like {autoencoder}, D_mu non-increasing {monotone}{}",
            describe(&grid)
        ),
    )
}

fn criterion_5() -> Verdict {
    let (data, split) = sweep_data();
    let spec = SweepSpec::default();
    let base = SweepBase {
        model: ModelConfig::tiny(8),
        hyper: sweep_hyper(),
        data: &data,
        split: &split,
    };
    let grid = sweep_beta_alpha(&spec, &base).unwrap();
    let stable = stable_mse(&grid, &spec.thresholds).unwrap_or(f64::NAN);
    let last = grid.cols.len() - 1;
    let non_informative = grid.column(0).all(|c| c.regime == Some(Regime::NonInformative));
    let dominated = grid.column(last).all(|c| {
        c.outcome
            .as_ref()
            .is_ok_and(|o| o.r.abs() >= 0.95 && o.val_mse >= 2.0 * stable)
    });
    verdict(
        non_informative && dominated,
        format!(
            "alpha=0 non-informative {non_informative}, largest alpha |r| >= 0.95 with MSE >= 2x stable ({stable:.2}) {dominated}{}",
            describe(&grid)
        ),
    )
}

fn criterion_6(t: &Trained) -> Verdict {
    let model = t.model();
    let all: Vec<usize> = (0..t.held.len()).collect();
    let mu = evaluate_model(model, &HyperParams::default(), &t.held, &all).unwrap().mu;
    let d = model.latent_dim();
    let z0: Vec<f64> = (0..t.held.len()).map(|i| mu.data()[i * d]).collect();
    let range = z0.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (_, _, map) = severity_glm(model, range, 11, 32, 0).unwrap();
    let mask_of = |effect: Effect| {
        let mut m = Volume::zeros(t.spec.shape);
        for roi in t.spec.rois.iter().filter(|r| r.effect == effect) {
            let v = t.spec.roi_mask(roi);
            for (a, b) in m.data_mut().iter_mut().zip(v.data()) {
                *a = a.max(*b);
            }
        }
        m
    };
    let dec = roi_summary(&map, &mask_of(Effect::Decrease)).unwrap();
    let inc = roi_summary(&map, &mask_of(Effect::Increase)).unwrap();
    verdict(
        dec.mean_slope < 0.0 && inc.mean_slope >= 0.0 && dec.fraction_negative >= 0.8,
        format!(
            "decrease ROI mean slope {:.4} ({:.0}% negative), increase ROI mean slope {:.4}",
            dec.mean_slope,
            100.0 * dec.fraction_negative,
            inc.mean_slope
        ),
    )
}

fn criterion_7(t: &Trained) -> Verdict {
    let model = t.model();
    let n = t.held.len();
    let all: Vec<usize> = (0..n).collect();
    let d = model.latent_dim();
    let mu = evaluate_model(model, &HyperParams::default(), &t.held, &all).unwrap().mu;
    let codes: Vec<Vec<f64>> = mu.data().chunks(d).map(<[f64]>::to_vec).collect();
    let scores = t.held.scores(&all);
    let diagnosis: Vec<Diagnosis> = t.held.records.iter().map(|r| r.diagnosis).collect();
    let data = ClassificationData {
        codes: &codes,
        covariate: &scores,
        diagnosis: &diagnosis,
        supervised: &model.config().supervised,
    };
    let split = split_dataset(n, SplitProportions::default(), 1).unwrap();
    let cfg = BootstrapConfig {
        seed: 4,
        ..BootstrapConfig::default()
    };
    let run = |set: &InputSet| bootstrap_classify(&data, set, &split.train, &split.test, &cfg).unwrap();
    let mut sets = vec![InputSet::Supervised, InputSet::Remaining];
    sets.extend((1..d).map(InputSet::Latent));
    let reports: Vec<ClassificationReport> = sets.iter().map(run).collect();
    let covariate = run(&InputSet::Covariate);
    let deterministic = sets.iter().zip(&reports).all(|(s, r)| run(s) == *r) && run(&InputSet::Covariate) == covariate;
    let ba = |r: &ClassificationReport| r.balanced_accuracy.mean;
    let z0 = ba(&reports[0]);
    let best_single = reports[2..].iter().map(ba).fold(0.0, f64::max);
    let best_latent = reports.iter().map(ba).fold(0.0, f64::max);
    verdict(
        z0 >= best_single + 0.1 && ba(&covariate) >= best_latent && deterministic,
        format!(
            "BA z0 {z0:.3}, best single unsupervised latent {best_single:.3}, remaining {:.3}, y {:.3}, deterministic {deterministic}",
            ba(&reports[1]),
            ba(&covariate)
        ),
    )
}

fn criterion_8(t: &Trained) -> Verdict {
    let model = t.model();
    let n = t.held.len();
    let all: Vec<usize> = (0..n).collect();
    let d = model.latent_dim();
    let mu = evaluate_model(model, &HyperParams::default(), &t.held, &all).unwrap().mu;
    let tz: Vec<f64> = t.held.records.iter().map(|r| r.factors.as_ref().unwrap().translation[0]).collect();
    let supervised = &model.config().supervised;
    let mut best: Option<(usize, f64, f64, bool)> = None;
    for k in (0..d).filter(|k| !supervised.contains(k)) {
        let col: Vec<f64> = (0..n).map(|i| mu.data()[i * d + k]).collect();
        let r = pearson(&col, &tz).unwrap().r;
        let range = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sheet = latent_traversal(model, k, range, 7).unwrap();
        let cz: Vec<f64> = sheet.centroids().iter().map(|c| c[0]).collect();
        let shift = cz[cz.len() - 1] - cz[0];
        let ok = is_monotone(&cz) && shift.abs() >= 1.0;
        let better = match best {
            None => true,
            Some((_, _, s, o)) => (ok && !o) || (ok == o && shift.abs() > s.abs()),
        };
        if better {
            best = Some((k, r, shift, ok));
        }
    }
    let (k, r, shift, ok) = best.unwrap();
    verdict(
        ok,
        format!("latent {k} (r with planted z-translation {r:.2}) moves the decoded centroid {shift:.2} voxels along z, monotone {ok}"),
    )
}

fn same_file(a: &Path, b: &Path) -> bool {
    fs::read(a).ok() == fs::read(b).ok()
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::from_toml(
        "[corpus]\nsubjects = 100\nshape = [16, 16, 16]\n[model]\ninput_shape = [16, 16, 16]\n\
         [train]\nepochs = 3\nlearning_rate = 1e-3\nalpha = 10.0\n[analysis]\nlevels = 5\nsamples = 4\n",
    )
    .unwrap();
    config.seed = Some(21);
    config.resolve_seeds();
    let run = |name: &str| {
        let root = dir.path().join(name);
        pipeline::gen_data(&config, &root.join("data")).unwrap();
        pipeline::train(&config, &root.join("data"), &root.join("train"), false).unwrap();
        let req = AnalyzeRequest {
            checkpoint: &root.join("train/checkpoint.svae"),
            data: &root.join("data"),
            out: &root.join("analysis"),
            tasks: &Task::ALL,
            masks: &[],
        };
        pipeline::analyze(&config, &req).unwrap();
        root
    };
    let (a, b) = (run("a"), run("b"));
    let mut compared = 0;
    let mut identical = true;
    for stage in ["data", "train", "analysis"] {
        let listing = fs::read_to_string(a.join(stage).join("MANIFEST.txt")).unwrap();
        identical &= same_file(&a.join(stage).join("MANIFEST.txt"), &b.join(stage).join("MANIFEST.txt"));
        for line in listing.lines() {
            let rel = line.split_once("  ").unwrap().1;
            identical &= same_file(&a.join(stage).join(rel), &b.join(stage).join(rel));
            compared += 1;
        }
    }
    // resume: 2 epochs then 1 more equals 3 straight
    let resumed = dir.path().join("resumed");
    let mut short = config.clone();
    short.train.epochs = 2;
    pipeline::train(&short, &a.join("data"), &resumed, true).unwrap();
    pipeline::train(&config, &a.join("data"), &resumed, true).unwrap();
    let resume_ok = same_file(&resumed.join("checkpoint.svae"), &a.join("train/checkpoint.svae"))
        && same_file(&resumed.join("metrics.csv"), &a.join("train/metrics.csv"));
    verdict(
        identical && resume_ok && compared > 0,
        format!("{compared} files byte-identical across two runs {identical}, resume bitwise {resume_ok}"),
    )
}

fn main() {
    // cargo passes harness flags such as --nocapture or a name filter
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: u32| args.is_empty() || args.iter().any(|a| a == &id.to_string());
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if wanted(id) {
            let start = Instant::now();
            let v = f();
            println!(
                "criterion {id} {name}: {} ({:.0}s) {}",
                if v.passed { "PASS" } else { "FAIL" },
                start.elapsed().as_secs_f64(),
                v.detail
            );
            results.push((id, name, v));
        }
    };
    record(1, "gradient integrity", &mut criterion_1);
    record(2, "loss oracles", &mut criterion_2);
    record(4, "dispersion phase structure", &mut criterion_4);
    record(5, "correlation phase structure", &mut criterion_5);
    record(9, "determinism and persistence", &mut criterion_9);
    if [3, 6, 7, 8].into_iter().any(wanted) {
        let trained = train_all();
        record(3, "disentanglement", &mut || criterion_3(&trained));
        record(6, "GLM sign recovery", &mut || criterion_6(&trained));
        record(7, "classification", &mut || criterion_7(&trained));
        record(8, "confounder traversal", &mut || criterion_8(&trained));
    }
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (id, name, v) in &results {
        println!("  criterion {id} {name}: {}", if v.passed { "PASS" } else { "FAIL" });
    }
    if results.iter().any(|r| !r.2.passed) {
        std::process::exit(1);
    }
}
