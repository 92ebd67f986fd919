//! Phase-diagram sweeps over `(d, beta)` and `(beta, alpha)` with regime
//! labelling.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{percentile, Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{to_gray, GrayImage};
use crate::model::ModelConfig;
use crate::seed::derive_seed;
use crate::training::{fit, HyperParams, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct DispersionReport {
    pub d_mu: f64,
    pub centroid: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Mean Euclidean distance of each latent mean vector to their centroid.
pub fn dispersion(mus: &[Vec<f64>]) -> Result<DispersionReport> {
    let Some(first) = mus.first() else {
        return Err(Error::InvalidArgument("dispersion needs at least one vector".into()));
    };
    let d = first.len();
    if let Some(bad) = mus.iter().find(|m| m.len() != d) {
        return Err(Error::Shape(format!("dispersion: ragged widths {d} and {}", bad.len())));
    }
    let n = mus.len() as f64;
    let mut centroid = vec![0.0; d];
    for m in mus {
        for (c, v) in centroid.iter_mut().zip(m) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let distances: Vec<f64> = mus
        .iter()
        .map(|m| m.iter().zip(&centroid).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt())
        .collect();
    Ok(DispersionReport {
        d_mu: distances.iter().sum::<f64>() / n,
        centroid,
        distances,
    })
}

/// `n` values log-spaced from `min` to `max` inclusive.
pub fn log_axis(min: f64, max: f64, n: usize) -> Result<Vec<f64>> {
    if !(min > 0.0) || !(max > min) || n < 2 {
        return Err(Error::Config(format!("log axis needs 0 < min < max and n >= 2 (got {min}, {max}, {n})")));
    }
    let (a, b) = (min.log10(), max.log10());
    Ok((0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    DimBeta,
    BetaAlpha,
}

impl GridKind {
    fn tag(self) -> u64 {
        match self {
            GridKind::DimBeta => 1,
            GridKind::BetaAlpha => 2,
        }
    }

    pub fn axis_names(self) -> (&'static str, &'static str) {
        match self {
            GridKind::DimBeta => ("d", "beta"),
            GridKind::BetaAlpha => ("beta", "alpha"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Collapse,
    Stable,
    AutoencoderLike,
    NonInformative,
    SimilarityDominated,
    Failed,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Collapse => "collapse",
            Regime::Stable => "stable",
            Regime::AutoencoderLike => "autoencoder-like",
            Regime::NonInformative => "non-informative",
            Regime::SimilarityDominated => "similarity-dominated",
            Regime::Failed => "failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    /// Converged validation dispersion.
    pub dispersion: f64,
    /// Converged training-batch `pearson(z_0, y)`, the value the
    /// similarity term drives.
    pub r: f64,
    /// Converged validation `pearson(mu_0, y)`.
    pub val_r: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub seed: u64,
    pub outcome: std::result::Result<CellResult, String>,
    pub regime: Option<Regime>,
}

impl Cell {
    /// The grid's headline metric: `D_mu` or `|r|`.
    pub fn metric(&self, kind: GridKind) -> Option<f64> {
        self.outcome.as_ref().ok().map(|c| match kind {
            GridKind::DimBeta => c.dispersion,
            GridKind::BetaAlpha => c.r.abs(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid {
    pub kind: GridKind,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    /// Row-major.
    pub cells: Vec<Cell>,
}

impl PhaseGrid {
    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.cols.len() + col]
    }

    pub fn row_cells(&self, row: usize) -> &[Cell] {
        let c = self.cols.len();
        &self.cells[row * c..(row + 1) * c]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(move |c| c.col == col)
    }

    pub fn to_csv(&self) -> String {
        let (rn, cn) = self.kind.axis_names();
        let mut s = format!("{rn},{cn},seed,metric,dispersion,r,val_r,val_mse,regime,error\n");
        for c in &self.cells {
            let regime = c.regime.map(|r| r.to_string()).unwrap_or_default();
            match &c.outcome {
                Ok(o) => s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},\n",
                    self.rows[c.row],
                    self.cols[c.col],
                    c.seed,
                    c.metric(self.kind).unwrap(),
                    o.dispersion,
                    o.r,
                    o.val_r,
                    o.val_mse,
                    regime
                )),
                Err(e) => s.push_str(&format!(
                    "{},{},{},,,,,,{},\"{}\"\n",
                    self.rows[c.row],
                    self.cols[c.col],
                    c.seed,
                    regime,
                    e.replace('"', "'")
                )),
            }
        }
        s
    }

    /// One `block x block` gray square per cell, rows top to bottom; failed
    /// cells are black.
    pub fn heat_map(&self, block: usize) -> GrayImage {
        let vals: Vec<f64> = self.cells.iter().filter_map(|c| c.metric(self.kind)).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut img = GrayImage::new(self.cols.len() * block, self.rows.len() * block);
        for c in &self.cells {
            let g = c.metric(self.kind).map(|v| to_gray(v, lo, hi).max(1)).unwrap_or(0);
            for y in 0..block {
                for x in 0..block {
                    img.set(c.col * block + x, c.row * block + y, g);
                }
            }
        }
        img
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(format!("writing {}", csv.display()), e))?;
        self.heat_map(16).save_pgm(&dir.join(format!("{stem}.pgm")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeThresholds {
    /// `tau_low = tau_low_fraction * median(D_mu)`.
    pub tau_low_fraction: f64,
    /// `tau_high` is this percentile of `D_mu`.
    pub tau_high_percentile: f64,
    /// Compute the dispersion thresholds within each `d` row rather than
    /// over the whole grid.
    pub per_row: bool,
    pub rho_low: f64,
    pub rho_high: f64,
    pub kappa: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds {
            tau_low_fraction: 0.05,
            tau_high_percentile: 90.0,
            per_row: true,
            rho_low: 0.3,
            rho_high: 0.95,
            kappa: 2.0,
        }
    }
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low_fraction >= 0.0 && self.tau_low_fraction < 1.0)
            || !(0.0..=100.0).contains(&self.tau_high_percentile)
            || !(0.0 <= self.rho_low && self.rho_low <= self.rho_high && self.rho_high <= 1.0)
            || !(self.kappa >= 1.0)
        {
            return Err(Error::Config(format!("regime thresholds out of order: {self:?}")));
        }
        Ok(())
    }
}

fn median(v: &[f64]) -> f64 {
    percentile(v, 50.0)
}

/// Labels every completed cell; failed cells are labelled `Failed`.
pub fn classify_regime(grid: &mut PhaseGrid, t: &RegimeThresholds) -> Result<()> {
    t.validate()?;
    let kind = grid.kind;
    match kind {
        GridKind::DimBeta => {
            let groups: Vec<Vec<usize>> = if t.per_row {
                (0..grid.rows.len())
                    .map(|r| (0..grid.cols.len()).map(|c| r * grid.cols.len() + c).collect())
                    .collect()
            } else {
                vec![(0..grid.cells.len()).collect()]
            };
            for g in groups {
                let vals: Vec<f64> = g.iter().filter_map(|&i| grid.cells[i].metric(kind)).collect();
                if vals.is_empty() {
                    continue;
                }
                let tau_low = t.tau_low_fraction * median(&vals);
                let tau_high = percentile(&vals, t.tau_high_percentile);
                for &i in &g {
                    if let Some(d) = grid.cells[i].metric(kind) {
                        grid.cells[i].regime = Some(if d < tau_low || d == 0.0 {
                            Regime::Collapse
                        } else if d > tau_high {
                            Regime::AutoencoderLike
                        } else {
                            Regime::Stable
                        });
                    }
                }
            }
        }
        GridKind::BetaAlpha => {
            let mse_stable = stable_mse(grid, t).unwrap_or(f64::NAN);
            for c in &mut grid.cells {
                if let Ok(o) = &c.outcome {
                    let r = o.r.abs();
                    c.regime = Some(if r < t.rho_low {
                        Regime::NonInformative
                    } else if r > t.rho_high && o.val_mse > t.kappa * mse_stable {
                        Regime::SimilarityDominated
                    } else {
                        Regime::Stable
                    });
                }
            }
        }
    }
    for c in &mut grid.cells {
        if c.outcome.is_err() {
            c.regime = Some(Regime::Failed);
        }
    }
    Ok(())
}

/// The median stable-cell MSE used by the correlation-grid rule.
pub fn stable_mse(grid: &PhaseGrid, t: &RegimeThresholds) -> Option<f64> {
    let ok: Vec<&CellResult> = grid.cells.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
    let mid: Vec<f64> = ok
        .iter()
        .filter(|c| (t.rho_low..=t.rho_high).contains(&c.r.abs()))
        .map(|c| c.val_mse)
        .collect();
    if !mid.is_empty() {
        return Some(median(&mid));
    }
    let all: Vec<f64> = ok.iter().map(|c| c.val_mse).collect();
    (!all.is_empty()).then(|| median(&all))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub d_values: Vec<usize>,
    pub beta_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    /// Latent width for the `(beta, alpha)` grid.
    pub fixed_d: usize,
    /// `beta` used for every `(beta, alpha)` row is taken from
    /// `beta_values`; `alpha` for the `(d, beta)` grid is always 0.
    pub tail_fraction: f64,
    pub seed: u64,
    pub thresholds: RegimeThresholds,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            d_values: vec![2, 4, 8, 16],
            beta_values: vec![0.0, 1e-2, 1.0, 100.0],
            alpha_values: vec![0.0, 1.0, 30.0, 1000.0],
            fixed_d: 8,
            tail_fraction: 0.1,
            seed: 11,
            thresholds: RegimeThresholds::default(),
        }
    }
}

fn check_axis(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() || v.windows(2).any(|w| !(w[1] > w[0])) || v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("{name} axis must be non-empty, non-negative and strictly increasing: {v:?}")));
    }
    Ok(())
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        check_axis("d", &self.d_values.iter().map(|&d| d as f64).collect::<Vec<_>>())?;
        if self.d_values[0] == 0 || self.fixed_d == 0 {
            return Err(Error::Config("latent widths must be at least 1".into()));
        }
        check_axis("beta", &self.beta_values)?;
        check_axis("alpha", &self.alpha_values)?;
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::Config(format!("tail_fraction must be in (0, 1], got {}", self.tail_fraction)));
        }
        self.thresholds.validate()
    }
}

/// Shared inputs for every cell.
pub struct SweepBase<'a> {
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub data: &'a Dataset,
    pub split: &'a Split,
}

fn run_cell(base: &SweepBase, model: ModelConfig, hyper: HyperParams, tail: f64) -> Result<CellResult> {
    let mut trainer = Trainer::from_config(model, hyper)?;
    fit(&mut trainer, base.data, base.split, None, None)?;
    let h = &trainer.history;
    Ok(CellResult {
        dispersion: h.tail_mean(tail, |e| e.val_dispersion).unwrap(),
        r: h.tail_mean(tail, |e| -e.train.similarity).unwrap(),
        val_r: h.tail_mean(tail, |e| e.val_r).unwrap(),
        val_mse: h.tail_mean(tail, |e| e.val.mse).unwrap(),
    })
}

fn run_grid(
    kind: GridKind,
    rows: Vec<f64>,
    cols: Vec<f64>,
    spec: &SweepSpec,
    base: &SweepBase,
    configure: impl Fn(f64, f64, u64) -> (ModelConfig, HyperParams) + Sync,
) -> Result<PhaseGrid> {
    spec.validate()?;
    let coords: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..cols.len()).map(move |c| (r, c))).collect();
    let cells: Vec<Cell> = coords
        .par_iter()
        .map(|&(r, c)| {
            let seed = derive_seed(spec.seed, &[kind.tag(), r as u64, c as u64]);
            let (m, h) = configure(rows[r], cols[c], seed);
            let outcome = run_cell(base, m, h, spec.tail_fraction).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("{kind:?} cell ({r}, {c}) failed: {e}");
            }
            Cell {
                row: r,
                col: c,
                seed,
                outcome,
                regime: None,
            }
        })
        .collect();
    let mut grid = PhaseGrid { kind, rows, cols, cells };
    classify_regime(&mut grid, &spec.thresholds)?;
    Ok(grid)
}

/// `(d, beta)` grid with `alpha = 0`, scored by converged dispersion.
pub fn sweep_dim_beta(spec: &SweepSpec, base: &SweepBase) -> Result<PhaseGrid> {
    if base.hyper.alpha != 0.0 {
        return Err(Error::Config("the (d, beta) sweep requires alpha = 0 in the base config".into()));
    }
    let rows = spec.d_values.iter().map(|&d| d as f64).collect();
    run_grid(GridKind::DimBeta, rows, spec.beta_values.clone(), spec, base, |d, beta, seed| {
        let mut m = base.model.clone().with_seed(seed);
        m.latent_dim = d as usize;
        m.supervised.retain(|&i| i < m.latent_dim);
        if m.supervised.is_empty() {
            m.supervised.push(0);
        }
        let h = HyperParams {
            beta,
            alpha: 0.0,
            seed,
            ..base.hyper.clone()
        };
        (m, h)
    })
}

/// `(beta, alpha)` grid at `fixed_d`, scored by converged `|r|`.
pub fn sweep_beta_alpha(spec: &SweepSpec, base: &SweepBase) -> Result<PhaseGrid> {
    run_grid(
        GridKind::BetaAlpha,
        spec.beta_values.clone(),
        spec.alpha_values.clone(),
        spec,
        base,
        |beta, alpha, seed| {
            let mut m = base.model.clone().with_seed(seed);
            m.latent_dim = spec.fixed_d;
            m.supervised.retain(|&i| i < m.latent_dim);
            if m.supervised.is_empty() {
                m.supervised.push(0);
            }
            let h = HyperParams {
                beta,
                alpha,
                seed,
                ..base.hyper.clone()
            };
            (m, h)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion(&vec![vec![1.0, 2.0]; 3]).unwrap().d_mu, 0.0);
        let r = dispersion(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(r.centroid, vec![0.0]);
        assert_eq!(r.d_mu, 1.0);
        assert!(dispersion(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(dispersion(&[]).is_err());
    }

    #[test]
    fn log_axis_endpoints() {
        let a = log_axis(1e-4, 1.0, 5).unwrap();
        assert_eq!(a.len(), 5);
        assert!((a[0] - 1e-4).abs() < 1e-18 && (a[4] - 1.0).abs() < 1e-12);
        assert!((a[2] - 1e-2).abs() < 1e-12);
    }

    fn grid(kind: GridKind, vals: &[(f64, f64, f64)], cols: usize) -> PhaseGrid {
        let rows = vals.len() / cols;
        PhaseGrid {
            kind,
            rows: (0..rows).map(|r| r as f64).collect(),
            cols: (0..cols).map(|c| c as f64).collect(),
            cells: vals
                .iter()
                .enumerate()
                .map(|(i, &(dispersion, r, val_mse))| Cell {
                    row: i / cols,
                    col: i % cols,
                    seed: 0,
                    outcome: Ok(CellResult { dispersion, r, val_r: r, val_mse }),
                    regime: None,
                })
                .collect(),
        }
    }

    #[test]
    fn regime_rules() {
        let mut g = grid(
            GridKind::DimBeta,
            &[(5.0, 0.0, 1.0), (2.0, 0.0, 1.0), (1.5, 0.0, 1.0), (0.0, 0.0, 1.0)],
            4,
        );
        classify_regime(&mut g, &RegimeThresholds::default()).unwrap();
        let labels: Vec<Regime> = g.cells.iter().map(|c| c.regime.unwrap()).collect();
        assert_eq!(labels, [Regime::AutoencoderLike, Regime::Stable, Regime::Stable, Regime::Collapse]);

        let mut g = grid(
            GridKind::BetaAlpha,
            &[(1.0, 0.05, 10.0), (1.0, 0.6, 10.0), (1.0, 0.7, 12.0), (1.0, 0.99, 33.0)],
            4,
        );
        classify_regime(&mut g, &RegimeThresholds::default()).unwrap();
        let labels: Vec<Regime> = g.cells.iter().map(|c| c.regime.unwrap()).collect();
        assert_eq!(
            labels,
            [Regime::NonInformative, Regime::Stable, Regime::Stable, Regime::SimilarityDominated]
        );
    }

    #[test]
    fn thresholds_out_of_order_rejected() {
        let t = RegimeThresholds {
            rho_low: 0.9,
            rho_high: 0.5,
            ..RegimeThresholds::default()
        };
        let mut g = grid(GridKind::BetaAlpha, &[(1.0, 0.5, 1.0)], 1);
        assert!(classify_regime(&mut g, &t).is_err());
    }
}
