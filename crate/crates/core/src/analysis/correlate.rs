use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::losses::pearson;

/// Below this sample size the exact Student-t tail is used.
pub const NORMAL_TAIL_FROM: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationResult {
    pub r: f64,
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n: usize,
    pub degenerate: bool,
}

/// Pearson `r` with a two-sided p-value from `t = r sqrt((N-2)/(1-r^2))`.
pub fn correlate_latent(codes: &[f64], covariate: &[f64]) -> Result<CorrelationResult> {
    let c = pearson(codes, covariate)?;
    let n = codes.len();
    if c.degenerate {
        return Ok(CorrelationResult {
            r: 0.0,
            t: 0.0,
            p_value: 1.0,
            n,
            degenerate: true,
        });
    }
    let dof = (n - 2) as f64;
    let denom = 1.0 - c.r * c.r;
    let t = if denom <= 0.0 {
        f64::INFINITY.copysign(c.r)
    } else {
        c.r * (dof / denom).sqrt()
    };
    let tail = if t.is_infinite() {
        0.0
    } else if n >= NORMAL_TAIL_FROM {
        Normal::new(0.0, 1.0).expect("unit normal").sf(t.abs())
    } else {
        StudentsT::new(0.0, 1.0, dof)
            .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?
            .sf(t.abs())
    };
    Ok(CorrelationResult {
        r: c.r,
        t,
        p_value: (2.0 * tail).min(1.0),
        n,
        degenerate: false,
    })
}

/// Correlation of every column of a row-major `[N, d]` table with `covariate`.
pub fn correlate_columns(codes: &[Vec<f64>], covariate: &[f64]) -> Result<Vec<CorrelationResult>> {
    let d = codes.first().map(Vec::len).unwrap_or(0);
    (0..d)
        .map(|k| {
            let col: Vec<f64> = codes.iter().map(|row| row[k]).collect();
            correlate_latent(&col, covariate)
        })
        .collect()
}
