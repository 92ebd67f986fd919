use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitProportions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        SplitProportions {
            train: 0.65,
            val: 0.15,
            test: 0.2,
        }
    }
}

/// Positions into the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` by `seed`; val and test take `floor(n * p)` subjects and
/// the remainder goes to train.
pub fn split_dataset(n: usize, proportions: SplitProportions, seed: u64) -> Result<Split> {
    let p = proportions;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 subjects to split, got {n}")));
    }
    if [p.train, p.val, p.test].iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("split proportions must be positive: {p:?}")));
    }
    if (p.train + p.val + p.test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split proportions must sum to 1: {p:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * p.val + 1e-9).floor() as usize;
    let n_test = (n as f64 * p.test + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_floor_rule() {
        let s = split_dataset(100, SplitProportions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (65, 15, 20));
        let s = split_dataset(10, SplitProportions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_dataset(2, SplitProportions::default(), 0).is_err());
        let p = SplitProportions {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(split_dataset(10, p, 0).is_err());
    }
}
