//! Percentile bootstrap for a difference in group means.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::descriptive::{mean, percentile_linear};
use super::rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCi {
    pub gap: f64,
    pub lo: f64,
    pub hi: f64,
}

impl GapCi {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

/// `mean(a) - mean(b)` with a 95% percentile interval from `n_iter`
/// within-group resamples. Iteration `i` draws from stream `(seed, i)`.
pub fn bootstrap_gap_ci(a: &[f64], b: &[f64], n_iter: usize, seed: u64) -> Result<GapCi> {
    if a.is_empty() {
        return Err(Error::EmptyGroup("A".into()));
    }
    if b.is_empty() {
        return Err(Error::EmptyGroup("B".into()));
    }
    if n_iter == 0 {
        return Err(Error::InvalidParameter("bootstrap needs at least one iteration".into()));
    }
    let gap = mean(a) - mean(b);
    // centred on x[0] so constant groups give an exact zero gap
    let resample_mean = |x: &[f64], r: &mut rng::Rng| {
        let n = x.len();
        x[0] + (0..n).map(|_| x[r.random_range(0..n)] - x[0]).sum::<f64>() / n as f64
    };
    let mut gaps: Vec<f64> = (0..n_iter as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            resample_mean(a, &mut r) - resample_mean(b, &mut r)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    Ok(GapCi {
        gap,
        lo: percentile_linear(&gaps, 2.5),
        hi: percentile_linear(&gaps, 97.5),
    })
}
