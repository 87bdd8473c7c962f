//! Multiple-testing correction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct FdrResult {
    pub significant: Vec<bool>,
    /// Largest p-value declared significant, if any.
    pub threshold: Option<f64>,
    pub n_tested: usize,
}

impl FdrResult {
    pub fn count(&self) -> usize {
        self.significant.iter().filter(|&&s| s).count()
    }
}

/// Benjamini-Hochberg step-up. Missing p-values are not tested and never significant.
pub fn bh_fdr(pvalues: &[Option<f64>], alpha: f64) -> FdrResult {
    let mut tested: Vec<f64> = pvalues.iter().flatten().copied().filter(|p| !p.is_nan()).collect();
    let m = tested.len();
    tested.sort_by(f64::total_cmp);
    let threshold = (1..=m)
        .rev()
        .find(|&i| tested[i - 1] <= i as f64 * alpha / m as f64)
        .map(|i| tested[i - 1]);
    let significant = pvalues
        .iter()
        .map(|p| matches!((p, threshold), (Some(p), Some(t)) if *p <= t))
        .collect();
    FdrResult {
        significant,
        threshold,
        n_tested: m,
    }
}

pub fn bonferroni(pvalues: &[Option<f64>], alpha: f64) -> FdrResult {
    let m = pvalues.iter().flatten().filter(|p| !p.is_nan()).count();
    let cut = alpha / m.max(1) as f64;
    let significant: Vec<bool> = pvalues.iter().map(|p| matches!(p, Some(p) if *p <= cut)).collect();
    let threshold = pvalues
        .iter()
        .zip(&significant)
        .filter(|(_, &s)| s)
        .filter_map(|(p, _)| *p)
        .max_by(f64::total_cmp);
    FdrResult {
        significant,
        threshold,
        n_tested: m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    #[default]
    Bh,
    Bonferroni,
    None,
}

impl Correction {
    pub fn apply(self, pvalues: &[Option<f64>], alpha: f64) -> FdrResult {
        match self {
            Correction::Bh => bh_fdr(pvalues, alpha),
            Correction::Bonferroni => bonferroni(pvalues, alpha),
            Correction::None => {
                let significant: Vec<bool> =
                    pvalues.iter().map(|p| matches!(p, Some(p) if *p <= alpha)).collect();
                let threshold = pvalues
                    .iter()
                    .zip(&significant)
                    .filter(|(_, &s)| s)
                    .filter_map(|(p, _)| *p)
                    .max_by(f64::total_cmp);
                FdrResult {
                    significant,
                    threshold,
                    n_tested: pvalues.iter().flatten().count(),
                }
            }
        }
    }
}
