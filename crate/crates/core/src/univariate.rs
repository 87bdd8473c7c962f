//! Subgroup performance gaps with bootstrap intervals, and age-bin means.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortRow, Resection, Sex};
use crate::error::{Error, Result};
use crate::metrics::{fmt_opt, MetricRecord, Outcome};
use crate::stats::bootstrap::bootstrap_gap_ci;
use crate::stats::descriptive::mean;
use crate::stats::rng::derive_seed;

/// A binarised stratification. The gap is always group A minus group B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Sex,
    Source,
    Grade,
    Resection,
    Diagnosis,
}

impl Factor {
    pub const ALL: [Factor; 5] = [Factor::Sex, Factor::Source, Factor::Grade, Factor::Resection, Factor::Diagnosis];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::Sex => "sex",
            Factor::Source => "source",
            Factor::Grade => "grade",
            Factor::Resection => "resection",
            Factor::Diagnosis => "diagnosis",
        }
    }

    pub fn groups(self) -> (&'static str, &'static str) {
        match self {
            Factor::Sex => ("M", "F"),
            Factor::Source => ("UCSF-PDGM", "UPENN-GBM"),
            Factor::Grade => ("grade 4", "non-grade 4"),
            Factor::Resection => ("GTR", "STR"),
            Factor::Diagnosis => ("GBM", "non-GBM"),
        }
    }

    /// `Some(true)` for group A, `Some(false)` for B, `None` when the patient
    /// is missing the covariate or falls outside both groups (biopsy for
    /// resection, unrecognised sources).
    pub fn classify(self, row: &CohortRow) -> Option<bool> {
        match self {
            Factor::Sex => row.sex.map(|s| s == Sex::M),
            Factor::Source => match row.source.as_deref()? {
                "UCSF-PDGM" => Some(true),
                "UPENN-GBM" => Some(false),
                _ => None,
            },
            Factor::Grade => row.who_grade.map(|g| g == 4),
            Factor::Resection => match row.resection? {
                Resection::GTR => Some(true),
                Resection::STR => Some(false),
                Resection::Biopsy => None,
            },
            Factor::Diagnosis => row.is_gbm(),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Factor::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown factor {s:?}")))
    }
}

pub const AGE_BINS: [&str; 7] = ["<30", "30-39", "40-49", "50-59", "60-69", "70-79", "80+"];

pub fn age_bin(age: f64) -> Option<usize> {
    if !age.is_finite() {
        return None;
    }
    Some(((age / 10.0).floor() as i64 - 2).clamp(0, 6) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub model_id: String,
    pub factor: Factor,
    pub outcome: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    /// Missing when either group is empty.
    pub gap: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBinRow {
    pub model_id: String,
    pub outcome: String,
    pub bin: String,
    pub n: usize,
    pub mean: Option<f64>,
}

fn by_model<'a>(records: &'a [MetricRecord]) -> BTreeMap<&'a str, Vec<&'a MetricRecord>> {
    let mut m: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        m.entry(&r.model_id).or_default().push(r);
    }
    m
}

/// One row per model × factor × outcome, in that order. Unit `i` of the
/// table bootstraps with seed `derive_seed(seed, i)`.
pub fn gap_table(
    records: &[MetricRecord],
    cohort: &[CohortRow],
    outcomes: &[Outcome],
    n_iter: usize,
    seed: u64,
) -> Result<Vec<GapRow>> {
    let rows: BTreeMap<&str, &CohortRow> = cohort.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let mut units = Vec::new();
    for (model, recs) in by_model(records) {
        for factor in Factor::ALL {
            for &o in outcomes {
                units.push((model, recs.clone(), factor, o));
            }
        }
    }
    units
        .into_par_iter()
        .enumerate()
        .map(|(i, (model, recs, factor, o))| {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for r in recs {
                let (Some(v), Some(row)) = (r.get(o), rows.get(r.patient_id.as_str())) else {
                    continue;
                };
                match factor.classify(row) {
                    Some(true) => a.push(v),
                    Some(false) => b.push(v),
                    None => {}
                }
            }
            let ci = match bootstrap_gap_ci(&a, &b, n_iter, derive_seed(seed, i as u64)) {
                Ok(ci) => Some(ci),
                Err(Error::EmptyGroup(_)) => None,
                Err(e) => return Err(e),
            };
            let m = |x: &[f64]| (!x.is_empty()).then(|| mean(x));
            Ok(GapRow {
                model_id: model.to_string(),
                factor,
                outcome: o.column(),
                n_a: a.len(),
                n_b: b.len(),
                mean_a: m(&a),
                mean_b: m(&b),
                gap: ci.map(|c| c.gap),
                ci_low: ci.map(|c| c.lo),
                ci_high: ci.map(|c| c.hi),
            })
        })
        .collect()
}

/// Mean of each outcome per model over the seven age bins.
pub fn age_bin_table(records: &[MetricRecord], cohort: &[CohortRow], outcomes: &[Outcome]) -> Vec<AgeBinRow> {
    let ages: BTreeMap<&str, usize> = cohort
        .iter()
        .filter_map(|r| Some((r.patient_id.as_str(), age_bin(r.age_years?)?)))
        .collect();
    let mut out = Vec::new();
    for (model, recs) in by_model(records) {
        for &o in outcomes {
            let mut bins = vec![Vec::new(); AGE_BINS.len()];
            for r in &recs {
                if let (Some(v), Some(&b)) = (r.get(o), ages.get(r.patient_id.as_str())) {
                    bins[b].push(v);
                }
            }
            for (b, vals) in bins.iter().enumerate() {
                out.push(AgeBinRow {
                    model_id: model.to_string(),
                    outcome: o.column(),
                    bin: AGE_BINS[b].to_string(),
                    n: vals.len(),
                    mean: (!vals.is_empty()).then(|| mean(vals)),
                });
            }
        }
    }
    out
}

pub fn write_gap_csv<W: Write>(w: W, rows: &[GapRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "model_id", "factor", "group_a", "group_b", "outcome", "n_a", "n_b", "mean_a", "mean_b", "gap", "ci_low", "ci_high",
    ])?;
    for r in rows {
        let (ga, gb) = r.factor.groups();
        wtr.write_record([
            r.model_id.clone(),
            r.factor.to_string(),
            ga.to_string(),
            gb.to_string(),
            r.outcome.clone(),
            r.n_a.to_string(),
            r.n_b.to_string(),
            fmt_opt(r.mean_a),
            fmt_opt(r.mean_b),
            fmt_opt(r.gap),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<gap csv>", e))?;
    Ok(())
}

pub fn write_age_bin_csv<W: Write>(w: W, rows: &[AgeBinRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["model_id", "outcome", "bin", "n", "mean"])?;
    for r in rows {
        wtr.write_record([r.model_id.clone(), r.outcome.clone(), r.bin.clone(), r.n.to_string(), fmt_opt(r.mean)])?;
    }
    wtr.flush().map_err(|e| Error::io("<age bin csv>", e))?;
    Ok(())
}
