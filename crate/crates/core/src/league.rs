//! League tables: performance score, equity score and weighted composites.
//!
//! Both scores are means of per-cell min-max normalised values across models.
//! Cells where every model has the same value carry no ranking information
//! and are skipped; a model with no usable cells scores 0.5.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inequality::InequalityRow;
use crate::metrics::{MetricRecord, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub w_perf: f64,
    pub w_equity: f64,
}

impl Scenario {
    pub fn new(w_perf: f64, w_equity: f64) -> Result<Self> {
        let s = Scenario { w_perf, w_equity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_perf.is_finite()
            && self.w_equity.is_finite()
            && self.w_perf >= 0.0
            && self.w_equity >= 0.0
            && (self.w_perf + self.w_equity - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::BadWeights(format!(
                "weights ({}, {}) must be nonnegative and sum to 1",
                self.w_perf, self.w_equity
            )))
        }
    }

    pub fn label(&self) -> String {
        format!("{}_{}", (self.w_perf * 100.0).round(), (self.w_equity * 100.0).round())
    }
}

pub fn default_scenarios() -> Vec<Scenario> {
    [(0.9, 0.1), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7), (0.1, 0.9)]
        .into_iter()
        .map(|(w_perf, w_equity)| Scenario { w_perf, w_equity })
        .collect()
}

/// Mean normalised value per model over `cells`, each a per-model column.
fn normalised_mean(models: &[String], cells: &[Vec<Option<f64>>], lower_is_better: &[bool]) -> BTreeMap<String, f64> {
    let mut sum = vec![0.0; models.len()];
    let mut cnt = vec![0usize; models.len()];
    for (cell, &lower) in cells.iter().zip(lower_is_better) {
        let present: Vec<f64> = cell.iter().flatten().copied().collect();
        let (lo, hi) = present
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if present.len() < 2 || !(hi > lo) {
            continue;
        }
        for (m, v) in cell.iter().enumerate() {
            if let Some(v) = v {
                let t = (v - lo) / (hi - lo);
                sum[m] += if lower { 1.0 - t } else { t };
                cnt[m] += 1;
            }
        }
    }
    models
        .iter()
        .enumerate()
        .map(|(m, id)| (id.clone(), if cnt[m] == 0 { 0.5 } else { sum[m] / cnt[m] as f64 }))
        .collect()
}

fn model_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = ids.map(str::to_string).collect();
    v.sort();
    v.dedup();
    v
}

/// Per-model mean of each of the 28 outcomes over its patients.
pub fn outcome_means(records: &[MetricRecord]) -> BTreeMap<String, Vec<Option<f64>>> {
    let mut acc: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for r in records {
        let row = acc.entry(r.model_id.clone()).or_insert_with(|| vec![(0.0, 0); 28]);
        for (k, o) in Outcome::all().into_iter().enumerate() {
            if let Some(v) = r.get(o) {
                row[k].0 += v;
                row[k].1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(m, row)| (m, row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()))
        .collect()
}

/// Higher is better; hd95 and asd are reversed before normalising.
pub fn performance_scores(records: &[MetricRecord]) -> Result<BTreeMap<String, f64>> {
    let means = outcome_means(records);
    let models: Vec<String> = means.keys().cloned().collect();
    if models.len() < 2 {
        return Err(Error::InsufficientModels {
            needed: 2,
            got: models.len(),
        });
    }
    let outcomes = Outcome::all();
    let cells: Vec<Vec<Option<f64>>> = (0..outcomes.len())
        .map(|k| models.iter().map(|m| means[m][k]).collect())
        .collect();
    let lower: Vec<bool> = outcomes.iter().map(|o| !o.metric.higher_is_better()).collect();
    Ok(normalised_mean(&models, &cells, &lower))
}

/// `1 −` mean normalised inequality over all index × outcome cells.
pub fn equity_scores(table: &[InequalityRow]) -> Result<BTreeMap<String, f64>> {
    let models = model_ids(table.iter().map(|r| r.model_id.as_str()));
    if models.len() < 2 {
        return Err(Error::InsufficientModels {
            needed: 2,
            got: models.len(),
        });
    }
    let by_id: BTreeMap<&str, &InequalityRow> = table.iter().map(|r| (r.model_id.as_str(), r)).collect();
    let n_cells = 28 * 7;
    let cells: Vec<Vec<Option<f64>>> = (0..n_cells)
        .map(|c| models.iter().map(|m| by_id[m.as_str()].values[c / 7][c % 7]).collect())
        .collect();
    // every inequality cell is lower-is-better, so each contributes 1 − t
    Ok(normalised_mean(&models, &cells, &vec![true; n_cells]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeagueEntry {
    pub model_id: String,
    pub perf_score: f64,
    pub equity_score: f64,
    pub perf_rank: usize,
    pub equity_rank: usize,
    pub composite: Vec<f64>,
    pub composite_ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct League {
    pub scenarios: Vec<Scenario>,
    /// Sorted by model id.
    pub entries: Vec<LeagueEntry>,
}

impl League {
    pub fn entry(&self, model_id: &str) -> Option<&LeagueEntry> {
        self.entries.iter().find(|e| e.model_id == model_id)
    }

    /// Model ids ordered by rank under scenario `k`.
    pub fn order(&self, k: usize) -> Vec<&str> {
        let mut v: Vec<&LeagueEntry> = self.entries.iter().collect();
        v.sort_by_key(|e| e.composite_ranks[k]);
        v.into_iter().map(|e| e.model_id.as_str()).collect()
    }
}

/// 1-based descending ranks; equal scores fall back to model id order.
pub fn rank_desc(ids: &[String], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    let mut ranks = vec![0; ids.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

pub fn composite_table(
    perf: &BTreeMap<String, f64>,
    equity: &BTreeMap<String, f64>,
    scenarios: &[Scenario],
) -> Result<League> {
    for s in scenarios {
        s.validate()?;
    }
    let ids: Vec<String> = perf.keys().cloned().collect();
    if let Some(m) = ids.iter().find(|m| !equity.contains_key(*m)) {
        return Err(Error::InvalidParameter(format!("model {m} has no equity score")));
    }
    if ids.len() != equity.len() {
        return Err(Error::InvalidParameter("performance and equity cover different models".into()));
    }
    let p: Vec<f64> = ids.iter().map(|m| perf[m]).collect();
    let e: Vec<f64> = ids.iter().map(|m| equity[m]).collect();
    let perf_rank = rank_desc(&ids, &p);
    let equity_rank = rank_desc(&ids, &e);
    let composite: Vec<Vec<f64>> = scenarios
        .iter()
        .map(|s| p.iter().zip(&e).map(|(a, b)| s.w_perf * a + s.w_equity * b).collect())
        .collect();
    let ranks: Vec<Vec<usize>> = composite.iter().map(|c| rank_desc(&ids, c)).collect();
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, m)| LeagueEntry {
            model_id: m.clone(),
            perf_score: p[i],
            equity_score: e[i],
            perf_rank: perf_rank[i],
            equity_rank: equity_rank[i],
            composite: composite.iter().map(|c| c[i]).collect(),
            composite_ranks: ranks.iter().map(|r| r[i]).collect(),
        })
        .collect();
    Ok(League {
        scenarios: scenarios.to_vec(),
        entries,
    })
}

pub fn build_league(records: &[MetricRecord], inequality: &[InequalityRow], scenarios: &[Scenario]) -> Result<League> {
    composite_table(&performance_scores(records)?, &equity_scores(inequality)?, scenarios)
}

pub fn write_league_csv<W: Write>(w: W, league: &League) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["model_id", "perf_score", "equity_score", "perf_rank", "equity_rank"]
        .map(String::from)
        .to_vec();
    for s in &league.scenarios {
        header.push(format!("composite_{}", s.label()));
        header.push(format!("rank_{}", s.label()));
    }
    wtr.write_record(&header)?;
    for e in &league.entries {
        let mut rec = vec![
            e.model_id.clone(),
            e.perf_score.to_string(),
            e.equity_score.to_string(),
            e.perf_rank.to_string(),
            e.equity_rank.to_string(),
        ];
        for (c, r) in e.composite.iter().zip(&e.composite_ranks) {
            rec.push(c.to_string());
            rec.push(r.to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<league csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(v: &[(&str, f64)]) -> BTreeMap<String, f64> {
        v.iter().map(|(k, s)| (k.to_string(), *s)).collect()
    }

    #[test]
    fn crossing_case() {
        let l = composite_table(
            &scores(&[("A", 0.9), ("B", 0.5)]),
            &scores(&[("A", 0.1), ("B", 0.9)]),
            &default_scenarios(),
        )
        .unwrap();
        let a = l.entry("A").unwrap();
        let b = l.entry("B").unwrap();
        assert!((a.composite[0] - 0.82).abs() < 1e-12 && (b.composite[0] - 0.54).abs() < 1e-12);
        assert!((a.composite[4] - 0.18).abs() < 1e-12 && (b.composite[4] - 0.86).abs() < 1e-12);
        assert_eq!(l.order(0), vec!["A", "B"]);
        assert_eq!(l.order(4), vec!["B", "A"]);
    }

    #[test]
    fn ties_break_by_id_and_weights_checked() {
        let l = composite_table(
            &scores(&[("b", 0.5), ("a", 0.5), ("c", 0.2)]),
            &scores(&[("b", 0.5), ("a", 0.5), ("c", 0.2)]),
            &[Scenario::new(1.0, 0.0).unwrap()],
        )
        .unwrap();
        assert_eq!(l.order(0), vec!["a", "b", "c"]);
        assert_eq!(l.entry("a").unwrap().perf_rank, 1);
        assert!(matches!(Scenario::new(0.6, 0.6), Err(Error::BadWeights(_))));
        assert!(matches!(Scenario::new(2.0, -1.0), Err(Error::BadWeights(_))));
    }

    #[test]
    fn dominance_gives_endpoints() {
        let mut recs = Vec::new();
        for (m, v) in [("good", 0.9), ("bad", 0.4)] {
            let mut r = MetricRecord::empty("p1", m);
            for o in Outcome::all() {
                let x = if o.metric.higher_is_better() { v } else { 10.0 * (1.0 - v) };
                r.set(o, Some(x));
            }
            recs.push(r);
        }
        let s = performance_scores(&recs).unwrap();
        assert_eq!(s["good"], 1.0);
        assert_eq!(s["bad"], 0.0);
        assert!(matches!(performance_scores(&recs[..1]), Err(Error::InsufficientModels { .. })));
    }
}
