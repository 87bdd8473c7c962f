//! Inequality indices over one model's per-patient scores for one outcome.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fmt_opt, MetricRecord, Outcome};

/// Values are shifted so the minimum is at least this before any index is taken.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDistribution {
    values: Vec<f64>,
    pub shifted: bool,
}

impl PerformanceDistribution {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    /// Multiply every value by `c > 0` without re-applying the floor.
    pub fn scaled(&self, c: f64) -> Self {
        PerformanceDistribution {
            values: self.values.iter().map(|v| v * c).collect(),
            shifted: self.shifted,
        }
    }

    /// Each value repeated `times` times.
    pub fn replicated(&self, times: usize) -> Self {
        PerformanceDistribution {
            values: (0..times).flat_map(|_| self.values.iter().copied()).collect(),
            shifted: self.shifted,
        }
    }
}

pub fn prepare(values: &[f64]) -> Result<PerformanceDistribution> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min < FLOOR {
        let add = FLOOR - min;
        let mut values: Vec<f64> = values.iter().map(|v| v + add).collect();
        // keep the minimum exactly at the floor despite rounding
        for v in values.iter_mut() {
            if *v < FLOOR {
                *v = FLOOR;
            }
        }
        Ok(PerformanceDistribution { values, shifted: true })
    } else {
        Ok(PerformanceDistribution {
            values: values.to_vec(),
            shifted: false,
        })
    }
}

fn is_constant(x: &[f64]) -> bool {
    x.windows(2).all(|w| w[0] == w[1])
}

/// Mean absolute difference over all ordered pairs divided by twice the mean,
/// computed in O(n log n) from the sorted values.
pub fn gini(d: &PerformanceDistribution) -> f64 {
    let x = d.values();
    if is_constant(x) {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let total: f64 = s.iter().sum();
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i)
    let weighted: f64 = s
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum();
    (2.0 * weighted / (2.0 * n * total)).max(0.0)
}

pub fn atkinson(d: &PerformanceDistribution, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("atkinson epsilon must be > 0, got {epsilon}")));
    }
    let x = d.values();
    if is_constant(x) {
        return Ok(0.0);
    }
    let n = x.len() as f64;
    let mu = d.mean();
    let ede = if (epsilon - 1.0).abs() < 1e-12 {
        (x.iter().map(|v| (v / mu).ln()).sum::<f64>() / n).exp() * mu
    } else {
        let e = 1.0 - epsilon;
        (x.iter().map(|v| (v / mu).powf(e)).sum::<f64>() / n).powf(1.0 / e) * mu
    };
    Ok((1.0 - ede / mu).max(0.0))
}

pub fn normalized_cov(d: &PerformanceDistribution) -> f64 {
    let x = d.values();
    if is_constant(x) {
        return 0.0;
    }
    let mu = d.mean();
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
    let cv = var.sqrt() / mu;
    cv / (cv + 1.0)
}

/// GE(α); α = 1 is Theil's T and α = 0 the mean log deviation.
pub fn generalized_entropy(d: &PerformanceDistribution, alpha: f64) -> f64 {
    let x = d.values();
    if is_constant(x) {
        return 0.0;
    }
    let n = x.len() as f64;
    let mu = d.mean();
    let ge = if alpha.abs() < 1e-12 {
        -x.iter().map(|v| (v / mu).ln()).sum::<f64>() / n
    } else if (alpha - 1.0).abs() < 1e-12 {
        theil(d)
    } else {
        x.iter().map(|v| (v / mu).powf(alpha) - 1.0).sum::<f64>() / (n * alpha * (alpha - 1.0))
    };
    ge.max(0.0)
}

pub fn hoover(d: &PerformanceDistribution) -> f64 {
    let x = d.values();
    if is_constant(x) {
        return 0.0;
    }
    let mu = d.mean();
    let total: f64 = x.iter().sum();
    x.iter().map(|v| (v - mu).abs()).sum::<f64>() / (2.0 * total)
}

pub fn theil(d: &PerformanceDistribution) -> f64 {
    let x = d.values();
    if is_constant(x) {
        return 0.0;
    }
    let mu = d.mean();
    let t = x
        .iter()
        .map(|v| {
            let r = v / mu;
            r * r.ln()
        })
        .sum::<f64>()
        / x.len() as f64;
    t.max(0.0)
}

/// Share of the top ⌈0.1n⌉ values over the share of the bottom ⌊0.4n⌋.
pub fn palma(d: &PerformanceDistribution) -> Result<f64> {
    let n = d.len();
    if n < 10 {
        return Err(Error::TooFewValues { needed: 10, got: n });
    }
    let mut s = d.values().to_vec();
    s.sort_by(f64::total_cmp);
    let top_n = (n as f64 * 0.1).ceil() as usize;
    let bottom_n = (n as f64 * 0.4).floor() as usize;
    let top: f64 = s[n - top_n..].iter().sum();
    let bottom: f64 = s[..bottom_n].iter().sum();
    Ok(top / bottom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Index {
    Gini,
    Atkinson,
    NormalizedCov,
    GeneralizedEntropy,
    Hoover,
    Theil,
    Palma,
}

impl Index {
    pub const ALL: [Index; 7] = [
        Index::Gini,
        Index::Atkinson,
        Index::NormalizedCov,
        Index::GeneralizedEntropy,
        Index::Hoover,
        Index::Theil,
        Index::Palma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Index::Gini => "gini",
            Index::Atkinson => "atkinson",
            Index::NormalizedCov => "cov",
            Index::GeneralizedEntropy => "ge",
            Index::Hoover => "hoover",
            Index::Theil => "theil",
            Index::Palma => "palma",
        }
    }

    pub fn position(self) -> usize {
        Index::ALL.iter().position(|&i| i == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexParams {
    pub atkinson_epsilon: f64,
    pub ge_alpha: f64,
    /// Use `1/x` for hd95 and asd so every outcome is higher-is-better first.
    pub invert_distances: bool,
}

impl Default for IndexParams {
    fn default() -> Self {
        IndexParams {
            atkinson_epsilon: 0.5,
            ge_alpha: 2.0,
            invert_distances: false,
        }
    }
}

/// All seven indices; `None` where an index is undefined (palma below n = 10).
pub fn all_indices(d: &PerformanceDistribution, p: &IndexParams) -> Result<[Option<f64>; 7]> {
    Ok([
        Some(gini(d)),
        Some(atkinson(d, p.atkinson_epsilon)?),
        Some(normalized_cov(d)),
        Some(generalized_entropy(d, p.ge_alpha)),
        Some(hoover(d)),
        Some(theil(d)),
        palma(d).ok(),
    ])
}

/// One model's 7 × 28 table, indexed `[outcome][index]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityRow {
    pub model_id: String,
    pub values: Vec<[Option<f64>; 7]>,
}

impl InequalityRow {
    pub fn get(&self, outcome: Outcome, index: Index) -> Option<f64> {
        self.values[outcome.position()][index.position()]
    }
}

/// Rows sorted by model id; outcomes with no observed values stay missing.
pub fn inequality_table(records: &[MetricRecord], p: &IndexParams) -> Result<Vec<InequalityRow>> {
    let mut models: Vec<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    models.sort_unstable();
    models.dedup();
    let outcomes = Outcome::all();
    models
        .into_iter()
        .map(|m| {
            let mine: Vec<&MetricRecord> = records.iter().filter(|r| r.model_id == m).collect();
            let values = outcomes
                .iter()
                .map(|&o| {
                    let vals: Vec<f64> = mine
                        .iter()
                        .filter_map(|r| r.get(o))
                        .map(|v| {
                            if p.invert_distances && !o.metric.higher_is_better() {
                                1.0 / (v + FLOOR)
                            } else {
                                v
                            }
                        })
                        .collect();
                    if vals.is_empty() {
                        return Ok([None; 7]);
                    }
                    all_indices(&prepare(&vals)?, p)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(InequalityRow {
                model_id: m.to_string(),
                values,
            })
        })
        .collect()
}

pub fn inequality_columns() -> Vec<String> {
    Outcome::all()
        .iter()
        .flat_map(|o| Index::ALL.iter().map(move |i| format!("{}_{}", o.column(), i.as_str())))
        .collect()
}

pub fn write_inequality_csv<W: Write>(w: W, rows: &[InequalityRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["model_id".to_string()];
    header.extend(inequality_columns());
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.model_id.clone()];
        rec.extend(r.values.iter().flat_map(|v| v.iter().map(|x| fmt_opt(*x))));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<inequality csv>", e))?;
    Ok(())
}

pub fn read_inequality_csv<R: Read>(r: R) -> Result<Vec<InequalityRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let cols = inequality_columns();
    let pos: Vec<usize> = cols
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::UnknownColumn(c.clone()))
        })
        .collect::<Result<_>>()?;
    let id = headers
        .iter()
        .position(|h| h == "model_id")
        .ok_or_else(|| Error::UnknownColumn("model_id".into()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut values = vec![[None; 7]; 28];
        for (k, &p) in pos.iter().enumerate() {
            let cell = rec.get(p).unwrap_or("").trim();
            if !cell.is_empty() {
                values[k / 7][k % 7] = Some(
                    cell.parse()
                        .map_err(|_| Error::Parse(format!("{}: {cell:?}", cols[k])))?,
                );
            }
        }
        out.push(InequalityRow {
            model_id: rec.get(id).unwrap_or("").to_string(),
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(x: &[f64]) -> PerformanceDistribution {
        prepare(x).unwrap()
    }

    #[test]
    fn prepare_shift_rule() {
        let a = d(&[0.5, 0.9]);
        assert!(!a.shifted);
        assert_eq!(a.values(), &[0.5, 0.9]);
        let b = d(&[0.0, 1.0]);
        assert!(b.shifted);
        assert_eq!(b.values(), &[1e-6, 1.0 + 1e-6]);
        let c = d(&[-0.2, 0.3]);
        assert!((c.values()[0] - 1e-6).abs() < 1e-15);
        assert!((c.values()[1] - (0.5 + 1e-6)).abs() < 1e-15);
        assert!(matches!(prepare(&[]), Err(Error::EmptyInput)));
        assert!(matches!(prepare(&[1.0, f64::NAN]), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn closed_forms() {
        assert_eq!(gini(&d(&[1.0, 2.0, 3.0, 4.0])), 0.25);
        assert_eq!(hoover(&d(&[1.0, 3.0])), 0.25);
        assert_eq!(generalized_entropy(&d(&[1.0, 3.0]), 2.0), 0.125);
        assert!((atkinson(&d(&[1.0, 4.0]), 0.5).unwrap() - 0.1).abs() < 1e-15);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(palma(&d(&ten)).unwrap(), 1.0);
        assert!((normalized_cov(&d(&[1.0, 3.0])) - 1.0 / 3.0).abs() < 1e-15);
        assert!((theil(&d(&[1.0, 1.0, 4.0])) - 0.2310).abs() < 1e-4);
        assert_eq!(palma(&d(&[0.7; 10])).unwrap(), 0.25);
    }

    #[test]
    fn constants_are_zero() {
        let c = d(&[0.3; 17]);
        let all = all_indices(&c, &IndexParams::default()).unwrap();
        for v in &all[..6] {
            assert_eq!(*v, Some(0.0));
        }
        assert_eq!(atkinson(&c, 1.0).unwrap(), 0.0);
        assert_eq!(generalized_entropy(&c, 0.0), 0.0);
    }

    #[test]
    fn palma_needs_ten() {
        assert!(matches!(palma(&d(&[1.0; 9])), Err(Error::TooFewValues { .. })));
        let mut x: Vec<f64> = (1..=12).map(f64::from).collect();
        let before = palma(&d(&x)).unwrap();
        *x.last_mut().unwrap() += 1.0;
        assert!(palma(&d(&x)).unwrap() > before);
    }

    #[test]
    fn atkinson_limits() {
        let x = d(&[0.2, 0.5, 0.9, 0.4]);
        let a1 = atkinson(&x, 1.0).unwrap();
        assert!((atkinson(&x, 1.0 + 1e-7).unwrap() - a1).abs() < 1e-6);
        assert!(atkinson(&x, 0.0).is_err());
        let ge0 = generalized_entropy(&x, 0.0);
        assert!((generalized_entropy(&x, 1e-7) - ge0).abs() < 1e-6);
    }

    fn dist() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..10.0, 2..60)
    }

    proptest! {
        #[test]
        fn scale_invariant(x in dist(), c in 0.1f64..50.0) {
            let a = d(&x);
            let b = a.scaled(c);
            let p = IndexParams::default();
            let ia = all_indices(&a, &p).unwrap();
            let ib = all_indices(&b, &p).unwrap();
            for (u, v) in ia.iter().zip(&ib) {
                if let (Some(u), Some(v)) = (u, v) {
                    prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
                }
            }
        }

        #[test]
        fn replication_invariant(x in dist(), k in 2usize..4) {
            let a = d(&x);
            let b = a.replicated(k);
            prop_assert!((gini(&a) - gini(&b)).abs() < 1e-10);
            prop_assert!((theil(&a) - theil(&b)).abs() < 1e-10);
            prop_assert!((hoover(&a) - hoover(&b)).abs() < 1e-10);
            prop_assert!((atkinson(&a, 0.5).unwrap() - atkinson(&b, 0.5).unwrap()).abs() < 1e-10);
            prop_assert!((generalized_entropy(&a, 2.0) - generalized_entropy(&b, 2.0)).abs() < 1e-10);
        }

        #[test]
        fn hoover_below_gini(x in dist()) {
            let a = d(&x);
            prop_assert!(hoover(&a) <= gini(&a) + 1e-12);
        }

        #[test]
        fn ge1_is_theil(x in dist()) {
            let a = d(&x);
            prop_assert!((generalized_entropy(&a, 1.0) - theil(&a)).abs() < 1e-12);
        }

        #[test]
        fn atkinson_monotone_in_epsilon(x in dist()) {
            let a = d(&x);
            let mut prev = 0.0;
            for k in 1..=40 {
                let v = atkinson(&a, k as f64 * 0.1).unwrap();
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }

        #[test]
        fn theil_decomposes(x in dist(), split in 1usize..59) {
            let a = d(&x);
            let n = x.len();
            let s = split.min(n - 1);
            let (g1, g2) = a.values().split_at(s);
            let mu = a.mean();
            let total: f64 = a.values().iter().sum();
            let mut parts = 0.0;
            for g in [g1, g2] {
                let gd = PerformanceDistribution { values: g.to_vec(), shifted: false };
                let share: f64 = g.iter().sum::<f64>() / total;
                let mg = gd.mean();
                parts += share * theil(&gd) + share * (mg / mu).ln();
            }
            prop_assert!((theil(&a) - parts).abs() < 1e-10);
        }
    }
}
