//! Design matrices with dummy-coded categoricals and z-scored continuous columns.

use std::borrow::Cow;
use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::standardize::zscore;

#[derive(Debug, Clone, PartialEq)]
pub enum Covariate<'a> {
    Num(f64),
    Cat(Cow<'a, str>),
}

/// Named covariate lookup. `Ok(None)` is a missing value; an unknown name is an error.
pub trait Covariates {
    fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>>;
}

impl<T: Covariates + ?Sized> Covariates for &T {
    fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>> {
        (**self).covariate(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Continuous {
        column: String,
        label: String,
        zscore: bool,
    },
    /// One 0/1 dummy per declared level against `reference`. Values that are
    /// neither fold into `other` when it is set, else raise `UnknownLevel`.
    Categorical {
        column: String,
        reference: String,
        levels: Vec<(String, String)>,
        other: Option<String>,
    },
}

impl Term {
    pub fn continuous(column: &str, label: &str) -> Self {
        Term::Continuous {
            column: column.into(),
            label: label.into(),
            zscore: true,
        }
    }

    pub fn categorical(column: &str, reference: &str, levels: &[(&str, &str)]) -> Self {
        Term::Categorical {
            column: column.into(),
            reference: reference.into(),
            levels: levels.iter().map(|(l, n)| (l.to_string(), n.to_string())).collect(),
            other: None,
        }
    }

    fn column(&self) -> Option<&str> {
        match self {
            Term::Intercept => None,
            Term::Continuous { column, .. } | Term::Categorical { column, .. } => Some(column),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub terms: Vec<Term>,
    /// Drop all-constant dummy columns instead of failing with `RankDeficient`.
    pub prune_constant: bool,
}

impl PredictorSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        PredictorSpec {
            terms,
            prune_constant: false,
        }
    }

    /// Intercept plus the eight fixed-effect columns used for the cohort models:
    /// Sex[M], Age(z), Source[UPENN-GBM], Grade[3], Grade[4], Resection[STR],
    /// Resection[Biopsy], Diagnosis[Non-GBM].
    pub fn cohort_layout() -> Self {
        PredictorSpec::new(vec![
            Term::Intercept,
            Term::categorical("sex", "F", &[("M", "Sex[M]")]),
            Term::continuous("age_years", "Age(z)"),
            Term::categorical("source", "UCSF-PDGM", &[("UPENN-GBM", "Source[UPENN-GBM]")]),
            Term::categorical("who_grade", "2", &[("3", "Grade[3]"), ("4", "Grade[4]")]),
            Term::categorical(
                "resection",
                "GTR",
                &[("STR", "Resection[STR]"), ("Biopsy", "Resection[Biopsy]")],
            ),
            Term::Categorical {
                column: "diagnosis".into(),
                reference: crate::cohort::GBM_DIAGNOSIS.into(),
                levels: vec![],
                other: Some("Diagnosis[Non-GBM]".into()),
            },
        ])
    }

    /// Column names the cohort layout produces when nothing is pruned.
    pub fn cohort_layout_names() -> Vec<String> {
        Self::cohort_layout().column_names()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.terms
            .iter()
            .flat_map(|t| match t {
                Term::Intercept => vec!["Intercept".to_string()],
                Term::Continuous { label, .. } => vec![label.clone()],
                Term::Categorical { levels, other, .. } => levels
                    .iter()
                    .map(|(_, l)| l.clone())
                    .chain(other.iter().cloned())
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
    /// Indices of the input rows that made it into the matrix.
    pub rows: Vec<usize>,
    pub dropped: usize,
    pub reference_levels: BTreeMap<String, String>,
    pub pruned: Vec<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Numerical rank from singular values with a relative tolerance.
    pub fn rank(&self) -> usize {
        matrix_rank(&self.x)
    }
}

pub fn matrix_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-10 * (x.nrows().max(x.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn build_design<R: Covariates>(rows: &[R], spec: &PredictorSpec) -> Result<DesignMatrix> {
    let columns: Vec<&str> = spec.terms.iter().filter_map(Term::column).collect();
    let mut kept = Vec::new();
    'rows: for (i, r) in rows.iter().enumerate() {
        for c in &columns {
            if r.covariate(c)?.is_none() {
                continue 'rows;
            }
        }
        kept.push(i);
    }
    let n = kept.len();
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut reference_levels = BTreeMap::new();
    for term in &spec.terms {
        match term {
            Term::Intercept => {
                names.push("Intercept".to_string());
                cols.push(vec![1.0; n]);
            }
            Term::Continuous { column, label, zscore: z } => {
                let vals = kept
                    .iter()
                    .map(|&i| match rows[i].covariate(column)? {
                        Some(Covariate::Num(v)) => Ok(v),
                        Some(Covariate::Cat(s)) => s.parse::<f64>().map_err(|_| Error::Parse(format!(
                            "column {column}: {s:?} is not numeric"
                        ))),
                        None => unreachable!("missing rows were dropped"),
                    })
                    .collect::<Result<Vec<f64>>>()?;
                names.push(label.clone());
                cols.push(if *z { zscore(&vals)? } else { vals });
            }
            Term::Categorical {
                column,
                reference,
                levels,
                other,
            } => {
                reference_levels.insert(column.clone(), reference.clone());
                let mut dummies = vec![vec![0.0; n]; levels.len() + usize::from(other.is_some())];
                for (k, &i) in kept.iter().enumerate() {
                    let value = match rows[i].covariate(column)? {
                        Some(Covariate::Cat(s)) => s.into_owned(),
                        Some(Covariate::Num(v)) => format!("{v}"),
                        None => unreachable!("missing rows were dropped"),
                    };
                    if &value == reference {
                        continue;
                    }
                    if let Some(j) = levels.iter().position(|(l, _)| *l == value) {
                        dummies[j][k] = 1.0;
                    } else if other.is_some() {
                        dummies[levels.len()][k] = 1.0;
                    } else {
                        return Err(Error::UnknownLevel {
                            column: column.clone(),
                            level: value,
                        });
                    }
                }
                names.extend(levels.iter().map(|(_, label)| label.clone()));
                names.extend(other.iter().cloned());
                cols.extend(dummies);
            }
        }
    }
    let mut pruned = Vec::new();
    let mut j = 0;
    while j < cols.len() {
        let constant = names[j] != "Intercept" && cols[j].windows(2).all(|w| w[0] == w[1]);
        if constant {
            let is_dummy = !spec.terms.iter().any(|t| matches!(t, Term::Continuous { label, .. } if *label == names[j]));
            if spec.prune_constant && is_dummy {
                pruned.push(names.remove(j));
                cols.remove(j);
                continue;
            }
            return Err(Error::RankDeficient(format!("column {} is constant", names[j])));
        }
        j += 1;
    }
    let x = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    let design = DesignMatrix {
        names,
        x,
        rows: kept,
        dropped: rows.len() - n,
        reference_levels,
        pruned,
    };
    if n < design.n_cols() || design.rank() < design.n_cols() {
        return Err(Error::RankDeficient(format!(
            "rank {} < {} columns over {} rows",
            design.rank(),
            design.n_cols(),
            n
        )));
    }
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CohortRow, Resection, Sex, GBM_DIAGNOSIS};

    fn row(i: usize) -> CohortRow {
        let mut r = CohortRow::new(format!("P{i:03}"));
        r.sex = Some(if i % 2 == 0 { Sex::M } else { Sex::F });
        r.age_years = Some(30.0 + (i * 7 % 50) as f64);
        r.source = Some(if i % 3 == 0 { "UPENN-GBM" } else { "UCSF-PDGM" }.into());
        r.who_grade = Some([2, 3, 4, 4, 4][i % 5]);
        r.resection = Some([Resection::GTR, Resection::STR, Resection::Biopsy, Resection::GTR][i % 4]);
        r.diagnosis = Some(if i % 7 == 0 { "Astrocytoma, IDH-mutant".into() } else { GBM_DIAGNOSIS.into() });
        r
    }

    #[test]
    fn cohort_layout_has_nine_columns() {
        let rows: Vec<CohortRow> = (0..40).map(row).collect();
        let d = build_design(&rows, &PredictorSpec::cohort_layout()).unwrap();
        assert_eq!(d.n_cols(), 9);
        assert_eq!(
            d.names,
            vec![
                "Intercept",
                "Sex[M]",
                "Age(z)",
                "Source[UPENN-GBM]",
                "Grade[3]",
                "Grade[4]",
                "Resection[STR]",
                "Resection[Biopsy]",
                "Diagnosis[Non-GBM]"
            ]
        );
        assert_eq!(d.reference_levels["resection"], "GTR");
        let age = d.x.column(2);
        assert!(age.mean().abs() < 1e-12);
    }

    #[test]
    fn missing_covariates_are_dropped_and_counted() {
        let mut rows: Vec<CohortRow> = (0..576).map(row).collect();
        for r in rows.iter_mut().take(7) {
            r.resection = None;
        }
        let d = build_design(&rows, &PredictorSpec::cohort_layout()).unwrap();
        assert_eq!(d.dropped, 7);
        assert_eq!(d.n_rows(), 569);
        assert_eq!(d.rows[0], 7);
    }

    #[test]
    fn all_female_is_rank_deficient() {
        let rows: Vec<CohortRow> = (0..30)
            .map(|i| CohortRow { sex: Some(Sex::F), ..row(i) })
            .collect();
        let err = build_design(&rows, &PredictorSpec::cohort_layout()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(ref m) if m.contains("Sex[M]")));

        let mut spec = PredictorSpec::cohort_layout();
        spec.prune_constant = true;
        let d = build_design(&rows, &spec).unwrap();
        assert_eq!(d.pruned, vec!["Sex[M]".to_string()]);
    }

    #[test]
    fn unknown_level() {
        let mut rows: Vec<CohortRow> = (0..20).map(row).collect();
        rows[3].source = Some("TCGA".into());
        assert!(matches!(
            build_design(&rows, &PredictorSpec::cohort_layout()),
            Err(Error::UnknownLevel { .. })
        ));
    }

    #[test]
    fn collinear_columns_detected() {
        struct R(f64);
        impl Covariates for R {
            fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>> {
                match name {
                    "a" => Ok(Some(Covariate::Num(self.0))),
                    "b" => Ok(Some(Covariate::Num(2.0 * self.0 + 1.0))),
                    _ => Err(Error::UnknownColumn(name.into())),
                }
            }
        }
        let rows: Vec<R> = (0..10).map(|i| R(i as f64)).collect();
        let spec = PredictorSpec::new(vec![Term::Intercept, Term::continuous("a", "a"), Term::continuous("b", "b")]);
        assert!(matches!(build_design(&rows, &spec), Err(Error::RankDeficient(_))));
    }
}
