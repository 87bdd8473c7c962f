//! Patient covariate table.
//!
//! CSV columns: `patient_id, sex{M,F}, age_years, source, who_grade{2,3,4},
//! resection{GTR,STR,Biopsy}, diagnosis, idh{mutant,wildtype}, survival_days`.
//! Unknown columns are ignored and blank cells are missing.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::design::{Covariate, Covariates};

pub const GBM_DIAGNOSIS: &str = "Glioblastoma, IDH-wildtype";

pub const COHORT_COLUMNS: [&str; 9] = [
    "patient_id",
    "sex",
    "age_years",
    "source",
    "who_grade",
    "resection",
    "diagnosis",
    "idh",
    "survival_days",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resection {
    GTR,
    STR,
    Biopsy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Idh {
    Mutant,
    Wildtype,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
        }
    }
}

impl Resection {
    pub fn as_str(self) -> &'static str {
        match self {
            Resection::GTR => "GTR",
            Resection::STR => "STR",
            Resection::Biopsy => "Biopsy",
        }
    }
}

impl Idh {
    pub fn as_str(self) -> &'static str {
        match self {
            Idh::Mutant => "mutant",
            Idh::Wildtype => "wildtype",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: String,
    pub sex: Option<Sex>,
    pub age_years: Option<f64>,
    pub source: Option<String>,
    pub who_grade: Option<u8>,
    pub resection: Option<Resection>,
    pub diagnosis: Option<String>,
    pub idh: Option<Idh>,
    pub survival_days: Option<f64>,
}

impl CohortRow {
    pub fn new(patient_id: impl Into<String>) -> Self {
        CohortRow {
            patient_id: patient_id.into(),
            sex: None,
            age_years: None,
            source: None,
            who_grade: None,
            resection: None,
            diagnosis: None,
            idh: None,
            survival_days: None,
        }
    }

    pub fn is_gbm(&self) -> Option<bool> {
        self.diagnosis.as_deref().map(|d| d == GBM_DIAGNOSIS)
    }
}

impl Covariates for CohortRow {
    fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>> {
        let cat = |s: &'static str| Some(Covariate::Cat(Cow::Borrowed(s)));
        Ok(match name {
            "sex" => self.sex.and_then(|s| cat(s.as_str())),
            "age_years" => self.age_years.map(Covariate::Num),
            "source" => self.source.as_deref().map(|s| Covariate::Cat(Cow::Borrowed(s))),
            "who_grade" => self.who_grade.map(|g| Covariate::Cat(Cow::Owned(g.to_string()))),
            "resection" => self.resection.and_then(|r| cat(r.as_str())),
            "diagnosis" => self.diagnosis.as_deref().map(|s| Covariate::Cat(Cow::Borrowed(s))),
            "idh" => self.idh.and_then(|i| cat(i.as_str())),
            "survival_days" => self.survival_days.map(Covariate::Num),
            other => return Err(Error::UnknownColumn(other.to_string())),
        })
    }
}

fn parse_cell<T>(cell: &str, column: &str, f: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    f(cell)
        .map(Some)
        .ok_or_else(|| Error::Parse(format!("column {column}: cannot parse {cell:?}")))
}

pub fn read_cohort_csv<R: Read>(r: R) -> Result<Vec<CohortRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let pos: BTreeMap<&str, usize> = COHORT_COLUMNS
        .iter()
        .filter_map(|&c| headers.iter().position(|h| h.trim() == c).map(|i| (c, i)))
        .collect();
    if !pos.contains_key("patient_id") {
        return Err(Error::UnknownColumn("patient_id".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |c: &str| pos.get(c).and_then(|&i| rec.get(i)).unwrap_or("");
        let mut row = CohortRow::new(get("patient_id").trim());
        row.sex = parse_cell(get("sex"), "sex", |s| match s {
            "M" | "m" | "male" | "Male" => Some(Sex::M),
            "F" | "f" | "female" | "Female" => Some(Sex::F),
            _ => None,
        })?;
        row.age_years = parse_cell(get("age_years"), "age_years", |s| s.parse().ok())?;
        row.source = parse_cell(get("source"), "source", |s| Some(s.to_string()))?;
        row.who_grade = parse_cell(get("who_grade"), "who_grade", |s| {
            s.parse::<f64>()
                .ok()
                .filter(|g| [2.0, 3.0, 4.0].contains(g))
                .map(|g| g as u8)
        })?;
        row.resection = parse_cell(get("resection"), "resection", |s| match s.to_ascii_lowercase().as_str() {
            "gtr" => Some(Resection::GTR),
            "str" => Some(Resection::STR),
            "biopsy" => Some(Resection::Biopsy),
            _ => None,
        })?;
        row.diagnosis = parse_cell(get("diagnosis"), "diagnosis", |s| Some(s.to_string()))?;
        row.idh = parse_cell(get("idh"), "idh", |s| match s.to_ascii_lowercase().as_str() {
            "mutant" => Some(Idh::Mutant),
            "wildtype" => Some(Idh::Wildtype),
            _ => None,
        })?;
        row.survival_days = parse_cell(get("survival_days"), "survival_days", |s| s.parse().ok())?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_cohort_csv<W: Write>(w: W, rows: &[CohortRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(COHORT_COLUMNS)?;
    let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        wtr.write_record([
            r.patient_id.clone(),
            r.sex.map(|s| s.as_str().to_string()).unwrap_or_default(),
            num(r.age_years),
            r.source.clone().unwrap_or_default(),
            r.who_grade.map(|g| g.to_string()).unwrap_or_default(),
            r.resection.map(|x| x.as_str().to_string()).unwrap_or_default(),
            r.diagnosis.clone().unwrap_or_default(),
            r.idh.map(|i| i.as_str().to_string()).unwrap_or_default(),
            num(r.survival_days),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<cohort csv>", e))?;
    Ok(())
}
