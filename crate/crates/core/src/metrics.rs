//! Per-compartment segmentation metrics and the 28-value metric record.
//!
//! Boundary voxels are foreground voxels with at least one background
//! 6-neighbour; the volume border counts as background. Surface distances are
//! spacing-scaled Euclidean distances between boundary voxel centres, found
//! with an exact separable distance transform.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::descriptive::{mean, percentile_linear};
use crate::volume::{extract_compartments, Compartment, CompartmentMask, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Sensitivity,
    Precision,
    Hd95,
    Nsd1mm,
    Asd,
    VolSim,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Dice,
        Metric::Sensitivity,
        Metric::Precision,
        Metric::Hd95,
        Metric::Nsd1mm,
        Metric::Asd,
        Metric::VolSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Sensitivity => "sensitivity",
            Metric::Precision => "precision",
            Metric::Hd95 => "hd95",
            Metric::Nsd1mm => "nsd1mm",
            Metric::Asd => "asd",
            Metric::VolSim => "volsim",
        }
    }

    /// Distances in mm are lower-is-better; everything else is a [0,1] score.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Hd95 | Metric::Asd)
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "");
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown metric {s:?}")))
    }
}

/// One of the 28 (compartment, metric) outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub compartment: Compartment,
    pub metric: Metric,
}

impl Outcome {
    pub fn new(compartment: Compartment, metric: Metric) -> Self {
        Outcome { compartment, metric }
    }

    /// All 28 outcomes, compartment-major in `WT, NET, ET, OED` order.
    pub fn all() -> Vec<Outcome> {
        Compartment::ALL
            .into_iter()
            .flat_map(|c| Metric::ALL.into_iter().map(move |m| Outcome::new(c, m)))
            .collect()
    }

    pub fn column(self) -> String {
        format!("{}_{}", self.compartment, self.metric)
    }

    pub fn position(self) -> usize {
        self.compartment.position() * 7 + self.metric.position()
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.compartment, self.metric)
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, m) = s
            .split_once('_')
            .ok_or_else(|| Error::Parse(format!("outcome {s:?} is not COMPARTMENT_metric")))?;
        Ok(Outcome::new(c.parse()?, m.parse()?))
    }
}

/// 28 performance values for one patient-model pair. `None` is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub patient_id: String,
    pub model_id: String,
    pub values: [[Option<f64>; 7]; 4],
}

impl MetricRecord {
    pub fn empty(patient_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        MetricRecord {
            patient_id: patient_id.into(),
            model_id: model_id.into(),
            values: [[None; 7]; 4],
        }
    }

    pub fn get(&self, o: Outcome) -> Option<f64> {
        self.values[o.compartment.position()][o.metric.position()]
    }

    pub fn set(&mut self, o: Outcome, v: Option<f64>) {
        self.values[o.compartment.position()][o.metric.position()] = v;
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub sensitivity: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &CompartmentMask, gt: &CompartmentMask) -> Result<Confusion> {
    pred.volume.check_grid(&gt.volume)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// Dice, sensitivity and precision. Returns `None` when both masks are empty;
/// a vanishing denominator with one side nonempty scores 0.
pub fn overlap_metrics(pred: &CompartmentMask, gt: &CompartmentMask) -> Result<Option<Overlap>> {
    let c = confusion(pred, gt)?;
    Ok(overlap_from_confusion(c))
}

pub fn overlap_from_confusion(c: Confusion) -> Option<Overlap> {
    let Confusion { tp, fp, fn_ } = c;
    if tp + fp + fn_ == 0 {
        return None;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Some(Overlap {
        dice: ratio(2 * tp, 2 * tp + fp + fn_),
        sensitivity: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
    })
}

pub fn boundary_voxels(m: &CompartmentMask) -> Vec<usize> {
    let v = &m.volume;
    let [nx, ny, nz] = v.dims;
    let bits = m.bits();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = v.index(x, y, z);
                if bits[i] == 0 {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                if edge
                    || bits[i - 1] == 0
                    || bits[i + 1] == 0
                    || bits[i - nx] == 0
                    || bits[i + nx] == 0
                    || bits[i - nx * ny] == 0
                    || bits[i + nx * ny] == 0
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let xq = q as f64 * s;
        let mut boundary = f64::NEG_INFINITY;
        while k >= 0 {
            let p = v[k as usize];
            let xp = p as f64 * s;
            let inter = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * s * s * (q - p) as f64);
            if inter <= z[k as usize] {
                k -= 1;
            } else {
                boundary = inter;
                break;
            }
        }
        k += 1;
        v[k as usize] = q;
        z[k as usize] = boundary;
        z[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let t = (q as f64 - v[j] as f64) * s;
        *o = t * t + f[v[j]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest site.
pub fn squared_distance_transform(dims: [usize; 3], spacing: [f64; 3], sites: &[usize]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut g = vec![f64::INFINITY; n];
    for &i in sites {
        g[i] = 0.0;
    }
    let maxd = *dims.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; maxd];
    let mut out = vec![0.0; maxd];
    let mut v = vec![0usize; maxd];
    let mut z = vec![0.0; maxd + 1];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                for t in 0..len {
                    line[t] = g[base + t * stride];
                }
                edt_line(&line[..len], spacing[axis], &mut out[..len], &mut v, &mut z);
                for t in 0..len {
                    g[base + t * stride] = out[t];
                }
            }
        }
    }
    g
}

/// Directed boundary-distance multisets `(pred→gt, gt→pred)` in mm.
pub fn surface_distances(pred: &CompartmentMask, gt: &CompartmentMask) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.volume.check_grid(&gt.volume)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dims = pred.volume.dims;
    let sp = pred.volume.spacing.map(|s| s as f64);
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    let to_gt = squared_distance_transform(dims, sp, &bg);
    let to_pred = squared_distance_transform(dims, sp, &bp);
    let a = bp.iter().map(|&i| to_gt[i].sqrt()).collect();
    let b = bg.iter().map(|&i| to_pred[i].sqrt()).collect();
    Ok((a, b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceMetrics {
    pub hd95: f64,
    pub asd: f64,
    pub nsd: f64,
}

pub const NSD_TOLERANCE_MM: f64 = 1.0;

pub fn distance_metrics(pred_to_gt: &[f64], gt_to_pred: &[f64], tolerance_mm: f64) -> Result<DistanceMetrics> {
    if pred_to_gt.is_empty() || gt_to_pred.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut pooled: Vec<f64> = pred_to_gt.iter().chain(gt_to_pred).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let within = pooled.iter().filter(|&&d| d <= tolerance_mm).count();
    Ok(DistanceMetrics {
        hd95: percentile_linear(&pooled, 95.0),
        asd: mean(&pooled),
        nsd: within as f64 / pooled.len() as f64,
    })
}

/// `1 - |Vp - Vg| / (Vp + Vg)` on voxel counts.
pub fn volume_similarity(pred: &CompartmentMask, gt: &CompartmentMask) -> Result<f64> {
    pred.volume.check_grid(&gt.volume)?;
    volume_similarity_counts(pred.count(), gt.count())
}

pub fn volume_similarity_counts(vp: usize, vg: usize) -> Result<f64> {
    if vp + vg == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(1.0 - (vp as f64 - vg as f64).abs() / (vp + vg) as f64)
}

/// All seven metrics for one compartment. Missing entries follow the
/// empty-mask conventions: both empty leaves everything missing; one side
/// empty gives zero overlap, formula volume similarity and missing distances.
pub fn compartment_metrics(pred: &CompartmentMask, gt: &CompartmentMask) -> Result<[Option<f64>; 7]> {
    let c = confusion(pred, gt)?;
    let mut out = [None; 7];
    let Some(ov) = overlap_from_confusion(c) else {
        return Ok(out);
    };
    out[Metric::Dice.position()] = Some(ov.dice);
    out[Metric::Sensitivity.position()] = Some(ov.sensitivity);
    out[Metric::Precision.position()] = Some(ov.precision);
    out[Metric::VolSim.position()] = Some(volume_similarity_counts(c.tp + c.fp, c.tp + c.fn_)?);
    if !pred.is_empty() && !gt.is_empty() {
        let (a, b) = surface_distances(pred, gt)?;
        let d = distance_metrics(&a, &b, NSD_TOLERANCE_MM)?;
        out[Metric::Hd95.position()] = Some(d.hd95);
        out[Metric::Asd.position()] = Some(d.asd);
        out[Metric::Nsd1mm.position()] = Some(d.nsd);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    pub record: MetricRecord,
    /// Ground truth carries oedema and nothing else.
    pub oedema_only_gt: bool,
}

pub fn is_oedema_only(gt: &[CompartmentMask; 4]) -> bool {
    !gt[Compartment::OED.position()].is_empty()
        && gt[Compartment::NET.position()].is_empty()
        && gt[Compartment::ET.position()].is_empty()
}

/// Evaluate a predicted label volume against ground truth. A model that
/// does not segment NET (`two_class`) gets its seven NET entries left missing.
pub fn evaluate_case(
    pred_labels: &Volume,
    gt_labels: &Volume,
    patient_id: &str,
    model_id: &str,
    label_map: &LabelMap,
    two_class: bool,
) -> Result<CaseEvaluation> {
    pred_labels.check_grid(gt_labels)?;
    let pred = extract_compartments(pred_labels, label_map)?;
    let gt = extract_compartments(gt_labels, label_map)?;
    let mut record = MetricRecord::empty(patient_id, model_id);
    for comp in Compartment::ALL {
        if two_class && comp == Compartment::NET {
            continue;
        }
        let k = comp.position();
        record.values[k] = compartment_metrics(&pred[k], &gt[k])?;
    }
    Ok(CaseEvaluation {
        record,
        oedema_only_gt: is_oedema_only(&gt),
    })
}

pub fn metric_columns() -> Vec<String> {
    let mut cols = vec!["patient_id".to_string(), "model_id".to_string()];
    cols.extend(Outcome::all().into_iter().map(Outcome::column));
    cols
}

/// Shortest round-tripping decimal form; missing values are empty cells.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(w: W, records: &[MetricRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(metric_columns())?;
    for r in records {
        let mut row = vec![r.patient_id.clone(), r.model_id.clone()];
        row.extend(Outcome::all().into_iter().map(|o| fmt_opt(r.get(o))));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let pid = col("patient_id")?;
    let mid = col("model_id")?;
    let outcome_cols: Vec<(Outcome, usize)> = Outcome::all()
        .into_iter()
        .map(|o| Ok((o, col(&o.column())?)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let mut rec = MetricRecord::empty(&row[pid], &row[mid]);
        for &(o, c) in &outcome_cols {
            let cell = row[c].trim();
            if !cell.is_empty() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad value {cell:?} in column {o}")))?;
                rec.set(o, if v.is_nan() { None } else { Some(v) });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
