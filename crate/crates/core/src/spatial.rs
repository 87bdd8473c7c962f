//! Lesion-location effects on performance: one voxel GLM per model, pooled
//! across models with a DerSimonian-Laird random-effects model.
//!
//! Each model's z map is treated as one study with unit within-study
//! variance, so at a voxel with `k` contributing maps
//!
//! ```text
//! Q = Σ (z_i − z̄)²,  τ² = max(0, (Q − (k−1)) / (k−1)),
//! z_DL = z̄ / sqrt((1 + τ²) / k),  I² = max(0, (Q − (k−1)) / Q) · 100
//! ```

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortRow;
use crate::error::{Error, Result};
use crate::stats::descriptive::{median, percentile, percentile_linear};
use crate::stats::design::{build_design, Covariate, Covariates, PredictorSpec, Term};
use crate::stats::fdr::bh_fdr;
use crate::stats::glm::{mass_univariate_glm, two_sided_p, ZMap};
use crate::stats::rng;
use crate::stats::smooth::smooth_grid;
use crate::volume::{CompartmentMask, Grid, Volume};

pub const PERF_COLUMN: &str = "Perf(z)";

/// Performance joined to one patient's covariates.
struct PerfRow<'a> {
    row: &'a CohortRow,
    perf: Option<f64>,
}

impl Covariates for PerfRow<'_> {
    fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>> {
        match name {
            "perf" => Ok(self.perf.map(Covariate::Num)),
            other => self.row.covariate(other),
        }
    }
}

/// Intercept, performance and the nuisance covariates age, sex, diagnosis,
/// resection, source and survival. Dummies that are constant in the data are
/// pruned rather than failing the fit.
pub fn spatial_design_spec() -> PredictorSpec {
    let mut spec = PredictorSpec::new(vec![
        Term::Intercept,
        Term::continuous("perf", PERF_COLUMN),
        Term::continuous("age_years", "Age(z)"),
        Term::categorical("sex", "F", &[("M", "Sex[M]")]),
        Term::Categorical {
            column: "diagnosis".into(),
            reference: crate::cohort::GBM_DIAGNOSIS.into(),
            levels: vec![],
            other: Some("Diagnosis[Non-GBM]".into()),
        },
        Term::categorical(
            "resection",
            "GTR",
            &[("STR", "Resection[STR]"), ("Biopsy", "Resection[Biopsy]")],
        ),
        Term::categorical("source", "UCSF-PDGM", &[("UPENN-GBM", "Source[UPENN-GBM]")]),
        Term::continuous("survival_days", "Survival(z)"),
    ]);
    spec.prune_constant = true;
    spec
}

/// Smooth binary masks once at ingestion.
pub fn smooth_masks(masks: &[CompartmentMask], fwhm_mm: f64) -> Result<(Grid, Vec<Vec<f32>>)> {
    let first = masks.first().ok_or(Error::EmptyInput)?;
    let grid = first.volume.grid();
    for m in masks {
        first.volume.check_grid(&m.volume)?;
    }
    let spacing = grid.spacing.map(f64::from);
    let images = masks
        .par_iter()
        .map(|m| {
            let data: Vec<f64> = m.bits().iter().map(|&b| b as f64).collect();
            smooth_grid(grid.dims, spacing, &data, fwhm_mm)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        })
        .collect();
    Ok((grid, images))
}

/// Voxel GLM of smoothed lesion images on performance plus covariates, one
/// image per cohort row. The contrast is the performance column.
pub fn per_model_spatial_glm<O: AsRef<[f32]> + Sync>(
    images: &[O],
    grid: &Grid,
    perf: &[Option<f64>],
    cohort: &[CohortRow],
    spec: &PredictorSpec,
    mask: Option<&[bool]>,
) -> Result<ZMap> {
    if images.len() != cohort.len() || perf.len() != cohort.len() {
        return Err(Error::InvalidParameter(format!(
            "{} images, {} performance values and {} cohort rows",
            images.len(),
            perf.len(),
            cohort.len()
        )));
    }
    let rows: Vec<PerfRow> = cohort.iter().zip(perf).map(|(row, &perf)| PerfRow { row, perf }).collect();
    let design = build_design(&rows, spec)?;
    let kept: Vec<&[f32]> = design.rows.iter().map(|&i| images[i].as_ref()).collect();
    mass_univariate_glm(&kept, grid, &design, PERF_COLUMN, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermSummary {
    pub observed_max: f64,
    pub null_p95: f64,
    pub fwe_p: f64,
    pub n_perm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub pooled: ZMap,
    pub tau2: Vec<f64>,
    pub q: Vec<f64>,
    /// Percent.
    pub i2: Vec<f64>,
    pub k: Vec<u16>,
    pub fdr_mask: Vec<bool>,
    pub fdr_threshold: Option<f64>,
    pub perm: Option<PermSummary>,
}

impl MetaResult {
    pub fn n_significant(&self) -> usize {
        self.fdr_mask.iter().filter(|&&s| s).count()
    }

    pub fn volume(&self, values: &[f64]) -> Result<Volume> {
        let data = values
            .iter()
            .zip(&self.pooled.mask)
            .map(|(&v, &m)| if m && v.is_finite() { v as f32 } else { 0.0 })
            .collect();
        self.pooled.grid.volume_f32(data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlCell {
    pub z: f64,
    pub q: f64,
    pub tau2: f64,
    pub i2: f64,
}

/// Pool `k ≥ 2` unit-variance z values.
pub fn dl_pool(z: &[f64]) -> DlCell {
    let k = z.len() as f64;
    let zbar = z.iter().sum::<f64>() / k;
    let q: f64 = z.iter().map(|v| (v - zbar) * (v - zbar)).sum();
    dl_from_moments(zbar, q, k)
}

#[inline]
fn dl_from_moments(zbar: f64, q: f64, k: f64) -> DlCell {
    let df = k - 1.0;
    let tau2 = ((q - df) / df).max(0.0);
    let i2 = if q > 0.0 { ((q - df) / q).max(0.0) * 100.0 } else { 0.0 };
    DlCell {
        z: zbar / ((1.0 + tau2) / k).sqrt(),
        q: q.max(0.0),
        tau2,
        i2,
    }
}

fn check_maps(zmaps: &[ZMap]) -> Result<&Grid> {
    let first = zmaps.first().ok_or(Error::TooFewStudies(0))?;
    if zmaps.len() < 2 {
        return Err(Error::TooFewStudies(zmaps.len()));
    }
    if zmaps.iter().any(|m| m.grid != first.grid || m.z.len() != first.z.len()) {
        return Err(Error::GridMismatch("z maps are on different grids".into()));
    }
    Ok(&first.grid)
}

/// Voxel-wise random-effects pooling with BH-FDR over voxels where at least
/// two maps contribute.
pub fn dersimonian_laird(zmaps: &[ZMap], alpha: f64) -> Result<MetaResult> {
    let grid = check_maps(zmaps)?;
    let n = grid.len();
    let cells: Vec<(u16, Option<DlCell>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let z: Vec<f64> = zmaps
                .iter()
                .filter(|m| m.mask[j] && m.z[j].is_finite())
                .map(|m| m.z[j])
                .collect();
            let k = z.len() as u16;
            (k, (z.len() >= 2).then(|| dl_pool(&z)))
        })
        .collect();
    let mask: Vec<bool> = cells.iter().map(|c| c.1.is_some()).collect();
    let get = |f: fn(&DlCell) -> f64| -> Vec<f64> { cells.iter().map(|c| c.1.as_ref().map_or(f64::NAN, f)).collect() };
    let z = get(|c| c.z);
    let p: Vec<Option<f64>> = z.iter().zip(&mask).map(|(&z, &m)| m.then(|| two_sided_p(z))).collect();
    let bh = bh_fdr(&p, alpha);
    Ok(MetaResult {
        pooled: ZMap {
            grid: grid.clone(),
            z,
            mask,
            df: f64::INFINITY,
        },
        tau2: get(|c| c.tau2),
        q: get(|c| c.q),
        i2: get(|c| c.i2),
        k: cells.iter().map(|c| c.0).collect(),
        fdr_mask: bh.significant,
        fdr_threshold: bh.threshold,
        perm: None,
    })
}

/// Studies × voxels layout over the meta mask, zero where a study is absent.
struct Stack {
    z: Vec<Vec<f64>>,
    k: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Stack {
    fn new(zmaps: &[ZMap]) -> Self {
        let n = zmaps[0].z.len();
        let present = |m: &ZMap, j: usize| m.mask[j] && m.z[j].is_finite();
        let cols: Vec<usize> = (0..n).filter(|&j| zmaps.iter().filter(|m| present(m, j)).count() >= 2).collect();
        let z: Vec<Vec<f64>> = zmaps
            .iter()
            .map(|m| cols.iter().map(|&j| if present(m, j) { m.z[j] } else { 0.0 }).collect())
            .collect();
        let k = cols.iter().map(|&j| zmaps.iter().filter(|m| present(m, j)).count() as f64).collect();
        let sum_sq = (0..cols.len()).map(|c| z.iter().map(|row| row[c] * row[c]).sum()).collect();
        Stack { z, k, sum_sq }
    }

    /// Max |z_DL| after multiplying study `i` by `signs[i]`. The sum of squares
    /// is sign-invariant, so only the signed sum changes.
    fn max_abs(&self, signs: &[f64]) -> f64 {
        let v = self.k.len();
        let mut sum = vec![0.0; v];
        for (row, &s) in self.z.iter().zip(signs) {
            for (acc, &z) in sum.iter_mut().zip(row) {
                *acc += s * z;
            }
        }
        (0..v)
            .map(|c| {
                let k = self.k[c];
                let zbar = sum[c] / k;
                let q = self.sum_sq[c] - k * zbar * zbar;
                dl_from_moments(zbar, q, k).z.abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Max-statistic sign-flip test over the whole meta mask. Permutation `i`
/// draws its signs from stream `(seed, i)`.
pub fn sign_flip_permutation(zmaps: &[ZMap], n_perm: usize, seed: u64) -> Result<PermSummary> {
    check_maps(zmaps)?;
    if n_perm == 0 {
        return Err(Error::InvalidParameter("n_perm must be positive".into()));
    }
    let stack = Stack::new(zmaps);
    let observed_max = stack.max_abs(&vec![1.0; zmaps.len()]);
    let mut null: Vec<f64> = (0..n_perm as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i);
            let signs: Vec<f64> = (0..zmaps.len()).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
            stack.max_abs(&signs)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    let exceed = null.iter().filter(|&&v| v >= observed_max).count();
    Ok(PermSummary {
        observed_max,
        null_p95: percentile_linear(&null, 95.0),
        fwe_p: (1 + exceed) as f64 / (n_perm + 1) as f64,
        n_perm,
    })
}

/// Sign of each voxel after BH-FDR over the map's own mask: +1, −1 or 0.
pub fn threshold_signs(z: &ZMap, alpha: f64) -> Vec<i8> {
    let p: Vec<Option<f64>> = z.p_values();
    let bh = bh_fdr(&p, alpha);
    z.z.iter()
        .zip(&bh.significant)
        .map(|(&v, &s)| if !s { 0 } else if v > 0.0 { 1 } else { -1 })
        .collect()
}

/// (positive − negative) / k per voxel, with `k` the maps covering the voxel.
pub fn prevalence_map(zmaps: &[ZMap], alpha: f64) -> Result<Vec<f64>> {
    let grid = &zmaps.first().ok_or(Error::TooFewStudies(0))?.grid;
    if zmaps.iter().any(|m| m.grid != *grid) {
        return Err(Error::GridMismatch("z maps are on different grids".into()));
    }
    let signs: Vec<Vec<i8>> = zmaps.par_iter().map(|z| threshold_signs(z, alpha)).collect();
    Ok(prevalence_from_signs(&signs, &zmaps.iter().map(|m| m.mask.as_slice()).collect::<Vec<_>>(), grid.len()))
}

pub fn prevalence_from_signs(signs: &[Vec<i8>], masks: &[&[bool]], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let k = masks.iter().filter(|m| m[j]).count();
            if k == 0 {
                return 0.0;
            }
            let net: i32 = signs.iter().map(|s| s[j] as i32).sum();
            net as f64 / k as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneitySummary {
    pub median_i2: f64,
    pub positive_fraction: f64,
    pub positive_median: Option<f64>,
    pub positive_q1: Option<f64>,
    pub positive_q3: Option<f64>,
    pub n_voxels: usize,
}

/// I² summaries over the meta mask, in percent.
pub fn heterogeneity_summary(meta: &MetaResult) -> HeterogeneitySummary {
    let all: Vec<f64> = meta
        .i2
        .iter()
        .zip(&meta.pooled.mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    let pos: Vec<f64> = all.iter().copied().filter(|&v| v > 0.0).collect();
    let nonempty = |f: &dyn Fn(&[f64]) -> f64| (!pos.is_empty()).then(|| f(&pos));
    HeterogeneitySummary {
        median_i2: if all.is_empty() { 0.0 } else { median(&all) },
        positive_fraction: if all.is_empty() { 0.0 } else { pos.len() as f64 / all.len() as f64 },
        positive_median: nonempty(&|x| median(x)),
        positive_q1: nonempty(&|x| percentile(x, 25.0)),
        positive_q3: nonempty(&|x| percentile(x, 75.0)),
        n_voxels: all.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps(values: &[&[f64]]) -> Vec<ZMap> {
        let g = Grid::new([values[0].len(), 1, 1], [2.0; 3]);
        values
            .iter()
            .map(|v| ZMap {
                grid: g.clone(),
                z: v.to_vec(),
                mask: v.iter().map(|x| x.is_finite()).collect(),
                df: 50.0,
            })
            .collect()
    }

    #[test]
    fn closed_form_cells() {
        let c = dl_pool(&[2.0, 2.0, 2.0]);
        assert_eq!((c.q, c.tau2, c.i2), (0.0, 0.0, 0.0));
        assert!((c.z - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let c = dl_pool(&[1.0, 2.0, 3.0]);
        assert_eq!((c.q, c.tau2, c.i2), (2.0, 0.0, 0.0));
        assert!((c.z - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let c = dl_pool(&[0.0, 2.0, 4.0]);
        assert_eq!((c.q, c.tau2, c.i2), (8.0, 3.0, 75.0));
        assert!((c.z - 2.0 / (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reduced_k_and_exclusion() {
        let m = maps(&[&[1.0, 2.0, f64::NAN], &[3.0, f64::NAN, f64::NAN], &[2.0, f64::NAN, 5.0]]);
        let r = dersimonian_laird(&m, 0.05).unwrap();
        assert_eq!(r.k, vec![3, 1, 1]);
        assert_eq!(r.pooled.mask, vec![true, false, false]);
        assert!(r.pooled.z[1].is_nan());
        assert!(matches!(dersimonian_laird(&m[..1], 0.05), Err(Error::TooFewStudies(1))));
    }

    #[test]
    fn zero_maps_have_unit_fwe_p() {
        let m = maps(&[&[0.0; 5], &[0.0; 5], &[0.0; 5]]);
        let p = sign_flip_permutation(&m, 200, 1).unwrap();
        assert_eq!(p.observed_max, 0.0);
        assert_eq!(p.fwe_p, 1.0);
    }

    #[test]
    fn prevalence_arithmetic() {
        let signs: Vec<Vec<i8>> = (0..18).map(|i| vec![if i < 12 { 1 } else if i < 14 { -1 } else { 0 }]).collect();
        let mask = [true];
        let masks: Vec<&[bool]> = vec![&mask; 18];
        assert!((prevalence_from_signs(&signs, &masks, 1)[0] - 10.0 / 18.0).abs() < 1e-15);
        let half: Vec<Vec<i8>> = (0..18).map(|i| vec![if i < 9 { 1 } else { -1 }]).collect();
        assert_eq!(prevalence_from_signs(&half, &masks, 1)[0], 0.0);
    }

    #[test]
    fn homogeneous_summary() {
        let m = maps(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let s = heterogeneity_summary(&dersimonian_laird(&m, 0.05).unwrap());
        assert_eq!((s.median_i2, s.positive_fraction, s.positive_median), (0.0, 0.0, None));
    }

    proptest! {
        #[test]
        fn sign_equivariant_and_shrinking(z in prop::collection::vec(-5.0f64..5.0, 2..20)) {
            let a = dl_pool(&z);
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            prop_assert_eq!(dl_pool(&neg).z, -a.z);
            prop_assert!(a.z.abs() <= (z.iter().sum::<f64>() / (z.len() as f64).sqrt()).abs() + 1e-12);
            prop_assert!((0.0..=100.0).contains(&a.i2));
        }

        #[test]
        fn monotone_in_tau2(zbar in -3.0f64..3.0, k in 2usize..30, q1 in 0.0f64..60.0, dq in 0.0f64..20.0) {
            let k = k as f64;
            let a = dl_from_moments(zbar, q1, k);
            let b = dl_from_moments(zbar, q1 + dq, k);
            prop_assert!(b.tau2 >= a.tau2);
            prop_assert!(b.z.abs() <= a.z.abs() + 1e-12);
        }
    }
}
