//! Representational equity: a patient feature space built from lesion
//! morphology and covariates, a 2-D embedding of it, and a GLM testing
//! whether performance is structured in the embedding.

pub mod embed;
pub mod latent;

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortRow;
use crate::error::{Error, Result};
use crate::stats::effect::cohens_d;
use crate::stats::standardize::zscore;
use crate::volume::{resample_mask, Compartment, CompartmentMask, Volume};

pub use embed::{embed_2d, pca_2d, EmbedMethod, EmbedParams, Metric};
pub use latent::{latent_glm, rasterize_latent, LatentCluster, LatentGlm, LatentRaster, RASTER_SIZE, SPIKE_FWHM};

pub const MASK_SIDE: usize = 64;
pub const PCA_VARIANCE_TARGET: f64 = 0.80;
pub const PCA_MAX_COMPONENTS: usize = 15;

/// Lesion channels in feature order. WT is their union and is left out.
pub const LESION_CHANNELS: [Compartment; 3] = [Compartment::NET, Compartment::ET, Compartment::OED];

/// Substrings that mark a performance column. Any feature name containing
/// one (case-insensitively) is rejected.
pub const DENY_LIST: [&str; 9] = ["dice", "hd95", "asd", "nsd", "sensitivity", "precision", "vol_sim", "perf", "metric"];

pub fn audit_feature_names<S: AsRef<str>>(names: &[S]) -> Result<()> {
    for n in names {
        let lower = n.as_ref().to_ascii_lowercase();
        if DENY_LIST.iter().any(|d| lower.contains(d)) {
            return Err(Error::CircularFeature(n.as_ref().to_string()));
        }
    }
    Ok(())
}

/// Binary rows packed 64 to a word.
#[derive(Debug, Clone, PartialEq)]
pub struct BitRows {
    pub n_cols: usize,
    rows: Vec<Vec<u64>>,
}

impl BitRows {
    pub fn new(n_cols: usize) -> Self {
        BitRows { n_cols, rows: vec![] }
    }

    pub fn push(&mut self, bits: &[u8]) -> Result<()> {
        if bits.len() != self.n_cols {
            return Err(Error::GridMismatch(format!("row of {} values, expected {}", bits.len(), self.n_cols)));
        }
        let mut words = vec![0u64; self.n_cols.div_ceil(64)];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b != 0) {
            words[i / 64] |= 1 << (i % 64);
        }
        self.rows.push(words);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn ones(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().enumerate().flat_map(|(w, &word)| {
            (0..64).filter(move |b| word >> b & 1 == 1).map(move |b| w * 64 + b)
        })
    }

    pub fn select(&self, keep: &[usize]) -> BitRows {
        BitRows {
            n_cols: self.n_cols,
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    fn gram(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| self.rows[i].iter().zip(&self.rows[j]).map(|(a, b)| (a & b).count_ones() as f64).sum())
                    .collect()
            })
            .collect();
        DMatrix::from_fn(n, n, |i, j| if i <= j { upper[i][j - i] } else { upper[j][i - j] })
    }
}

/// NET, ET and OED masks resampled to `side`³ and concatenated.
pub fn lesion_channels(masks: &[CompartmentMask; 4], side: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(3 * side * side * side);
    for c in LESION_CHANNELS {
        out.extend_from_slice(resample_mask(&masks[c.position()], [side; 3])?.bits());
    }
    Ok(out)
}

pub fn lesion_matrix(cases: &[[CompartmentMask; 4]], side: usize) -> Result<BitRows> {
    let rows: Vec<Vec<u8>> = cases.par_iter().map(|m| lesion_channels(m, side)).collect::<Result<_>>()?;
    let mut out = BitRows::new(3 * side * side * side);
    for r in &rows {
        out.push(r)?;
    }
    Ok(out)
}

/// Principal components of binary rows, computed through the centred Gram
/// matrix so the cost scales with patients rather than voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPca {
    /// Chosen component count.
    pub k: usize,
    /// Variance fraction of every component with positive variance, descending.
    pub explained_variance_ratio: Vec<f64>,
    /// Per row, scores on the first `k` components.
    pub scores: Vec<Vec<f64>>,
    pub mean: Vec<f32>,
    /// `k` unit loading vectors over the mask features.
    #[serde(skip)]
    pub components: Vec<Vec<f32>>,
}

impl MaskPca {
    pub fn cumulative(&self) -> f64 {
        self.explained_variance_ratio.iter().take(self.k).sum()
    }

    /// Row `i` mapped back to feature space from its `k` scores.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.mean.iter().map(|&m| m as f64).collect();
        for (s, comp) in scores.iter().zip(&self.components) {
            for (o, &c) in out.iter_mut().zip(comp) {
                *o += s * c as f64;
            }
        }
        out
    }
}

/// Smallest K whose cumulative fraction reaches `target`, capped at `cap`.
pub fn choose_k(ratios: &[f64], target: f64, cap: usize) -> usize {
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        if acc >= target - 1e-12 {
            return (i + 1).min(cap);
        }
    }
    ratios.len().min(cap)
}

pub fn mask_pca(x: &BitRows, target: f64, cap: usize) -> Result<MaskPca> {
    let n = x.n_rows();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    let g = x.gram();
    let s: Vec<f64> = (0..n).map(|i| g.row(i).sum()).collect();
    let t: f64 = s.iter().sum();
    let nf = n as f64;
    let gc = DMatrix::from_fn(n, n, |i, j| g[(i, j)] - (s[i] + s[j]) / nf + t / (nf * nf));
    let total: f64 = gc.trace();
    let eig = SymmetricEigen::new(gc);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let tol = 1e-10 * total.max(1.0);
    let kept: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k] > tol).collect();
    let ratios: Vec<f64> = kept.iter().map(|&k| eig.eigenvalues[k] / total).collect();
    let k = choose_k(&ratios, target, cap);
    let mut mean = vec![0.0f64; x.n_cols];
    for i in 0..n {
        for f in x.ones(i) {
            mean[f] += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut scores = vec![vec![0.0; k]; n];
    let mut components = Vec::with_capacity(k);
    for (c, &e) in kept.iter().take(k).enumerate() {
        let sq = eig.eigenvalues[e].sqrt();
        // loading = Xc' u / sqrt(lambda); u sums to zero, so the mean drops out
        let mut v = vec![0.0f64; x.n_cols];
        for (i, &ui) in eig.eigenvectors.column(e).iter().enumerate() {
            for f in x.ones(i) {
                v[f] += ui / sq;
            }
        }
        let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        // scores by projection, so identical rows score identically
        let offset: f64 = mean.iter().zip(&v).map(|(m, a)| m * a).sum();
        for (i, row) in scores.iter_mut().enumerate() {
            row[c] = x.ones(i).map(|f| v[f]).sum::<f64>() - offset;
        }
        components.push(v.iter().map(|&a| a as f32).collect());
    }
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    Ok(MaskPca {
        k,
        explained_variance_ratio: ratios,
        scores,
        mean,
        components,
    })
}

/// Standardised patient features plus the raw values behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub patient_ids: Vec<String>,
    /// Input row of each included patient.
    pub rows: Vec<usize>,
    pub names: Vec<String>,
    pub raw: Vec<Vec<f64>>,
    pub standardized: Vec<Vec<f64>>,
    /// Constant columns removed before standardising.
    pub dropped: Vec<String>,
    /// Patients left out for incomplete covariates.
    pub excluded: Vec<String>,
    pub pca: MaskPca,
}

impl FeatureSpace {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn is_lesion_feature(name: &str) -> bool {
        name.starts_with("PC")
    }
}

fn complete(r: &CohortRow) -> bool {
    r.sex.is_some()
        && r.age_years.is_some()
        && r.who_grade.is_some()
        && r.resection.is_some()
        && r.diagnosis.is_some()
        && r.source.is_some()
        && r.idh.is_some()
}

fn one_hot<T: PartialEq>(names: &mut Vec<String>, cols: &mut Vec<Vec<f64>>, prefix: &str, levels: &[(T, String)], values: &[T]) {
    for (level, label) in levels {
        names.push(format!("{prefix}[{label}]"));
        cols.push(values.iter().map(|v| f64::from(u8::from(v == level))).collect());
    }
}

/// Lesion PCA scores, one-hot covariates, age and any `extra` columns,
/// standardised column-wise. `lesions` rows align with `cohort`.
pub fn build_feature_matrix(
    lesions: &BitRows,
    cohort: &[CohortRow],
    extra: &[(String, Vec<f64>)],
    pca_cap: usize,
) -> Result<FeatureSpace> {
    if lesions.n_rows() != cohort.len() {
        return Err(Error::InvalidParameter(format!(
            "{} lesion rows for {} cohort rows",
            lesions.n_rows(),
            cohort.len()
        )));
    }
    audit_feature_names(&extra.iter().map(|e| e.0.as_str()).collect::<Vec<_>>())?;
    if let Some(e) = extra.iter().find(|e| e.1.len() != cohort.len()) {
        return Err(Error::InvalidParameter(format!("extra column {} has the wrong length", e.0)));
    }
    let rows: Vec<usize> = (0..cohort.len()).filter(|&i| complete(&cohort[i])).collect();
    let excluded = (0..cohort.len())
        .filter(|&i| !complete(&cohort[i]))
        .map(|i| cohort[i].patient_id.clone())
        .collect();
    let sub: Vec<&CohortRow> = rows.iter().map(|&i| &cohort[i]).collect();
    let pca = mask_pca(&lesions.select(&rows), PCA_VARIANCE_TARGET, pca_cap)?;

    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in 0..pca.k {
        names.push(format!("PC{}", c + 1));
        cols.push(pca.scores.iter().map(|s| s[c]).collect());
    }
    let ages: Vec<f64> = sub.iter().map(|r| r.age_years.unwrap()).collect();
    names.push("Age(z)".into());
    cols.push(zscore(&ages).unwrap_or_else(|_| vec![0.0; ages.len()]));
    use crate::cohort::{Idh, Resection, Sex};
    let sexes: Vec<Sex> = sub.iter().map(|r| r.sex.unwrap()).collect();
    one_hot(&mut names, &mut cols, "Sex", &[(Sex::F, "F".into()), (Sex::M, "M".into())], &sexes);
    let grades: Vec<u8> = sub.iter().map(|r| r.who_grade.unwrap()).collect();
    let grade_levels: Vec<(u8, String)> = [2u8, 3, 4].iter().map(|&g| (g, g.to_string())).collect();
    one_hot(&mut names, &mut cols, "Grade", &grade_levels, &grades);
    let res: Vec<Resection> = sub.iter().map(|r| r.resection.unwrap()).collect();
    let res_levels: Vec<(Resection, String)> = [Resection::GTR, Resection::STR, Resection::Biopsy]
        .iter()
        .map(|&r| (r, r.as_str().to_string()))
        .collect();
    one_hot(&mut names, &mut cols, "Resection", &res_levels, &res);
    for (prefix, get) in [
        ("Diagnosis", (|r: &CohortRow| r.diagnosis.clone().unwrap()) as fn(&CohortRow) -> String),
        ("Source", |r: &CohortRow| r.source.clone().unwrap()),
    ] {
        let values: Vec<String> = sub.iter().map(|r| get(r)).collect();
        let levels: Vec<(String, String)> = values
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|l| (l.clone(), l))
            .collect();
        one_hot(&mut names, &mut cols, prefix, &levels, &values);
    }
    let idh: Vec<Idh> = sub.iter().map(|r| r.idh.unwrap()).collect();
    one_hot(
        &mut names,
        &mut cols,
        "IDH",
        &[(Idh::Mutant, "mutant".into()), (Idh::Wildtype, "wildtype".into())],
        &idh,
    );
    for (name, values) in extra {
        names.push(name.clone());
        cols.push(rows.iter().map(|&i| values[i]).collect());
    }
    audit_feature_names(&names)?;

    let mut dropped = Vec::new();
    let mut keep_names = Vec::new();
    let mut raw_cols = Vec::new();
    let mut std_cols = Vec::new();
    for (name, col) in names.into_iter().zip(cols) {
        match zscore(&col) {
            Ok(z) => {
                keep_names.push(name);
                raw_cols.push(col);
                std_cols.push(z);
            }
            Err(Error::ZeroVariance) | Err(Error::TooFewValues { .. }) => {
                log::warn!("feature {name} is constant and was dropped");
                dropped.push(name);
            }
            Err(e) => return Err(e),
        }
    }
    let n = rows.len();
    let transpose = |c: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..n).map(|i| c.iter().map(|col| col[i]).collect()).collect() };
    Ok(FeatureSpace {
        patient_ids: sub.iter().map(|r| r.patient_id.clone()).collect(),
        raw: transpose(&raw_cols),
        standardized: transpose(&std_cols),
        rows,
        names: keep_names,
        dropped,
        excluded,
        pca,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub feature: String,
    pub lesion_pc: bool,
    pub d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile {
    pub n_in: usize,
    pub n_out: usize,
    pub rows: Vec<EffectRow>,
    pub note: Option<String>,
}

pub const TOO_FEW_IN_CLUSTER: &str = "TooFewInCluster";

impl EffectProfile {
    /// The non-lesion feature with the largest |d|.
    pub fn largest_demographic(&self) -> Option<&EffectRow> {
        self.rows
            .iter()
            .filter(|r| !r.lesion_pc && r.d.is_some())
            .max_by(|a, b| a.d.unwrap().abs().total_cmp(&b.d.unwrap().abs()))
    }
}

/// Cohen's d of in-cluster against out-of-cluster patients for every
/// feature. `members` is indexed like the feature space rows.
pub fn cluster_effect_profile(members: &[bool], space: &FeatureSpace) -> Result<EffectProfile> {
    if members.len() != space.n() {
        return Err(Error::InvalidParameter(format!(
            "{} memberships for {} patients",
            members.len(),
            space.n()
        )));
    }
    let n_in = members.iter().filter(|&&m| m).count();
    let n_out = members.len() - n_in;
    let enough = n_in >= 2 && n_out >= 2;
    let rows = space
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let d = enough
                .then(|| {
                    let (a, b): (Vec<_>, Vec<_>) = (0..space.n()).partition(|&i| members[i]);
                    let col = |ix: Vec<usize>| ix.into_iter().map(|i| space.raw[i][j]).collect::<Vec<f64>>();
                    cohens_d(&col(a), &col(b))
                })
                .flatten();
            EffectRow {
                feature: name.clone(),
                lesion_pc: FeatureSpace::is_lesion_feature(name),
                d,
            }
        })
        .collect();
    Ok(EffectProfile {
        n_in,
        n_out,
        rows,
        note: (!enough).then(|| TOO_FEW_IN_CLUSTER.to_string()),
    })
}

/// Per-voxel count of member lesions.
pub fn significant_overlap_map(members: &[bool], masks: &[CompartmentMask]) -> Result<Volume> {
    if members.len() != masks.len() {
        return Err(Error::InvalidParameter(format!("{} memberships for {} masks", members.len(), masks.len())));
    }
    let first = masks.first().ok_or(Error::EmptyInput)?;
    let mut counts = vec![0f32; first.volume.len()];
    for (m, _) in masks.iter().zip(members).filter(|(_, &b)| b) {
        first.volume.check_grid(&m.volume)?;
        for (c, &b) in counts.iter_mut().zip(m.bits()) {
            *c += f32::from(b);
        }
    }
    first.volume.with_f32(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub raster_size: usize,
    pub spike_fwhm: f64,
    pub alpha: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            raster_size: RASTER_SIZE,
            spike_fwhm: SPIKE_FWHM,
            alpha: 0.05,
        }
    }
}

/// Latent GLM and effect profile for one performance vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAnalysis {
    /// Feature-space rows that had a performance value.
    pub analysed: Vec<usize>,
    pub raster: LatentRaster,
    pub glm: LatentGlm,
    /// Membership in any significant cluster, indexed like the feature space.
    pub members: Vec<bool>,
    pub profile: EffectProfile,
}

/// `coords` and `perf` are indexed like `space`; patients without a
/// performance value are left out of the raster.
pub fn latent_analysis(space: &FeatureSpace, coords: &[[f64; 2]], perf: &[Option<f64>], cfg: &LatentConfig) -> Result<LatentAnalysis> {
    if coords.len() != space.n() || perf.len() != space.n() {
        return Err(Error::InvalidParameter("coords and perf must align with the feature space".into()));
    }
    let analysed: Vec<usize> = (0..space.n()).filter(|&i| perf[i].is_some_and(f64::is_finite)).collect();
    let pts: Vec<[f64; 2]> = analysed.iter().map(|&i| coords[i]).collect();
    let y: Vec<f64> = analysed.iter().map(|&i| perf[i].unwrap()).collect();
    let raster = rasterize_latent(&pts, cfg.raster_size, cfg.spike_fwhm)?;
    let mut glm = latent_glm(&raster, &y, cfg.alpha)?;
    for c in &mut glm.clusters {
        c.members.iter_mut().for_each(|m| *m = analysed[*m]);
    }
    let mut members = vec![false; space.n()];
    for c in &glm.clusters {
        for &m in &c.members {
            members[m] = true;
        }
    }
    let profile = cluster_effect_profile(&members, space)?;
    Ok(LatentAnalysis {
        analysed,
        raster,
        glm,
        members,
        profile,
    })
}
