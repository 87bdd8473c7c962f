//! Seeded synthetic cohorts, lesion volumes and model predictions, used for
//! the bundled demo corpus and for simulation-based tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use crate::cohort::{CohortRow, Idh, Resection, Sex, GBM_DIAGNOSIS};
use crate::stats::rng::{self, Rng};
use crate::volume::{Grid, Volume, VolumeData};

pub const NON_GBM_DIAGNOSIS: &str = "Astrocytoma, IDH-mutant";

fn pick<T: Copy>(r: &mut Rng, items: &[(T, f64)]) -> T {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for &(v, w) in items {
        acc += w;
        if u < acc {
            return v;
        }
    }
    items.last().unwrap().0
}

pub fn synthetic_row(r: &mut Rng, patient_id: String) -> CohortRow {
    let grade = pick(r, &[(2u8, 0.1), (3, 0.1), (4, 0.8)]);
    // some grade 4 tumours are IDH-mutant astrocytomas, so grade and
    // diagnosis are not collinear
    let gbm = grade == 4 && r.random::<f64>() >= 0.15;
    let mut row = CohortRow::new(patient_id);
    row.sex = Some(if r.random::<bool>() { Sex::M } else { Sex::F });
    row.age_years = Some((60.0 + 12.0 * r.sample::<f64, _>(StandardNormal)).clamp(18.0, 90.0).round());
    row.source = Some(if r.random::<bool>() { "UCSF-PDGM" } else { "UPENN-GBM" }.into());
    row.who_grade = Some(grade);
    row.resection = Some(pick(r, &[(Resection::GTR, 0.5), (Resection::STR, 0.3), (Resection::Biopsy, 0.2)]));
    row.diagnosis = Some(if gbm { GBM_DIAGNOSIS } else { NON_GBM_DIAGNOSIS }.into());
    row.idh = Some(if gbm { Idh::Wildtype } else { Idh::Mutant });
    let scale: f64 = if gbm { 450.0 } else { 1500.0 };
    row.survival_days = Some((Exp::new(1.0 / scale).unwrap().sample(r) + 30.0).round());
    row
}

/// `n` patients with ids `P001…`, covariates drawn from fixed marginals.
pub fn synthetic_cohort(n: usize, seed: u64) -> Vec<CohortRow> {
    let mut r = rng::rng(seed);
    (0..n).map(|i| synthetic_row(&mut r, format!("P{:03}", i + 1))).collect()
}

/// Adds a ball of `value` (voxel units) into `data`.
pub fn paint_ball(data: &mut [u8], dims: [usize; 3], centre: [f64; 3], radius: [f64; 3], value: u8) {
    let lo = |a: usize| (centre[a] - radius[a]).floor().max(0.0) as usize;
    let hi = |a: usize| ((centre[a] + radius[a]).ceil() as usize).min(dims[a] - 1);
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                let d: f64 = [x, y, z]
                    .iter()
                    .enumerate()
                    .map(|(a, &c)| ((c as f64 - centre[a]) / radius[a]).powi(2))
                    .sum();
                if d <= 1.0 {
                    data[x + dims[0] * (y + dims[1] * z)] = value;
                }
            }
        }
    }
}

/// Layered tumour: necrotic core, enhancing rim and surrounding oedema,
/// written with the default label codes (1 NET, 4 ET, 2 OED).
pub fn paint_tumour(data: &mut [u8], dims: [usize; 3], centre: [f64; 3], radius: [f64; 3]) {
    let scaled = |f: f64| radius.map(|r| r * f);
    paint_ball(data, dims, centre, radius, 2);
    paint_ball(data, dims, centre, scaled(0.7), 4);
    paint_ball(data, dims, centre, scaled(0.4), 1);
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub model_id: String,
    /// Typical centre displacement in voxels.
    pub shift_sd: f64,
    /// Typical relative radius error.
    pub scale_sd: f64,
    /// Predicts no necrotic core label.
    pub two_class: bool,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub cohort: Vec<CohortRow>,
    pub ground_truth: Vec<Volume>,
    /// Predictions per model, aligned with `cohort`.
    pub predictions: BTreeMap<String, Vec<Volume>>,
    pub models: Vec<ModelSpec>,
}

pub fn default_models() -> Vec<ModelSpec> {
    vec![
        ModelSpec {
            model_id: "model_a".into(),
            shift_sd: 0.5,
            scale_sd: 0.05,
            two_class: false,
        },
        ModelSpec {
            model_id: "model_b".into(),
            shift_sd: 1.0,
            scale_sd: 0.12,
            two_class: false,
        },
        ModelSpec {
            model_id: "model_c".into(),
            shift_sd: 0.8,
            scale_sd: 0.08,
            two_class: true,
        },
    ]
}

pub const CORPUS_DIMS: [usize; 3] = [40, 48, 36];
pub const CORPUS_SPACING: [f32; 3] = [3.0, 3.0, 3.0];

/// The bundled demo: `n` patients, the default three models. Biopsy cases
/// are predicted less accurately so the audits have something to find, and
/// the last patient's ground truth holds only oedema.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let cohort = synthetic_cohort(n, seed);
    let models = default_models();
    let dims = CORPUS_DIMS;
    let grid = Grid::new(dims, CORPUS_SPACING);
    let mut r = rng::stream(seed, 1);
    let mut ground_truth = Vec::with_capacity(n);
    let mut lesions = Vec::with_capacity(n);
    for (i, row) in cohort.iter().enumerate() {
        let left = r.random::<bool>();
        let cx = if left { 12.0 } else { 28.0 } + 3.0 * r.sample::<f64, _>(StandardNormal);
        let centre = [cx, 24.0 + 5.0 * r.sample::<f64, _>(StandardNormal), 18.0 + 3.0 * r.sample::<f64, _>(StandardNormal)];
        let base = if row.resection == Some(Resection::Biopsy) { 4.0 } else { 6.0 };
        let radius = [0, 1, 2].map(|_| base * (1.0 + 0.15 * r.sample::<f64, _>(StandardNormal)).clamp(0.6, 1.5));
        let mut data = vec![0u8; grid.len()];
        if i + 1 == n {
            paint_ball(&mut data, dims, centre, radius, 2);
        } else {
            paint_tumour(&mut data, dims, centre, radius);
        }
        ground_truth.push(grid.volume_u8(data).expect("grid sized buffer"));
        lesions.push((centre, radius));
    }
    let mut predictions = BTreeMap::new();
    for (m, spec) in models.iter().enumerate() {
        let mut r = rng::stream(seed, 100 + m as u64);
        let preds = cohort
            .iter()
            .zip(&lesions)
            .map(|(row, &(centre, radius))| {
                let penalty = if row.resection == Some(Resection::Biopsy) { 2.0 } else { 1.0 };
                let c = centre.map(|v| v + penalty * spec.shift_sd * r.sample::<f64, _>(StandardNormal));
                let s = (1.0 + penalty * spec.scale_sd * r.sample::<f64, _>(StandardNormal)).clamp(0.5, 1.5);
                let mut data = vec![0u8; grid.len()];
                paint_tumour(&mut data, dims, c, radius.map(|v| v * s));
                if spec.two_class {
                    for v in data.iter_mut().filter(|v| **v == 1) {
                        *v = 4;
                    }
                }
                grid.volume_u8(data).expect("grid sized buffer")
            })
            .collect();
        predictions.insert(spec.model_id.clone(), preds);
    }
    Corpus {
        cohort,
        ground_truth,
        predictions,
        models,
    }
}

/// Smoothed-lesion GLM fixture: each patient has one right-hemisphere lesion,
/// shared in pairs together with all covariates so that it is balanced
/// between the two groups, and the
/// first patient of each pair also has a small left lesion. Model `m`
/// performance is `rho·L + sqrt(1 − rho²)·e_m` with `L` the standardised
/// left-lesion indicator and `e_m` independent noise.
#[derive(Debug, Clone)]
pub struct SpatialFixture {
    pub grid: Grid,
    pub cohort: Vec<CohortRow>,
    pub masks: Vec<Vec<u8>>,
    pub left: Vec<bool>,
    /// Per model, per patient.
    pub perf: Vec<Vec<f64>>,
    /// Voxels with x below this index are the left hemisphere.
    pub midline: usize,
}

pub const SPATIAL_DIMS: [usize; 3] = [36, 24, 14];

/// `right_positions` caps the number of distinct right-lesion centres
/// (`None`: one per pair). Pairs cycle through the centres.
pub fn spatial_fixture(
    n_pairs: usize,
    n_models: usize,
    rho: f64,
    right_positions: Option<usize>,
    seed: u64,
) -> SpatialFixture {
    let dims = SPATIAL_DIMS;
    let grid = Grid::new(dims, [2.0; 3]);
    let n = 2 * n_pairs;
    // pair members share covariates as well as the right lesion, so the
    // right hemisphere stays orthogonal to L after adjustment
    let mut cr = rng::stream(seed, 0);
    let cohort: Vec<CohortRow> = (0..n_pairs)
        .flat_map(|p| {
            let row = synthetic_row(&mut cr, format!("P{:03}", 2 * p + 1));
            let mut twin = row.clone();
            twin.patient_id = format!("P{:03}", 2 * p + 2);
            [row, twin]
        })
        .collect();
    let mut r = rng::stream(seed, 1);
    let mut masks = Vec::with_capacity(n);
    let mut left = Vec::with_capacity(n);
    let centres: Vec<[f64; 3]> = (0..right_positions.unwrap_or(n_pairs).clamp(1, n_pairs.max(1)))
        .map(|_| {
            [
                r.random_range(25.0..29.0),
                r.random_range(10.0..14.0),
                r.random_range(5.0..9.0),
            ]
        })
        .collect();
    for p in 0..n_pairs {
        let rc = centres[p % centres.len()];
        for member in 0..2 {
            let mut data = vec![0u8; grid.len()];
            paint_ball(&mut data, dims, rc, [2.5; 3], 1);
            let has_left = member == 0;
            if has_left {
                let lc = [7.0 + r.random_range(-0.5..0.5), 12.0 + r.random_range(-0.5..0.5), 7.0];
                paint_ball(&mut data, dims, lc, [2.0; 3], 1);
            }
            masks.push(data);
            left.push(has_left);
        }
    }
    let lz: Vec<f64> = left.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let noise = (1.0 - rho * rho).sqrt();
    let perf = (0..n_models)
        .map(|m| {
            let mut r = rng::stream(seed, 10 + m as u64);
            lz.iter().map(|l| rho * l + noise * r.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    SpatialFixture {
        grid,
        cohort,
        masks,
        left,
        perf,
        midline: dims[0] / 2,
    }
}

impl SpatialFixture {
    /// Independently permute each model's performance vector.
    pub fn shuffled(&self, seed: u64) -> SpatialFixture {
        let mut out = self.clone();
        for (m, p) in out.perf.iter_mut().enumerate() {
            p.shuffle(&mut rng::stream(seed, m as u64));
        }
        out
    }

    pub fn is_left(&self, voxel: usize) -> bool {
        voxel % self.grid.dims[0] < self.midline
    }
}

/// Two Gaussian blobs in `dim`-dimensional feature space with centroids
/// `separation` standard deviations apart. Returns features and blob labels.
pub fn two_blobs(n_per_blob: usize, dim: usize, separation: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut r = rng::rng(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    // separated along a random unit direction so no single axis carries it
    let mut dir: Vec<f64> = (0..dim).map(|_| noise.sample(&mut r)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let mut feats = Vec::with_capacity(2 * n_per_blob);
    let mut labels = Vec::with_capacity(2 * n_per_blob);
    for b in 0..2 {
        let sign = if b == 0 { 0.5 } else { -0.5 };
        for _ in 0..n_per_blob {
            feats.push(
                dir.iter()
                    .map(|d| sign * separation * d + noise.sample(&mut r))
                    .collect(),
            );
            labels.push(b == 0);
        }
    }
    (feats, labels)
}

/// Dense label buffer of a volume, for fixtures that inspect voxels directly.
pub fn labels_u8(v: &Volume) -> Option<&[u8]> {
    match &v.data {
        VolumeData::U8(d) => Some(d),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synthetic_cohort(20, 3), synthetic_cohort(20, 3));
        let a = synthetic_corpus(6, 42);
        let b = synthetic_corpus(6, 42);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn spatial_fixture_is_pair_balanced() {
        let f = spatial_fixture(10, 3, 0.6, None, 1);
        for p in 0..10 {
            let (a, b) = (&f.masks[2 * p], &f.masks[2 * p + 1]);
            for v in 0..f.grid.len() {
                if !f.is_left(v) {
                    assert_eq!(a[v], b[v]);
                } else {
                    assert_eq!(b[v], 0);
                }
            }
        }
    }
}
