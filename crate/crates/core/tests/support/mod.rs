//! Independent reference implementations and fixture generators shared by
//! the integration tests. Oracles favour the textbook definition over speed.

#![allow(dead_code)]

use fairboard_core::stats::rng::Rng;
use fairboard_core::volume::{Compartment, CompartmentMask, Volume, VolumeData};
use rand::Rng as _;

pub mod ineq {
    //! Definitional inequality indices on strictly positive values.

    fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    /// Σ_i Σ_j |x_i − x_j| / (2 n² μ).
    pub fn gini(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mut s = 0.0;
        for a in x {
            for b in x {
                s += (a - b).abs();
            }
        }
        s / (2.0 * n * n * mean(x))
    }

    /// One minus the ratio of the power mean of order `1 − ε` to the arithmetic mean.
    pub fn atkinson(x: &[f64], eps: f64) -> f64 {
        let n = x.len() as f64;
        let ede = if eps == 1.0 {
            (x.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
        } else {
            (x.iter().map(|v| v.powf(1.0 - eps)).sum::<f64>() / n).powf(1.0 / (1.0 - eps))
        };
        1.0 - ede / mean(x)
    }

    /// Coefficient of variation (population sd, Welford) mapped to [0, 1) by `cv / (1 + cv)`.
    pub fn cov(x: &[f64]) -> f64 {
        let (mut m, mut s2) = (0.0, 0.0);
        for (k, &v) in x.iter().enumerate() {
            let d = v - m;
            m += d / (k + 1) as f64;
            s2 += d * (v - m);
        }
        let cv = (s2 / x.len() as f64).sqrt() / m;
        cv / (1.0 + cv)
    }

    pub fn ge(x: &[f64], alpha: f64) -> f64 {
        let mu = mean(x);
        let n = x.len() as f64;
        (x.iter().map(|v| (v / mu).powf(alpha)).sum::<f64>() / n - 1.0) / (alpha * (alpha - 1.0))
    }

    /// Largest gap between the population share and the Lorenz curve.
    pub fn hoover(x: &[f64]) -> f64 {
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        let total: f64 = s.iter().sum();
        let n = s.len() as f64;
        let mut acc = 0.0;
        let mut best: f64 = 0.0;
        for (k, v) in s.iter().enumerate() {
            acc += v;
            best = best.max((k + 1) as f64 / n - acc / total);
        }
        best
    }

    /// `ln n` minus the Shannon entropy of the income shares.
    pub fn theil(x: &[f64]) -> f64 {
        let total: f64 = x.iter().sum();
        let h: f64 = x.iter().map(|v| v / total).map(|s| -s * s.ln()).sum();
        (x.len() as f64).ln() - h
    }

    /// Top-decile share over bottom-four-decile share by head count.
    pub fn palma(x: &[f64]) -> f64 {
        let mut desc = x.to_vec();
        desc.sort_by(|a, b| b.total_cmp(a));
        let n = x.len();
        let top: f64 = desc.iter().take(n.div_ceil(10)).sum();
        let bottom: f64 = desc.iter().rev().take(4 * n / 10).sum();
        top / bottom
    }
}

/// Random nonnegative distribution of length 2..=500, sometimes containing zeros.
pub fn random_distribution(r: &mut Rng) -> Vec<f64> {
    let n = r.random_range(2..=500);
    let shape = r.random_range(0..3);
    let zeros = r.random::<f64>() < 0.1;
    (0..n)
        .map(|_| {
            if zeros && r.random::<f64>() < 0.05 {
                return 0.0;
            }
            match shape {
                0 => r.random_range(0.0..1.0),
                1 => r.random_range(0.5..1.0f64).powi(3),
                _ => (-r.random::<f64>().max(1e-12).ln()) * 20.0,
            }
        })
        .collect()
}

pub fn mask(dims: [usize; 3], spacing: [f32; 3], bits: Vec<u8>) -> CompartmentMask {
    let v = Volume::new(dims, spacing, VolumeData::U8(bits)).unwrap();
    CompartmentMask::new(Compartment::WT, v).unwrap()
}

/// A random blob, box or speckle pattern on a 12³-or-smaller grid.
pub fn random_mask_bits(r: &mut Rng, dims: [usize; 3]) -> Vec<u8> {
    let n: usize = dims.iter().product();
    let mut b = vec![0u8; n];
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    match r.random_range(0..3) {
        0 => {
            let c = dims.map(|d| r.random_range(0.0..d as f64));
            let rad = r.random_range(1.0..5.0f64);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                        if d2 <= rad * rad {
                            b[idx(x, y, z)] = 1;
                        }
                    }
                }
            }
        }
        1 => {
            let lo = dims.map(|d| r.random_range(0..d));
            let hi = [0, 1, 2].map(|a| r.random_range(lo[a]..dims[a]) + 1);
            for z in lo[2]..hi[2] {
                for y in lo[1]..hi[1] {
                    for x in lo[0]..hi[0] {
                        b[idx(x, y, z)] = 1;
                    }
                }
            }
        }
        _ => {
            let p = r.random_range(0.02..0.3);
            b.iter_mut().for_each(|v| *v = u8::from(r.random::<f64>() < p));
        }
    }
    if b.iter().all(|&v| v == 0) {
        b[r.random_range(0..n)] = 1;
    }
    b
}

/// Foreground voxels with at least one 6-neighbour outside the mask or the grid.
pub fn boundary(bits: &[u8], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let at = |x: isize, y: isize, z: isize| -> bool {
        if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
            return false;
        }
        bits[x as usize + dims[0] * (y as usize + dims[1] * z as usize)] == 1
    };
    let mut out = Vec::new();
    for z in 0..dims[2] as isize {
        for y in 0..dims[1] as isize {
            for x in 0..dims[0] as isize {
                if !at(x, y, z) {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(dx, dy, dz)| !at(x + dx, y + dy, z + dz)) {
                    out.push([x as usize, y as usize, z as usize]);
                }
            }
        }
    }
    out
}

/// For every boundary voxel of `a`, the distance in mm to the nearest boundary voxel of `b`.
pub fn directed_distances(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let d = [0, 1, 2].map(|k| (p[k] as f64 - q[k] as f64) * spacing[k]);
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// (tp, fp, fn) by counting.
pub fn confusion_counts(pred: &[u8], gt: &[u8]) -> (usize, usize, usize) {
    let tp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count();
    let fp = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 0).count();
    let fnn = pred.iter().zip(gt).filter(|(&p, &g)| p == 0 && g == 1).count();
    (tp, fp, fnn)
}

/// Draws rescaled to mean zero and sample variance exactly `var`.
pub fn moment_matched(r: &mut Rng, n: usize, var: f64) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let x: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let m = x.iter().sum::<f64>() / n as f64;
    let s2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let k = (var / s2).sqrt();
    x.iter().map(|v| (v - m) * k).collect()
}

pub struct CrossedData {
    pub y: Vec<f64>,
    pub age: Vec<f64>,
    pub patients: Vec<String>,
    pub models: Vec<String>,
}

/// Fully crossed `n_p × n_m` design: `y = β·age + u_p + u_m + ε`, with the
/// patient and model effects moment-matched to their target variances and
/// age standard normal per patient. The residual noise is i.i.d.
pub fn crossed_design(seed: u64, n_p: usize, n_m: usize, vars: [f64; 3], beta_age: f64) -> CrossedData {
    use rand_distr::StandardNormal;
    let mut r = fairboard_core::stats::rng::rng(seed);
    let mut up = moment_matched(&mut r, n_p, vars[0]);
    let um = moment_matched(&mut r, n_m, vars[1]);
    let age: Vec<f64> = (0..n_p).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    // the realised patient effects are made orthogonal to age, otherwise
    // β_age carries their sampling error (sd ≈ σ_p / √n_p)
    let am = age.iter().sum::<f64>() / n_p as f64;
    let b = up.iter().zip(&age).map(|(u, a)| u * (a - am)).sum::<f64>() / age.iter().map(|a| (a - am).powi(2)).sum::<f64>();
    up.iter_mut().zip(&age).for_each(|(u, a)| *u -= b * (a - am));
    let s2 = up.iter().map(|u| u * u).sum::<f64>() / (n_p - 1) as f64;
    up.iter_mut().for_each(|u| *u *= (vars[0] / s2).sqrt());
    let sd = vars[2].sqrt();
    let mut d = CrossedData {
        y: vec![],
        age: vec![],
        patients: vec![],
        models: vec![],
    };
    for p in 0..n_p {
        for m in 0..n_m {
            d.y.push(beta_age * age[p] + up[p] + um[m] + sd * r.sample::<f64, _>(StandardNormal));
            d.age.push(age[p]);
            d.patients.push(format!("P{p:04}"));
            d.models.push(format!("M{m:02}"));
        }
    }
    d
}

/// Expected-mean-squares estimates for a balanced two-way crossed layout
/// without interaction, `(σ²_row, σ²_col, σ²_e)`, from a row-major `r × c` table.
pub fn anova_components(y: &[f64], r: usize, c: usize) -> (f64, f64, f64) {
    let grand = y.iter().sum::<f64>() / (r * c) as f64;
    let row_mean: Vec<f64> = (0..r).map(|i| y[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
    let col_mean: Vec<f64> = (0..c).map(|j| (0..r).map(|i| y[i * c + j]).sum::<f64>() / r as f64).collect();
    let ss_r: f64 = row_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * c as f64;
    let ss_c: f64 = col_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * r as f64;
    let mut ss_e = 0.0;
    for i in 0..r {
        for j in 0..c {
            ss_e += (y[i * c + j] - row_mean[i] - col_mean[j] + grand).powi(2);
        }
    }
    let ms_r = ss_r / (r - 1) as f64;
    let ms_c = ss_c / (c - 1) as f64;
    let ms_e = ss_e / ((r - 1) * (c - 1)) as f64;
    ((ms_r - ms_e) / c as f64, (ms_c - ms_e) / r as f64, ms_e)
}

/// Spreadsheet-style league: every column min-max normalised across models
/// (flipped where lower is better), averaged, then blended. Constant columns
/// are skipped. `perf` pairs each column with its lower-is-better flag.
pub fn spreadsheet_league(perf: &[(Vec<f64>, bool)], inequality: &[Vec<f64>], w_perf: f64) -> Vec<f64> {
    let n = inequality.first().or(perf.first().map(|p| &p.0)).map_or(0, Vec::len);
    let score = |cols: Vec<(&Vec<f64>, bool)>| -> Vec<f64> {
        let mut sum = vec![0.0; n];
        let mut used = 0usize;
        for (col, flip) in cols {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                continue;
            }
            used += 1;
            for (s, v) in sum.iter_mut().zip(col) {
                *s += if flip { (hi - v) / (hi - lo) } else { (v - lo) / (hi - lo) };
            }
        }
        sum.iter().map(|s| if used == 0 { 0.5 } else { s / used as f64 }).collect()
    };
    let p = score(perf.iter().map(|(c, f)| (c, *f)).collect());
    let e = score(inequality.iter().map(|c| (c, true)).collect());
    p.iter().zip(&e).map(|(a, b)| w_perf * a + (1.0 - w_perf) * b).collect()
}

pub mod spatial {
    //! Runs the planted-lesion fixture through smoothing, per-model GLMs and pooling.

    use fairboard_core::spatial::{dersimonian_laird, per_model_spatial_glm, sign_flip_permutation, spatial_design_spec, MetaResult, PermSummary};
    use fairboard_core::stats::glm::ZMap;
    use fairboard_core::stats::smooth::smooth_grid;
    use fairboard_core::synthetic::{spatial_fixture, SpatialFixture};

    pub const PAIRS: usize = 50;
    pub const MODELS: usize = 18;
    pub const RHO: f64 = 0.6;
    pub const FWHM: f64 = 8.0;

    pub fn smoothed(f: &SpatialFixture) -> Vec<Vec<f32>> {
        let sp = f.grid.spacing.map(f64::from);
        f.masks
            .iter()
            .map(|m| {
                let d: Vec<f64> = m.iter().map(|&b| f64::from(b)).collect();
                smooth_grid(f.grid.dims, sp, &d, FWHM).into_iter().map(|v| v as f32).collect()
            })
            .collect()
    }

    pub fn zmaps(images: &[Vec<f32>], f: &SpatialFixture) -> Vec<ZMap> {
        let spec = spatial_design_spec();
        f.perf
            .iter()
            .map(|p| {
                let perf: Vec<Option<f64>> = p.iter().map(|&v| Some(v)).collect();
                per_model_spatial_glm(images, &f.grid, &perf, &f.cohort, &spec, None).unwrap()
            })
            .collect()
    }

    pub struct Planted {
        pub left_positive: usize,
        pub right_any: usize,
    }

    /// Significant voxels by hemisphere for the planted left-lesion effect.
    pub fn planted(seed: u64) -> Planted {
        let f = spatial_fixture(PAIRS, MODELS, RHO, Some(2), seed);
        let meta = dersimonian_laird(&zmaps(&smoothed(&f), &f), 0.05).unwrap();
        let sig = |v: usize| meta.fdr_mask[v];
        Planted {
            left_positive: (0..f.grid.len()).filter(|&v| sig(v) && f.is_left(v) && meta.pooled.z[v] > 0.0).count(),
            right_any: (0..f.grid.len()).filter(|&v| sig(v) && !f.is_left(v)).count(),
        }
    }

    /// Meta-analysis and sign-flip test with every model's labels shuffled.
    pub fn null(seed: u64, n_perm: usize) -> (MetaResult, PermSummary, Vec<ZMap>) {
        let f = spatial_fixture(PAIRS, MODELS, RHO, None, seed);
        let images = smoothed(&f);
        let maps = zmaps(&images, &f.shuffled(1000 + seed));
        let meta = dersimonian_laird(&maps, 0.05).unwrap();
        let perm = sign_flip_permutation(&maps, n_perm, seed).unwrap();
        (meta, perm, maps)
    }
}

pub mod repr {
    //! Latent-space fixtures.

    use fairboard_core::cohort::{CohortRow, Resection};
    use fairboard_core::representational::*;
    use fairboard_core::synthetic::{synthetic_cohort, two_blobs};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    pub const CONFIGS: [(usize, f64); 6] = [(5, 0.1), (5, 0.3), (15, 0.1), (15, 0.3), (30, 0.1), (30, 0.3)];

    /// Whether the two-blob fixture yields a significant cluster of each sign
    /// under one embedding configuration.
    pub fn two_blob_signs(seed: u64, n_neighbors: usize, min_dist: f64) -> (bool, bool) {
        let (x, labels) = two_blobs(100, 10, 10.0, seed);
        let perf: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
        let p = EmbedParams {
            n_neighbors,
            min_dist,
            seed,
            ..Default::default()
        };
        let coords = embed_2d(&x, &p).unwrap();
        let raster = rasterize_latent(&coords, RASTER_SIZE, SPIKE_FWHM).unwrap();
        let g = latent_glm(&raster, &perf, 0.05).unwrap();
        (g.has_cluster_of_sign(1), g.has_cluster_of_sign(-1))
    }

    /// Most biopsy patients share a lesion pattern and a performance deficit;
    /// everyone else carries lesions scattered over the other half of the
    /// grid. A quarter of the biopsy group is left unplanted, since a cluster
    /// holding every biopsy patient leaves that column with zero pooled
    /// variance and no defined d.
    pub struct BiopsyFixture {
        pub cohort: Vec<CohortRow>,
        pub lesions: BitRows,
        pub perf: Vec<Option<f64>>,
    }

    pub const LESION_COLS: usize = 400;

    pub fn biopsy_fixture(n: usize, seed: u64) -> BiopsyFixture {
        let cohort = synthetic_cohort(n, seed);
        let mut r = fairboard_core::stats::rng::stream(seed, 7);
        let mut lesions = BitRows::new(LESION_COLS);
        let mut perf = Vec::with_capacity(n);
        for row in &cohort {
            let biopsy = row.resection == Some(Resection::Biopsy) && r.random::<f64>() < 0.75;
            let start = if biopsy { r.random_range(0..40) } else { r.random_range(150..340) };
            let len = r.random_range(40..60);
            let bits: Vec<u8> = (0..LESION_COLS).map(|c| u8::from(c >= start && c < start + len)).collect();
            lesions.push(&bits).unwrap();
            let z: f64 = r.sample(StandardNormal);
            perf.push(Some(if biopsy { -1.0 } else { 0.25 } + 0.5 * z));
        }
        BiopsyFixture { cohort, lesions, perf }
    }

    /// Feature space, embedding and latent analysis of the biopsy fixture.
    pub fn biopsy_analysis(seed: u64) -> (FeatureSpace, LatentAnalysis) {
        let f = biopsy_fixture(200, seed);
        let space = build_feature_matrix(&f.lesions, &f.cohort, &[], PCA_MAX_COMPONENTS).unwrap();
        let params = EmbedParams {
            seed,
            ..Default::default()
        };
        let coords = embed_2d(&space.standardized, &params).unwrap();
        let perf: Vec<Option<f64>> = space.rows.iter().map(|&i| f.perf[i]).collect();
        let a = latent_analysis(&space, &coords, &perf, &LatentConfig::default()).unwrap();
        (space, a)
    }

    /// The profile of patients in negative clusters only.
    pub fn deficit_profile(space: &FeatureSpace, a: &LatentAnalysis) -> EffectProfile {
        let mut members = vec![false; space.n()];
        for c in a.glm.clusters.iter().filter(|c| c.sign < 0) {
            c.members.iter().for_each(|&m| members[m] = true);
        }
        cluster_effect_profile(&members, space).unwrap()
    }
}

pub mod league {
    //! Minimal league inputs: WT dice and WT hd95 per patient, one
    //! inequality cell per index column used.

    use fairboard_core::inequality::{Index, InequalityRow};
    use fairboard_core::metrics::{Metric, MetricRecord, Outcome};
    use fairboard_core::volume::Compartment;

    pub fn wt(m: Metric) -> Outcome {
        Outcome::new(Compartment::WT, m)
    }

    /// `dice[m][p]` and `hd95[m][p]` for model `m{m}` and patient `P{p}`.
    pub fn records<const P: usize>(dice: &[[f64; P]], hd95: &[[f64; P]]) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (m, (d, h)) in dice.iter().zip(hd95).enumerate() {
            for p in 0..P {
                let mut r = MetricRecord::empty(format!("P{p}"), format!("m{m}"));
                r.set(wt(Metric::Dice), Some(d[p]));
                r.set(wt(Metric::Hd95), Some(h[p]));
                out.push(r);
            }
        }
        out
    }

    /// WT dice Gini and WT hd95 Palma per model.
    pub fn inequality(gini: &[f64], palma: &[f64]) -> Vec<InequalityRow> {
        gini.iter()
            .zip(palma)
            .enumerate()
            .map(|(m, (&g, &p))| {
                let mut values = vec![[None; 7]; 28];
                values[wt(Metric::Dice).position()][Index::Gini.position()] = Some(g);
                values[wt(Metric::Hd95).position()][Index::Palma.position()] = Some(p);
                InequalityRow {
                    model_id: format!("m{m}"),
                    values,
                }
            })
            .collect()
    }

    pub fn mean<const P: usize>(x: &[f64; P]) -> f64 {
        x.iter().sum::<f64>() / P as f64
    }

    pub const DICE: [[f64; 3]; 3] = [[0.9, 0.8, 0.85], [0.7, 0.75, 0.6], [0.95, 0.5, 0.8]];
    pub const HD95: [[f64; 3]; 3] = [[3.0, 5.0, 4.0], [2.0, 2.5, 3.5], [8.0, 1.0, 6.0]];
    pub const GINI: [f64; 3] = [0.05, 0.08, 0.2];
    pub const PALMA: [f64; 3] = [1.4, 1.1, 2.3];
}
