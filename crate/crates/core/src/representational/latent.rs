//! Rasterised latent space and the latent-space GLM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::design::DesignMatrix;
use crate::stats::fdr::bh_fdr;
use crate::stats::glm::{mass_univariate_glm, ZMap};
use crate::stats::smooth::fwhm_to_sigma;
use crate::stats::standardize::zscore;
use crate::volume::Grid;

pub const RASTER_SIZE: usize = 300;
pub const SPIKE_FWHM: f64 = 18.0;
/// Fraction of the grid left empty on each side.
pub const RASTER_MARGIN: f64 = 0.05;

/// Patients as unit-mass Gaussian spikes on a square grid. Spikes are
/// separable, so only the per-axis weights are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRaster {
    pub size: usize,
    pub spike_fwhm: f64,
    /// Patient positions in grid units; cell `i` spans `[i, i + 1)`.
    pub points: Vec<[f64; 2]>,
    /// Row-major (`x + size * y`) cells within FWHM/2 of some patient.
    pub coverage_mask: Vec<bool>,
    #[serde(skip)]
    weights: Vec<[Vec<f64>; 2]>,
}

impl LatentRaster {
    pub fn n_patients(&self) -> usize {
        self.points.len()
    }

    pub fn grid(&self) -> Grid {
        Grid::new([self.size, self.size, 1], [1.0; 3])
    }

    pub fn sigma(&self) -> f64 {
        fwhm_to_sigma(self.spike_fwhm)
    }

    pub fn spike(&self, i: usize) -> Vec<f32> {
        let [wx, wy] = &self.weights[i];
        let mut out = Vec::with_capacity(self.size * self.size);
        for &vy in wy {
            out.extend(wx.iter().map(|&vx| (vx * vy) as f32));
        }
        out
    }

    pub fn spikes(&self) -> Vec<Vec<f32>> {
        (0..self.n_patients()).map(|i| self.spike(i)).collect()
    }

    /// Cell holding patient `i`'s point.
    pub fn cell_of(&self, i: usize) -> usize {
        let c = |v: f64| (v.floor().max(0.0) as usize).min(self.size - 1);
        let [x, y] = self.points[i];
        c(x) + self.size * c(y)
    }
}

fn axis_weights(size: usize, centre: f64, sigma: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..size)
        .map(|k| {
            let d = k as f64 + 0.5 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Map `coords` isotropically into a `size`×`size` grid leaving `RASTER_MARGIN`
/// on each side, and place one spike per patient.
pub fn rasterize_latent(coords: &[[f64; 2]], size: usize, spike_fwhm: f64) -> Result<LatentRaster> {
    if coords.is_empty() {
        return Err(Error::EmptyInput);
    }
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if size == 0 || !(spike_fwhm > 0.0) {
        return Err(Error::InvalidParameter("raster size and spike fwhm must be positive".into()));
    }
    let lo = [0, 1].map(|a| coords.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min));
    let hi = [0, 1].map(|a| coords.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max));
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let usable = size as f64 * (1.0 - 2.0 * RASTER_MARGIN);
    let scale = if span > 0.0 { usable / span } else { 0.0 };
    let half = size as f64 / 2.0;
    let points: Vec<[f64; 2]> = coords
        .iter()
        .map(|p| [0, 1].map(|a| half + (p[a] - 0.5 * (lo[a] + hi[a])) * scale))
        .collect();
    let sigma = fwhm_to_sigma(spike_fwhm);
    let weights = points
        .iter()
        .map(|p| [axis_weights(size, p[0], sigma), axis_weights(size, p[1], sigma)])
        .collect();
    let radius2 = (spike_fwhm / 2.0).powi(2);
    let mut coverage_mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            coverage_mask[x + size * y] = points.iter().any(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2) <= radius2);
        }
    }
    Ok(LatentRaster {
        size,
        spike_fwhm,
        points,
        coverage_mask,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCluster {
    /// 1-based, matching `LatentGlm::labels`.
    pub id: u32,
    pub sign: i8,
    pub n_cells: usize,
    pub peak_z: f64,
    /// Patients whose point falls in the cluster.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGlm {
    pub zmap: ZMap,
    pub fdr_mask: Vec<bool>,
    pub fdr_threshold: Option<f64>,
    /// Cluster id per cell, 0 outside significant clusters.
    pub labels: Vec<u32>,
    pub clusters: Vec<LatentCluster>,
}

impl LatentGlm {
    pub fn n_significant(&self) -> usize {
        self.fdr_mask.iter().filter(|&&b| b).count()
    }

    pub fn has_cluster_of_sign(&self, sign: i8) -> bool {
        self.clusters.iter().any(|c| c.sign == sign)
    }

    /// Membership in any significant cluster, per patient.
    pub fn significant_members(&self, n_patients: usize) -> Vec<bool> {
        let mut m = vec![false; n_patients];
        for c in &self.clusters {
            for &i in &c.members {
                m[i] = true;
            }
        }
        m
    }
}

pub const LATENT_PERF_COLUMN: &str = "Perf(z)";

/// GLM of spike images on `[intercept, perf(z)]` over the coverage mask,
/// BH-thresholded at `alpha`, with 4-connected same-sign clusters.
pub fn latent_glm(raster: &LatentRaster, perf: &[f64], alpha: f64) -> Result<LatentGlm> {
    let n = raster.n_patients();
    if perf.len() != n {
        return Err(Error::InvalidParameter(format!("{} performance values for {n} patients", perf.len())));
    }
    let z = zscore(perf)?;
    let design = DesignMatrix {
        names: vec!["Intercept".into(), LATENT_PERF_COLUMN.into()],
        x: nalgebra::DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { z[i] }),
        rows: (0..n).collect(),
        dropped: 0,
        reference_levels: Default::default(),
        pruned: vec![],
    };
    let spikes = raster.spikes();
    let zmap = mass_univariate_glm(&spikes, &raster.grid(), &design, LATENT_PERF_COLUMN, Some(&raster.coverage_mask))?;
    let fdr = bh_fdr(&zmap.p_values(), alpha);
    let (labels, mut clusters) = label_clusters(raster.size, &zmap.z, &fdr.significant);
    for i in 0..n {
        let id = labels[raster.cell_of(i)];
        if id > 0 {
            clusters[id as usize - 1].members.push(i);
        }
    }
    Ok(LatentGlm {
        zmap,
        fdr_mask: fdr.significant,
        fdr_threshold: fdr.threshold,
        labels,
        clusters,
    })
}

/// 4-connected components of significant cells sharing the sign of z.
pub fn label_clusters(size: usize, z: &[f64], significant: &[bool]) -> (Vec<u32>, Vec<LatentCluster>) {
    let mut labels = vec![0u32; size * size];
    let mut clusters = Vec::new();
    let mut stack = Vec::new();
    for start in 0..size * size {
        if !significant[start] || labels[start] != 0 {
            continue;
        }
        let id = clusters.len() as u32 + 1;
        let sign: i8 = if z[start] > 0.0 { 1 } else { -1 };
        let mut n_cells = 0;
        let mut peak = 0.0f64;
        labels[start] = id;
        stack.push(start);
        while let Some(c) = stack.pop() {
            n_cells += 1;
            if z[c].abs() > peak.abs() {
                peak = z[c];
            }
            let (x, y) = (c % size, c / size);
            let mut visit = |nb: usize| {
                if significant[nb] && labels[nb] == 0 && (z[nb] > 0.0) == (sign > 0) {
                    labels[nb] = id;
                    stack.push(nb);
                }
            };
            if x > 0 {
                visit(c - 1);
            }
            if x + 1 < size {
                visit(c + 1);
            }
            if y > 0 {
                visit(c - size);
            }
            if y + 1 < size {
                visit(c + size);
            }
        }
        clusters.push(LatentCluster {
            id,
            sign,
            n_cells,
            peak_z: peak,
            members: vec![],
        });
    }
    (labels, clusters)
}
