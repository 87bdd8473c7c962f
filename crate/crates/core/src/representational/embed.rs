//! Two-dimensional embeddings: UMAP and a deterministic PCA projection.
//!
//! The UMAP path follows the reference algorithm: exact k-nearest
//! neighbours, per-point bandwidths from `smooth_knn_dist`, a fuzzy union of
//! the directed graph, spectral initialisation from the normalised Laplacian
//! and serial negative-sampling SGD on the fuzzy cross-entropy. Serial SGD
//! keeps a fixed seed bit-reproducible.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    Umap,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedParams {
    pub method: EmbedMethod,
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub metric: Metric,
    pub seed: u64,
    pub n_epochs: usize,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams {
            method: EmbedMethod::Umap,
            n_neighbors: 15,
            min_dist: 0.1,
            metric: Metric::Cosine,
            seed: rng::DEFAULT_SEED,
            n_epochs: 500,
        }
    }
}

impl EmbedParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::InvalidParameter("n_neighbors must be at least 2".into()));
        }
        if !(self.min_dist >= 0.0 && self.min_dist < SPREAD) {
            return Err(Error::InvalidParameter(format!(
                "min_dist must lie in [0, {SPREAD}), got {}",
                self.min_dist
            )));
        }
        if self.n_epochs == 0 {
            return Err(Error::InvalidParameter("n_epochs must be positive".into()));
        }
        Ok(())
    }
}

const SPREAD: f64 = 1.0;
const NEGATIVE_SAMPLE_RATE: f64 = 5.0;
const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
const GRAD_CLIP: f64 = 4.0;

/// Embed `features` (one row per point) in 2-D.
pub fn embed_2d(features: &[Vec<f64>], params: &EmbedParams) -> Result<Vec<[f64; 2]>> {
    params.validate()?;
    check_rows(features)?;
    match params.method {
        EmbedMethod::Pca => pca_2d(features),
        EmbedMethod::Umap => umap(features, params),
    }
}

fn check_rows(features: &[Vec<f64>]) -> Result<usize> {
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidParameter("feature rows differ in length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(d)
}

/// Projection onto the two leading principal axes. Each axis is signed so its
/// largest-magnitude loading is positive; a missing second axis is zero.
pub fn pca_2d(features: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_rows(features)?;
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j] - mean[j]);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        orient(&mut v);
        for (i, o) in out.iter_mut().enumerate() {
            o[axis] = (0..d).map(|j| x[(i, j)] * v[j]).sum();
        }
    }
    Ok(out)
}

fn orient(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            match (aa == 0.0, bb == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => (1.0 - ab / (aa * bb).sqrt()).max(0.0),
            }
        }
    }
}

/// Exact k nearest neighbours of every point, the point itself first.
/// Ties break by index.
pub fn knn(features: &[Vec<f64>], k: usize, metric: Metric) -> Vec<Vec<(usize, f64)>> {
    let n = features.len();
    (0..n)
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .map(|j| (j, if i == j { 0.0 } else { distance(metric, &features[i], &features[j]) }))
                .collect();
            d.sort_by(|a, b| {
                (a.0 != i)
                    .cmp(&(b.0 != i))
                    .then(a.1.total_cmp(&b.1))
                    .then(a.0.cmp(&b.0))
            });
            d.truncate(k);
            d
        })
        .collect()
}

/// Per-point `(rho, sigma)`: rho is the distance to the nearest distinct
/// neighbour and sigma solves `sum exp(-(d - rho)/sigma) = log2(k)` over the
/// non-self neighbours.
pub fn smooth_knn_dist(neighbours: &[Vec<(usize, f64)>], k: usize) -> Vec<(f64, f64)> {
    let target = (k as f64).log2();
    let mean_all = {
        let all: Vec<f64> = neighbours.iter().flat_map(|r| r.iter().map(|p| p.1)).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    };
    neighbours
        .iter()
        .map(|row| {
            let ds: Vec<f64> = row.iter().skip(1).map(|p| p.1).collect();
            let rho = ds.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
            let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
            for _ in 0..64 {
                let psum: f64 = ds.iter().map(|&d| (-(d - rho).max(0.0) / mid).exp()).sum();
                if (psum - target).abs() < SMOOTH_K_TOLERANCE {
                    break;
                }
                if psum > target {
                    hi = mid;
                    mid = 0.5 * (lo + hi);
                } else {
                    lo = mid;
                    mid = if hi.is_infinite() { 2.0 * mid } else { 0.5 * (lo + hi) };
                }
            }
            let mean_row = ds.iter().sum::<f64>() / ds.len().max(1) as f64;
            let floor = MIN_K_DIST_SCALE * if rho > 0.0 { mean_row } else { mean_all };
            (rho, mid.max(floor))
        })
        .collect()
}

/// Symmetric fuzzy graph as a sorted edge list `(i, j, w)` with `i < j`.
pub fn fuzzy_graph(neighbours: &[Vec<(usize, f64)>], k: usize) -> Vec<(usize, usize, f64)> {
    let bw = smooth_knn_dist(neighbours, k);
    let mut directed = std::collections::BTreeMap::new();
    for (i, row) in neighbours.iter().enumerate() {
        let (rho, sigma) = bw[i];
        for &(j, d) in row.iter().skip(1) {
            let w = (-(d - rho).max(0.0) / sigma).exp();
            directed.insert((i, j), w);
        }
    }
    let mut sym = std::collections::BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let u = w + back - w * back;
        sym.insert((i.min(j), i.max(j)), u);
    }
    sym.into_iter().filter(|&(_, w)| w > 0.0).map(|((i, j), w)| (i, j, w)).collect()
}

/// Least-squares fit of `1 / (1 + a x^(2b))` to the target membership curve
/// for `min_dist` (spread 1), by damped Gauss–Newton.
pub fn find_ab_params(min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * SPREAD * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / SPREAD).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                (f - y) * (f - y)
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 1.0);
    let mut lambda = 1e-3;
    let mut cur = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let den = 1.0 + a * p;
            let f = 1.0 / den;
            let ga = -p / (den * den);
            let gb = -a * p * 2.0 * x.ln() / (den * den);
            let g = [ga, gb];
            for r in 0..2 {
                jtr[r] += g[r] * (f - y);
                for c in 0..2 {
                    jtj[r][c] += g[r] * g[c];
                }
            }
        }
        let m = [[jtj[0][0] * (1.0 + lambda), jtj[0][1]], [jtj[1][0], jtj[1][1] * (1.0 + lambda)]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let da = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
        let db = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
        let (na, nb) = (a + da, b + db);
        let next = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if next < cur {
            let done = (cur - next) <= 1e-15 * cur.max(1e-300);
            a = na;
            b = nb;
            cur = next;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

fn components(n: usize, edges: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j, _) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for i in 0..n {
        if label[roots[i]] == usize::MAX {
            label[roots[i]] = next;
            next += 1;
        }
        out[i] = label[roots[i]];
    }
    out
}

/// Eigenvectors 2 and 3 of the symmetric normalised Laplacian of a connected
/// graph, or `None` when the graph is too small for a spectral layout.
fn spectral(n: usize, edges: &[(usize, usize, f64)]) -> Option<Vec<[f64; 2]>> {
    if n < 4 {
        return None;
    }
    let mut w = DMatrix::<f64>::zeros(n, n);
    for &(i, j, v) in edges {
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let norm = if deg[i] > 0.0 && deg[j] > 0.0 { w[(i, j)] / (deg[i] * deg[j]).sqrt() } else { 0.0 };
        f64::from(u8::from(i == j)) - norm
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut out = vec![[0.0; 2]; n];
    for (axis, &k) in order.iter().skip(1).take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        orient(&mut v);
        for i in 0..n {
            out[i][axis] = v[i];
        }
    }
    Some(out)
}

/// Spectral layout per connected component, components placed by a PCA of
/// their feature-space centroids.
fn initial_layout(features: &[Vec<f64>], edges: &[(usize, usize, f64)], seed: u64) -> Vec<[f64; 2]> {
    let n = features.len();
    let comp = components(n, edges);
    let n_comp = comp.iter().max().map_or(0, |m| m + 1);
    let mut r = rng::stream(seed, 1);
    let mut out = vec![[0.0; 2]; n];
    let members: Vec<Vec<usize>> = (0..n_comp).map(|c| (0..n).filter(|&i| comp[i] == c).collect()).collect();
    let (anchors, radius) = if n_comp == 1 {
        (vec![[0.0, 0.0]], 10.0)
    } else {
        let d = features[0].len();
        let centroids: Vec<Vec<f64>> = members
            .iter()
            .map(|m| (0..d).map(|j| m.iter().map(|&i| features[i][j]).sum::<f64>() / m.len() as f64).collect())
            .collect();
        let mut a = pca_2d(&centroids).unwrap_or_else(|_| vec![[0.0; 2]; n_comp]);
        let scale = a.iter().flat_map(|p| p.iter().map(|v| v.abs())).fold(0.0, f64::max);
        if scale > 0.0 {
            a.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= 10.0 / scale));
        }
        let mut gap = f64::INFINITY;
        for i in 0..n_comp {
            for j in i + 1..n_comp {
                gap = gap.min(((a[i][0] - a[j][0]).powi(2) + (a[i][1] - a[j][1]).powi(2)).sqrt());
            }
        }
        let radius = if gap.is_finite() && gap > 0.0 { 0.4 * gap } else { 1.0 };
        (a, radius)
    };
    for (c, m) in members.iter().enumerate() {
        let index: std::collections::BTreeMap<usize, usize> = m.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let sub: Vec<(usize, usize, f64)> = edges
            .iter()
            .filter(|e| comp[e.0] == c)
            .map(|&(i, j, w)| (index[&i], index[&j], w))
            .collect();
        let local = spectral(m.len(), &sub)
            .unwrap_or_else(|| (0..m.len()).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect());
        let scale = local.iter().flat_map(|p| p.iter().map(|v| v.abs())).fold(0.0, f64::max);
        let f = if scale > 0.0 { radius / scale } else { 0.0 };
        for (k, &i) in m.iter().enumerate() {
            out[i] = [anchors[c][0] + f * local[k][0], anchors[c][1] + f * local[k][1]];
        }
    }
    let noise = Normal::new(0.0, 1e-4).expect("valid sd");
    for p in out.iter_mut() {
        p[0] += noise.sample(&mut r);
        p[1] += noise.sample(&mut r);
    }
    // rescale each axis to [0, 10]
    for axis in 0..2 {
        let lo = out.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = out.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        out.iter_mut().for_each(|p| p[axis] = 10.0 * (p[axis] - lo) / span);
    }
    out
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

fn umap(features: &[Vec<f64>], params: &EmbedParams) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < params.n_neighbors + 1 {
        return Err(Error::TooFewPoints {
            got: n,
            neighbors: params.n_neighbors,
        });
    }
    let nb = knn(features, params.n_neighbors, params.metric);
    let mut edges = fuzzy_graph(&nb, params.n_neighbors);
    let mut y = initial_layout(features, &edges, params.seed);
    let n_epochs = params.n_epochs;
    let wmax = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    edges.retain(|e| e.2 >= wmax / n_epochs as f64);
    let (a, b) = find_ab_params(params.min_dist);

    // each undirected edge is optimised in both directions, as the reference
    // implementation does with its symmetric sparse matrix
    let heads: Vec<(usize, usize)> = edges.iter().flat_map(|&(i, j, _)| [(i, j), (j, i)]).collect();
    let eps: Vec<f64> = edges.iter().flat_map(|e| [wmax / e.2; 2]).collect();
    let eps_neg: Vec<f64> = eps.iter().map(|e| e / NEGATIVE_SAMPLE_RATE).collect();
    let mut next_sample = eps.clone();
    let mut next_neg = eps_neg.clone();
    let mut r = rng::stream(params.seed, 2);

    for epoch in 0..n_epochs {
        let alpha = 1.0 - epoch as f64 / n_epochs as f64;
        let e = epoch as f64;
        for (k, &(i, j)) in heads.iter().enumerate() {
            if next_sample[k] > e {
                continue;
            }
            let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
            if d2 > 0.0 {
                let coeff = -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0);
                for axis in 0..2 {
                    let g = clip(coeff * (y[i][axis] - y[j][axis]));
                    y[i][axis] += g * alpha;
                    y[j][axis] -= g * alpha;
                }
            }
            next_sample[k] += eps[k];
            let n_neg = ((e - next_neg[k]) / eps_neg[k]).trunc() as i64;
            for _ in 0..n_neg.max(0) {
                let t = r.random_range(0..n);
                if t == i {
                    continue;
                }
                let d2 = (y[i][0] - y[t][0]).powi(2) + (y[i][1] - y[t][1]).powi(2);
                let coeff = if d2 > 0.0 { 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0)) } else { 0.0 };
                for axis in 0..2 {
                    let g = if coeff > 0.0 { clip(coeff * (y[i][axis] - y[t][axis])) } else { GRAD_CLIP };
                    y[i][axis] += g * alpha;
                }
            }
            next_neg[k] += n_neg.max(0) as f64 * eps_neg[k];
        }
    }
    Ok(y)
}
