//! Mass-univariate ordinary least squares with per-cell t statistics mapped to z.
//!
//! All cells share one design, so `X = QR` is factored once. Each cell then
//! needs `w = Qᵀy`, the contrast estimate `(R⁻¹w)_c` and the residual sum of
//! squares, accumulated in two streaming passes over the case images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use super::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::volume::{Grid, Volume};

/// Largest |z| reported. Beyond this the Student-t tail underflows in f64.
pub const Z_CLAMP: f64 = 40.0;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZMap {
    pub grid: Grid,
    /// z per cell; NaN off the mask.
    pub z: Vec<f64>,
    pub mask: Vec<bool>,
    pub df: f64,
}

impl ZMap {
    pub fn n_mask(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Two-sided normal p-values on the mask, `None` elsewhere.
    pub fn p_values(&self) -> Vec<Option<f64>> {
        self.z
            .iter()
            .zip(&self.mask)
            .map(|(&z, &m)| m.then(|| two_sided_p(z)))
            .collect()
    }

    /// Export with zeros off the mask.
    pub fn to_volume(&self) -> Result<Volume> {
        let data = self
            .z
            .iter()
            .zip(&self.mask)
            .map(|(&z, &m)| if m { z as f32 } else { 0.0 })
            .collect();
        self.grid.volume_f32(data)
    }

    pub fn max_abs(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(z, _)| z.abs())
            .fold(0.0, f64::max)
    }
}

pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Map a Student-t statistic to the standard normal quantile with the same
/// tail probability. Computed from the lower tail of `-|t|` and mirrored, so
/// it is exactly sign-symmetric; clamped to `±Z_CLAMP`.
pub fn t_to_z(t: f64, df: f64) -> f64 {
    if t.is_nan() || !(df > 0.0) {
        return f64::NAN;
    }
    if t == 0.0 {
        return 0.0;
    }
    let lower = if t.is_infinite() {
        0.0
    } else {
        0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t))
    };
    let mag = if lower > 0.0 {
        let n = Normal::standard();
        (-n.inverse_cdf(lower)).min(Z_CLAMP)
    } else {
        Z_CLAMP
    };
    mag.max(0.0).copysign(t)
}

/// Fit `y = Xβ + ε` in every cell of the analysis mask and report z for the
/// `contrast` column. `observations[i]` is the image for design row `i`.
///
/// The default mask is every cell with a nonzero value in any observation,
/// intersected with `mask` when one is given. Cells constant across cases
/// get z = 0; an exact fit gets `±Z_CLAMP`.
pub fn mass_univariate_glm<O: AsRef<[f32]> + Sync>(
    observations: &[O],
    grid: &Grid,
    design: &DesignMatrix,
    contrast: &str,
    mask: Option<&[bool]>,
) -> Result<ZMap> {
    let n = design.n_rows();
    let p = design.n_cols();
    let cells = grid.len();
    if observations.len() != n {
        return Err(Error::GridMismatch(format!(
            "{} observations for {} design rows",
            observations.len(),
            n
        )));
    }
    if let Some(o) = observations.iter().find(|o| o.as_ref().len() != cells) {
        return Err(Error::GridMismatch(format!(
            "observation has {} cells, grid has {}",
            o.as_ref().len(),
            cells
        )));
    }
    if let Some(m) = mask {
        if m.len() != cells {
            return Err(Error::GridMismatch("mask length differs from grid".into()));
        }
    }
    let c = design.column_index(contrast)?;
    if n <= p {
        return Err(Error::RankDeficient(format!("{n} rows for {p} columns")));
    }
    let qr = design.x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let rmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * rmax) {
        return Err(Error::RankDeficient("R has a vanishing pivot".into()));
    }
    let rinv = r
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("R is singular".into()))?;
    let contrast_row: Vec<f64> = (0..p).map(|k| rinv[(c, k)]).collect();
    let var_factor: f64 = contrast_row.iter().map(|v| v * v).sum();
    let df = (n - p) as f64;
    // row-major copy of Q for the inner loops
    let qrows: Vec<f64> = (0..n).flat_map(|i| (0..p).map(move |k| (i, k))).map(|(i, k)| q[(i, k)]).collect();

    let analysis: Vec<bool> = (0..cells)
        .into_par_iter()
        .map(|j| {
            mask.is_none_or(|m| m[j]) && observations.iter().any(|o| o.as_ref()[j] != 0.0)
        })
        .collect();
    let idx: Vec<usize> = (0..cells).filter(|&j| analysis[j]).collect();

    let zs: Vec<f64> = idx
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| {
            let len = chunk.len();
            let mut w = vec![0.0; p * len];
            let mut lo = vec![f64::INFINITY; len];
            let mut hi = vec![f64::NEG_INFINITY; len];
            let mut ss = vec![0.0; len];
            for (i, obs) in observations.iter().enumerate() {
                let y = obs.as_ref();
                let qi = &qrows[i * p..(i + 1) * p];
                for (t, &j) in chunk.iter().enumerate() {
                    let v = y[j] as f64;
                    lo[t] = lo[t].min(v);
                    hi[t] = hi[t].max(v);
                    ss[t] += v * v;
                    for k in 0..p {
                        w[k * len + t] += qi[k] * v;
                    }
                }
            }
            let mut rss = vec![0.0; len];
            for (i, obs) in observations.iter().enumerate() {
                let y = obs.as_ref();
                let qi = &qrows[i * p..(i + 1) * p];
                for (t, &j) in chunk.iter().enumerate() {
                    let mut fit = 0.0;
                    for k in 0..p {
                        fit += qi[k] * w[k * len + t];
                    }
                    let e = y[j] as f64 - fit;
                    rss[t] += e * e;
                }
            }
            (0..len)
                .map(|t| {
                    if lo[t] == hi[t] {
                        return 0.0;
                    }
                    let beta: f64 = (0..p).map(|k| contrast_row[k] * w[k * len + t]).sum();
                    if rss[t] <= 1e-24 * ss[t] {
                        return if beta.abs() > 1e-12 * ss[t].sqrt() {
                            Z_CLAMP.copysign(beta)
                        } else {
                            0.0
                        };
                    }
                    let se = (rss[t] / df * var_factor).sqrt();
                    t_to_z(beta / se, df)
                })
                .collect::<Vec<f64>>()
        })
        .collect();

    let mut z = vec![f64::NAN; cells];
    for (&j, &v) in idx.iter().zip(&zs) {
        z[j] = v;
    }
    Ok(ZMap {
        grid: grid.clone(),
        z,
        mask: analysis,
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::design::{build_design, Covariate, Covariates, PredictorSpec, Term};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    struct X(f64);
    impl Covariates for X {
        fn covariate(&self, name: &str) -> Result<Option<Covariate<'_>>> {
            match name {
                "x" => Ok(Some(Covariate::Num(self.0))),
                _ => Err(Error::UnknownColumn(name.into())),
            }
        }
    }

    fn design(xs: &[f64], z: bool) -> DesignMatrix {
        let rows: Vec<X> = xs.iter().map(|&v| X(v)).collect();
        build_design(
            &rows,
            &PredictorSpec::new(vec![
                Term::Intercept,
                Term::Continuous {
                    column: "x".into(),
                    label: "x".into(),
                    zscore: z,
                },
            ]),
        )
        .unwrap()
    }

    /// Textbook OLS through the normal equations, independent of the QR path.
    fn ols_t(x: &DMatrix<f64>, y: &[f64], c: usize) -> f64 {
        let n = x.nrows();
        let p = x.ncols();
        let yv = DVector::from_column_slice(y);
        let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
        let beta = &xtx_inv * x.transpose() * &yv;
        let resid = &yv - x * &beta;
        let s2 = resid.dot(&resid) / (n - p) as f64;
        beta[c] / (s2 * xtx_inv[(c, c)]).sqrt()
    }

    #[test]
    fn t_to_z_reference_points() {
        // large df: t ≈ z
        assert!((t_to_z(1.96, 1e7) - 1.96).abs() < 1e-5);
        // df=1 is Cauchy: P(T<-1) = 0.25, z = Φ⁻¹(0.75)
        assert!((t_to_z(1.0, 1.0) - 0.6744897501960817).abs() < 1e-9);
        assert_eq!(t_to_z(1e300, 10.0), Z_CLAMP);
        assert_eq!(t_to_z(-f64::INFINITY, 10.0), -Z_CLAMP);
        assert_eq!(t_to_z(0.0, 5.0), 0.0);
    }

    #[test]
    fn t_to_z_monotone_and_odd() {
        for &df in &[1.0, 3.0, 10.0, 98.0, 5000.0] {
            let mut prev = f64::NEG_INFINITY;
            for k in -400..=400 {
                let t = k as f64 * 0.25;
                let z = t_to_z(t, df);
                assert!(z >= prev, "df={df} t={t}");
                assert_eq!(z, -t_to_z(-t, df));
                assert_eq!(z.signum() * t.signum() >= 0.0, true);
                prev = z;
            }
        }
    }

    #[test]
    fn identical_observations_give_zero() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let d = design(&xs, true);
        let img: Vec<f32> = (0..27).map(|j| (j % 4) as f32 * 0.25).collect();
        let obs = vec![img; 12];
        let zm = mass_univariate_glm(&obs, &Grid::new([3, 3, 3], [2.0; 3]), &d, "x", None).unwrap();
        assert!(zm.n_mask() > 0);
        for j in 0..27 {
            if zm.mask[j] {
                assert_eq!(zm.z[j], 0.0);
            } else {
                assert!(zm.z[j].is_nan());
            }
        }
    }

    #[test]
    fn perfect_fit_clamps() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let d = design(&xs, false);
        let obs: Vec<Vec<f32>> = xs.iter().map(|&x| vec![(2.0 * x) as f32, (-3.0 * x) as f32]).collect();
        let zm = mass_univariate_glm(&obs, &Grid::new([2, 1, 1], [1.0; 3]), &d, "x", None).unwrap();
        assert_eq!(zm.z, vec![Z_CLAMP, -Z_CLAMP]);
    }

    #[test]
    fn matches_reference_ols() {
        let mut rng = crate::stats::rng::rng(11);
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let d = design(&xs, true);
        let cells = 64;
        let obs: Vec<Vec<f32>> = d
            .x
            .column(1)
            .iter()
            .map(|&x| {
                (0..cells)
                    .map(|j| {
                        let e: f64 = rng.sample(StandardNormal);
                        (0.5 * x * (j % 3) as f64 + e + 3.0) as f32
                    })
                    .collect()
            })
            .collect();
        let zm = mass_univariate_glm(&obs, &Grid::new([4, 4, 4], [1.0; 3]), &d, "x", None).unwrap();
        assert_eq!(zm.df, 98.0);
        for j in 0..cells {
            let y: Vec<f64> = obs.iter().map(|o| o[j] as f64).collect();
            let t = ols_t(&d.x, &y, 1);
            let z_ref = t_to_z(t, 98.0);
            assert!((zm.z[j] - z_ref).abs() <= 1e-6 * z_ref.abs().max(1.0), "cell {j}: {} vs {z_ref}", zm.z[j]);
            if j % 3 == 2 {
                assert!(zm.z[j] > 5.0);
            }
        }
    }

    #[test]
    fn mask_and_errors() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let d = design(&xs, true);
        let obs: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, 0.0, 1.0 + (i % 2) as f32]).collect();
        let g = Grid::new([3, 1, 1], [1.0; 3]);
        let zm = mass_univariate_glm(&obs, &g, &d, "x", Some(&[true, true, false])).unwrap();
        assert_eq!(zm.mask, vec![true, false, false]);
        assert!(matches!(mass_univariate_glm(&obs[..5], &g, &d, "x", None), Err(Error::GridMismatch(_))));
        assert!(matches!(mass_univariate_glm(&obs, &g, &d, "nope", None), Err(Error::UnknownColumn(_))));
    }
}
