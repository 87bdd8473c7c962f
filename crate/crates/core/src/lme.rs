//! Linear mixed model with crossed random intercepts for patient and model,
//! fitted by restricted maximum likelihood.
//!
//! The variance ratios enter as `θ = (σ_patient/σ_e, σ_model/σ_e)`. For a
//! given θ the penalised least-squares system
//!
//! ```text
//! [ΛZᵀZΛ + I   ΛZᵀX] [u]   [ΛZᵀy]
//! [XᵀZΛ        XᵀX ] [β] = [Xᵀy ]
//! ```
//!
//! is solved with σ²_e profiled out. The grouping factor with more levels has
//! a diagonal block, so it is eliminated by a Schur complement and only a
//! small dense system of size `levels(smaller factor) + p` is factored.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::CohortRow;
use crate::error::{Error, Result};
use crate::metrics::{fmt_opt, Metric, MetricRecord, Outcome};
use crate::stats::design::{build_design, matrix_rank, PredictorSpec};
use crate::stats::fdr::bh_fdr;
use crate::stats::glm::two_sided_p;
use crate::stats::standardize::zscore;
use crate::volume::Compartment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmeFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub pvals: Vec<f64>,
    pub var_patient: f64,
    pub var_model: f64,
    pub var_resid: f64,
    pub icc_patient: f64,
    pub icc_model: f64,
    pub r2_marginal: f64,
    pub r2_conditional: f64,
    pub n_obs: usize,
    pub n_patients: usize,
    pub n_models: usize,
    pub converged: bool,
    pub reml_loglik: f64,
    /// Best REML log-likelihood after each objective evaluation.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl LmeFit {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.beta[i], self.se[i], self.pvals[i]))
    }
}

/// `(icc_patient, icc_model)`; both zero when every component is zero.
pub fn icc(var_patient: f64, var_model: f64, var_resid: f64) -> (f64, f64) {
    let total = var_patient + var_model + var_resid;
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    (var_patient / total, var_model / total)
}

/// Nakagawa marginal and conditional R² from the fixed-effect predictor
/// variance (population form over observations) and the three components.
pub fn r2_nakagawa(x: &DMatrix<f64>, beta: &[f64], var_patient: f64, var_model: f64, var_resid: f64) -> (f64, f64) {
    let eta = x * DVector::from_column_slice(beta);
    let n = eta.len() as f64;
    let m = eta.mean();
    let var_fixed = eta.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let total = var_fixed + var_patient + var_model + var_resid;
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    (var_fixed / total, (var_fixed + var_patient + var_model) / total)
}

/// Cross-products that do not depend on θ, with `f` the factor with more levels.
struct Suff {
    n: usize,
    p: usize,
    nf: Vec<f64>,
    ns: Vec<f64>,
    nfs: DMatrix<f64>,
    zfx: DMatrix<f64>,
    zsx: DMatrix<f64>,
    xtx: DMatrix<f64>,
    zfy: Vec<f64>,
    zsy: DVector<f64>,
    xty: DVector<f64>,
    yty: f64,
}

struct Eval {
    dev: f64,
    r2: f64,
    sol: DVector<f64>,
    schur_inv: DMatrix<f64>,
}

impl Suff {
    fn new(y: &[f64], x: &DMatrix<f64>, f: &[usize], nlf: usize, s: &[usize], nls: usize) -> Self {
        let p = x.ncols();
        let mut nf = vec![0.0; nlf];
        let mut ns = vec![0.0; nls];
        let mut nfs = DMatrix::zeros(nlf, nls);
        let mut zfx = DMatrix::zeros(nlf, p);
        let mut zsx = DMatrix::zeros(nls, p);
        let mut zfy = vec![0.0; nlf];
        let mut zsy = DVector::zeros(nls);
        for (r, (&i, &j)) in f.iter().zip(s).enumerate() {
            nf[i] += 1.0;
            ns[j] += 1.0;
            nfs[(i, j)] += 1.0;
            zfy[i] += y[r];
            zsy[j] += y[r];
            for k in 0..p {
                zfx[(i, k)] += x[(r, k)];
                zsx[(j, k)] += x[(r, k)];
            }
        }
        let yv = DVector::from_column_slice(y);
        Suff {
            n: y.len(),
            p,
            nf,
            ns,
            nfs,
            zfx,
            zsx,
            xtx: x.transpose() * x,
            zfy,
            zsy,
            xty: x.transpose() * &yv,
            yty: yv.dot(&yv),
        }
    }

    fn eval(&self, tf: f64, ts: f64) -> Option<Eval> {
        let nls = self.ns.len();
        let m = nls + self.p;
        let nlf = self.nf.len();
        // rows of W scaled by θ_f / sqrt(D_i), so that WᵀW is the correction term
        let mut w = DMatrix::zeros(nlf, m);
        let mut wy = DVector::zeros(nlf);
        let mut logdet = 0.0;
        let mut d = vec![0.0; nlf];
        for i in 0..nlf {
            d[i] = tf * tf * self.nf[i] + 1.0;
            logdet += d[i].ln();
            let c = tf / d[i].sqrt();
            for j in 0..nls {
                w[(i, j)] = c * ts * self.nfs[(i, j)];
            }
            for k in 0..self.p {
                w[(i, nls + k)] = c * self.zfx[(i, k)];
            }
            wy[i] = c * self.zfy[i];
        }
        let mut g = DMatrix::zeros(m, m);
        for j in 0..nls {
            g[(j, j)] = ts * ts * self.ns[j] + 1.0;
            for k in 0..self.p {
                g[(j, nls + k)] = ts * self.zsx[(j, k)];
                g[(nls + k, j)] = ts * self.zsx[(j, k)];
            }
        }
        g.view_mut((nls, nls), (self.p, self.p)).copy_from(&self.xtx);
        let schur = g - w.tr_mul(&w);
        let mut rhs = DVector::zeros(m);
        for j in 0..nls {
            rhs[j] = ts * self.zsy[j];
        }
        rhs.rows_mut(nls, self.p).copy_from(&self.xty);
        let reduced = &rhs - w.tr_mul(&wy);
        let chol = schur.cholesky()?;
        logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let sol = chol.solve(&reduced);
        // u_f = (b_f − E·sol) / D, and r² = yᵀy − uᵀb − solᵀrhs
        let wsol = &w * &sol;
        let mut ub = 0.0;
        for i in 0..nlf {
            let bf = tf * self.zfy[i];
            let uf = (bf - d[i].sqrt() * wsol[i]) / d[i];
            ub += uf * bf;
        }
        let r2 = self.yty - ub - sol.dot(&rhs);
        let r2 = r2.max(self.yty * 1e-300).max(f64::MIN_POSITIVE);
        let dev = logdet + (self.n - self.p) as f64 * r2.ln();
        Some(Eval {
            dev,
            r2,
            sol,
            schur_inv: chol.inverse(),
        })
    }

    fn deviance(&self, t: &[f64]) -> f64 {
        self.eval(t[0].abs(), t[1].abs()).map_or(f64::INFINITY, |e| e.dev)
    }
}

struct Objective<'a> {
    suff: &'a Suff,
    /// Coordinates held at zero; the free ones are optimised.
    fixed: [bool; 2],
    best: Mutex<(f64, Vec<f64>)>,
}

impl Objective<'_> {
    fn expand(&self, free: &[f64]) -> [f64; 2] {
        let mut it = free.iter();
        let mut t = [0.0; 2];
        for (k, v) in t.iter_mut().enumerate() {
            if !self.fixed[k] {
                *v = it.next().map_or(0.0, |v| v.abs());
            }
        }
        t
    }
}

struct Cost<'a, 'b>(&'a Objective<'b>);

impl CostFunction for Cost<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, free: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let dev = self.0.suff.deviance(&self.0.expand(free));
        let mut best = self.0.best.lock().unwrap();
        let cur = best.0.min(dev);
        best.0 = cur;
        best.1.push(cur);
        Ok(dev)
    }
}

fn nelder_mead(obj: &Objective<'_>, start: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut simplex = vec![start.to_vec()];
    for k in 0..start.len() {
        let mut v = start.to_vec();
        v[k] += 0.25 * start[k].abs().max(0.1);
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-10)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let res = Executor::new(Cost(obj), solver)
        .configure(|s| s.max_iters(400))
        .run()
        .map_err(|e| Error::InvalidParameter(format!("optimiser: {e}")))?;
    let state = res.state();
    let param = state
        .best_param
        .clone()
        .ok_or_else(|| Error::InvalidParameter("optimiser returned no parameters".into()))?;
    Ok((param, state.best_cost))
}

const START_RATIOS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
const BOUNDARY_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-2;

fn index_levels<S: AsRef<str>>(ids: &[S]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for id in ids {
        let k = map.len();
        map.entry(id.as_ref()).or_insert(k);
    }
    // sorted order keeps results independent of row order
    let sorted: BTreeMap<&str, usize> = map.keys().enumerate().map(|(i, k)| (*k, i)).collect();
    (ids.iter().map(|id| sorted[id.as_ref()]).collect(), sorted.len())
}

/// Fit `y = Xβ + Z_p u_p + Z_m u_m + ε`. Rows with non-finite `y` are dropped.
pub fn fit_crossed_lme<S: AsRef<str>, T: AsRef<str>>(
    y: &[f64],
    x: &DMatrix<f64>,
    names: &[String],
    patient_ids: &[S],
    model_ids: &[T],
) -> Result<LmeFit> {
    if y.len() != x.nrows() || y.len() != patient_ids.len() || y.len() != model_ids.len() {
        return Err(Error::InvalidParameter("y, X and grouping ids must have equal length".into()));
    }
    if names.len() != x.ncols() {
        return Err(Error::InvalidParameter("one name per design column required".into()));
    }
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_finite()).collect();
    let y: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let x = x.select_rows(keep.iter());
    let pids: Vec<&str> = keep.iter().map(|&i| patient_ids[i].as_ref()).collect();
    let mids: Vec<&str> = keep.iter().map(|&i| model_ids[i].as_ref()).collect();
    let (pl, np) = index_levels(&pids);
    let (ml, nm) = index_levels(&mids);
    let p = x.ncols();
    if np < 2 || nm < 2 {
        return Err(Error::SingularDesign(format!("{np} patients and {nm} models; need at least 2 of each")));
    }
    if y.len() <= p || matrix_rank(&x) < p {
        return Err(Error::SingularDesign(format!("design of {p} columns over {} rows is rank deficient", y.len())));
    }
    // patient is the `f` factor unless models outnumber patients
    let patient_is_f = np >= nm;
    let suff = if patient_is_f {
        Suff::new(&y, &x, &pl, np, &ml, nm)
    } else {
        Suff::new(&y, &x, &ml, nm, &pl, np)
    };
    let n_minus_p = (suff.n - p) as f64;
    let to_loglik = |dev: f64| -0.5 * (dev + n_minus_p * (1.0 + (2.0 * std::f64::consts::PI / n_minus_p).ln()));

    let ols = suff.eval(0.0, 0.0).ok_or_else(|| Error::SingularDesign("XᵀX is not positive definite".into()))?;
    if ols.r2 <= 1e-20 * suff.yty.max(f64::MIN_POSITIVE) {
        let beta: Vec<f64> = ols.sol.rows(suff.ns.len(), p).iter().copied().collect();
        let (r2m, r2c) = r2_nakagawa(&x, &beta, 0.0, 0.0, 0.0);
        return Ok(LmeFit {
            names: names.to_vec(),
            beta,
            se: vec![0.0; p],
            pvals: vec![0.0; p],
            var_patient: 0.0,
            var_model: 0.0,
            var_resid: 0.0,
            icc_patient: 0.0,
            icc_model: 0.0,
            r2_marginal: r2m,
            r2_conditional: r2c,
            n_obs: suff.n,
            n_patients: np,
            n_models: nm,
            converged: true,
            reml_loglik: f64::INFINITY,
            trace: vec![],
        });
    }

    let trace = Mutex::new((f64::INFINITY, Vec::new()));
    let run = |fixed: [bool; 2], start: &[f64]| -> Result<([f64; 2], f64)> {
        let obj = Objective {
            suff: &suff,
            fixed,
            best: Mutex::new(std::mem::take(&mut *trace.lock().unwrap())),
        };
        let (param, cost) = nelder_mead(&obj, start)?;
        let t = obj.expand(&param);
        *trace.lock().unwrap() = obj.best.into_inner().unwrap();
        Ok((t, cost))
    };

    let mut best = ([0.0, 0.0], f64::INFINITY);
    for &rf in &START_RATIOS {
        for &rs in &START_RATIOS {
            let cand = run([false, false], &[rf.sqrt(), rs.sqrt()])?;
            if cand.1 < best.1 {
                best = cand;
            }
        }
    }
    // Prefer the boundary when it is as good as the interior optimum.
    let interior = best;
    for fixed in [[true, false], [false, true]] {
        let free = if fixed[0] { interior.0[1] } else { interior.0[0] };
        let cand = run(fixed, &[free.max(0.05)])?;
        if cand.1 <= interior.1 + BOUNDARY_TOL && cand.1 <= best.1 + BOUNDARY_TOL {
            best = cand;
        }
    }
    let both_zero = suff.deviance(&[0.0, 0.0]);
    if both_zero <= best.1 + BOUNDARY_TOL {
        best = ([0.0, 0.0], both_zero);
    }
    let theta = best.0;
    let converged = projected_gradient_norm(&suff, theta) < GRAD_TOL;

    let e = suff
        .eval(theta[0], theta[1])
        .ok_or_else(|| Error::SingularDesign("system lost definiteness at the optimum".into()))?;
    let nls = suff.ns.len();
    let var_resid = e.r2 / n_minus_p;
    let (vf, vs) = (theta[0] * theta[0] * var_resid, theta[1] * theta[1] * var_resid);
    let (var_patient, var_model) = if patient_is_f { (vf, vs) } else { (vs, vf) };
    let beta: Vec<f64> = e.sol.rows(nls, p).iter().copied().collect();
    let se: Vec<f64> = (0..p)
        .map(|k| (var_resid * e.schur_inv[(nls + k, nls + k)]).max(0.0).sqrt())
        .collect();
    let pvals = beta
        .iter()
        .zip(&se)
        .map(|(b, s)| if *s > 0.0 { two_sided_p(b / s) } else { f64::NAN })
        .collect();
    let (icc_patient, icc_model) = icc(var_patient, var_model, var_resid);
    let (r2_marginal, r2_conditional) = r2_nakagawa(&x, &beta, var_patient, var_model, var_resid);
    let trace = trace.into_inner().unwrap().1.into_iter().map(to_loglik).collect();
    Ok(LmeFit {
        names: names.to_vec(),
        beta,
        se,
        pvals,
        var_patient,
        var_model,
        var_resid,
        icc_patient,
        icc_model,
        r2_marginal,
        r2_conditional,
        n_obs: suff.n,
        n_patients: np,
        n_models: nm,
        converged,
        reml_loglik: to_loglik(e.dev),
        trace,
    })
}

/// Finite-difference gradient of the deviance, with the inward-pointing part
/// dropped at the zero bound.
fn projected_gradient_norm(suff: &Suff, t: [f64; 2]) -> f64 {
    let mut g2 = 0.0;
    for k in 0..2 {
        let h = 1e-5 * t[k].max(1e-2);
        let mut up = t;
        up[k] += h;
        let g = if t[k] > 2.0 * h {
            let mut dn = t;
            dn[k] -= h;
            (suff.deviance(&up) - suff.deviance(&dn)) / (2.0 * h)
        } else {
            ((suff.deviance(&up) - suff.deviance(&t)) / h).min(0.0)
        };
        g2 += g * g;
    }
    g2.sqrt()
}

/// Dependent variables of the cohort suite: 4 compartments × 4 metrics.
pub fn suite_outcomes() -> Vec<Outcome> {
    Compartment::ALL
        .iter()
        .flat_map(|&c| {
            [Metric::Dice, Metric::Sensitivity, Metric::Precision, Metric::Hd95]
                .into_iter()
                .map(move |m| Outcome::new(c, m))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvFit {
    pub dv: String,
    pub fit: Option<LmeFit>,
    pub error: Option<String>,
    pub pruned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub dv: String,
    pub term: String,
    pub beta: Option<f64>,
    pub se: Option<f64>,
    pub p: Option<f64>,
    pub fdr_significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSuite {
    pub fits: Vec<DvFit>,
    pub coefficients: Vec<CoefficientRow>,
}

fn fit_dv(records: &[MetricRecord], cohort: &BTreeMap<&str, &CohortRow>, o: Outcome) -> Result<(LmeFit, Vec<String>)> {
    let obs: Vec<(&MetricRecord, &CohortRow, f64)> = records
        .iter()
        .filter_map(|r| Some((r, *cohort.get(r.patient_id.as_str())?, r.get(o)?)))
        .collect();
    let rows: Vec<&CohortRow> = obs.iter().map(|(_, c, _)| *c).collect();
    let mut spec = PredictorSpec::cohort_layout();
    spec.prune_constant = true;
    let design = build_design(&rows, &spec)?;
    let y = zscore(&design.rows.iter().map(|&i| obs[i].2).collect::<Vec<_>>())?;
    let pids: Vec<&str> = design.rows.iter().map(|&i| obs[i].0.patient_id.as_str()).collect();
    let mids: Vec<&str> = design.rows.iter().map(|&i| obs[i].0.model_id.as_str()).collect();
    let fit = fit_crossed_lme(&y, &design.x, &design.names, &pids, &mids)?;
    Ok((fit, design.pruned))
}

/// One crossed fit per dependent variable, z-scored over its pooled
/// observations, then BH across the 16 fits separately for each term.
pub fn run_cohort_suite(records: &[MetricRecord], cohort: &[CohortRow], alpha: f64) -> CohortSuite {
    let by_id: BTreeMap<&str, &CohortRow> = cohort.iter().map(|c| (c.patient_id.as_str(), c)).collect();
    let outcomes = suite_outcomes();
    let fits: Vec<DvFit> = outcomes
        .iter()
        .map(|&o| match fit_dv(records, &by_id, o) {
            Ok((fit, pruned)) => DvFit {
                dv: o.column(),
                fit: Some(fit),
                error: None,
                pruned,
            },
            Err(e) => {
                log::warn!("{}: {e}", o.column());
                DvFit {
                    dv: o.column(),
                    fit: None,
                    error: Some(e.to_string()),
                    pruned: vec![],
                }
            }
        })
        .collect();
    let terms: Vec<String> = PredictorSpec::cohort_layout_names().into_iter().skip(1).collect();
    let mut coefficients = Vec::with_capacity(terms.len() * fits.len());
    for f in &fits {
        for t in &terms {
            let c = f.fit.as_ref().and_then(|fit| fit.coefficient(t));
            coefficients.push(CoefficientRow {
                dv: f.dv.clone(),
                term: t.clone(),
                beta: c.map(|c| c.0),
                se: c.map(|c| c.1),
                p: c.map(|c| c.2).filter(|p| !p.is_nan()),
                fdr_significant: false,
            });
        }
    }
    for (k, _) in terms.iter().enumerate() {
        let idx: Vec<usize> = (0..fits.len()).map(|d| d * terms.len() + k).collect();
        let ps: Vec<Option<f64>> = idx.iter().map(|&i| coefficients[i].p).collect();
        let bh = bh_fdr(&ps, alpha);
        for (&i, s) in idx.iter().zip(bh.significant) {
            coefficients[i].fdr_significant = s;
        }
    }
    CohortSuite { fits, coefficients }
}

pub fn write_coefficients_csv<W: Write>(w: W, rows: &[CoefficientRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["dv", "term", "beta", "se", "p", "fdr_significant"])?;
    for r in rows {
        wtr.write_record([
            r.dv.clone(),
            r.term.clone(),
            fmt_opt(r.beta),
            fmt_opt(r.se),
            fmt_opt(r.p),
            r.fdr_significant.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<coefficients csv>", e))?;
    Ok(())
}

pub fn write_variance_csv<W: Write>(w: W, fits: &[DvFit]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "dv",
        "n_obs",
        "n_patients",
        "n_models",
        "var_patient",
        "var_model",
        "var_resid",
        "icc_patient",
        "icc_model",
        "r2_marginal",
        "r2_conditional",
        "converged",
        "error",
    ])?;
    for d in fits {
        let f = d.fit.as_ref();
        let g = |h: fn(&LmeFit) -> f64| fmt_opt(f.map(h));
        wtr.write_record([
            d.dv.clone(),
            f.map(|f| f.n_obs.to_string()).unwrap_or_default(),
            f.map(|f| f.n_patients.to_string()).unwrap_or_default(),
            f.map(|f| f.n_models.to_string()).unwrap_or_default(),
            g(|f| f.var_patient),
            g(|f| f.var_model),
            g(|f| f.var_resid),
            g(|f| f.icc_patient),
            g(|f| f.icc_model),
            g(|f| f.r2_marginal),
            g(|f| f.r2_conditional),
            f.map(|f| f.converged.to_string()).unwrap_or_default(),
            d.error.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<variance csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn design(n: usize, f: impl Fn(usize) -> f64) -> (DMatrix<f64>, Vec<String>) {
        (
            DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { f(r) }),
            vec!["Intercept".into(), "x".into()],
        )
    }

    #[test]
    fn icc_and_r2_are_exact_arithmetic() {
        assert_eq!(icc(0.5, 0.3, 0.2), (0.5, 0.3));
        assert_eq!(icc(0.5, 0.0, 0.5).1, 0.0);
        assert_eq!(icc(0.0, 0.0, 0.0), (0.0, 0.0));
        let (x, _) = design(4, |r| r as f64);
        let (m, c) = r2_nakagawa(&x, &[3.0, 0.0], 0.4, 0.1, 0.5);
        assert_eq!(m, 0.0);
        assert!((c - 0.5).abs() < 1e-15);
        // var(x) = 1.25 for 0..4
        let (m, c) = r2_nakagawa(&x, &[0.0, 1.0], 0.0, 0.0, 1.25);
        assert_eq!((m, c), (0.5, 0.5));
    }

    #[test]
    fn perfect_fit_is_degenerate_not_nan() {
        let n = 60;
        let (x, names) = design(n, |r| (r % 7) as f64 - 3.0);
        let y: Vec<f64> = (0..n).map(|r| 0.5 + 2.0 * x[(r, 1)]).collect();
        let pids: Vec<String> = (0..n).map(|r| format!("p{}", r / 3)).collect();
        let mids: Vec<String> = (0..n).map(|r| format!("m{}", r % 3)).collect();
        let fit = fit_crossed_lme(&y, &x, &names, &pids, &mids).unwrap();
        assert_eq!((fit.var_patient, fit.var_model, fit.var_resid), (0.0, 0.0, 0.0));
        assert!((fit.beta[1] - 2.0).abs() < 1e-10);
        assert!((fit.beta[0] - 0.5).abs() < 1e-10);
        assert!(fit.r2_marginal.is_finite());
    }

    #[test]
    fn no_group_structure_matches_ols() {
        let mut rng = crate::stats::rng::rng(5);
        let (np, nm) = (40, 6);
        let n = np * nm;
        let (x, names) = design(n, |r| ((r * 37) % 11) as f64);
        // noise orthogonal to both factors leaves both ratios at zero
        let mut e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        double_centre(&mut e, np, nm);
        let y: Vec<f64> = (0..n).map(|r| 1.0 - 0.3 * x[(r, 1)] + e[r]).collect();
        let pids: Vec<usize> = (0..n).map(|r| r / nm).collect();
        let mids: Vec<usize> = (0..n).map(|r| r % nm).collect();
        let fit = fit_crossed_lme(&y, &x, &names, &ids(&pids, "p"), &ids(&mids, "m")).unwrap();
        assert_eq!(fit.var_model, 0.0);
        let yv = DVector::from_column_slice(&y);
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * yv;
        if fit.var_patient == 0.0 {
            for k in 0..2 {
                assert!((fit.beta[k] - ols[k]).abs() < 1e-8);
            }
        }
        assert!(fit.converged);
    }

    fn ids(v: &[usize], prefix: &str) -> Vec<String> {
        v.iter().map(|i| format!("{prefix}{i:04}")).collect()
    }

    /// Remove row and column means from an np × nm table stored row-major.
    fn double_centre(e: &mut [f64], np: usize, nm: usize) {
        let rm: Vec<f64> = (0..np).map(|i| (0..nm).map(|j| e[i * nm + j]).sum::<f64>() / nm as f64).collect();
        let cm: Vec<f64> = (0..nm).map(|j| (0..np).map(|i| e[i * nm + j]).sum::<f64>() / np as f64).collect();
        let g = rm.iter().sum::<f64>() / np as f64;
        for i in 0..np {
            for j in 0..nm {
                e[i * nm + j] -= rm[i] + cm[j] - g;
            }
        }
    }

    #[test]
    fn trace_is_monotone_and_relabeling_invariant() {
        let mut rng = crate::stats::rng::rng(9);
        let (np, nm) = (60, 8);
        let u: Vec<f64> = (0..np).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let v: Vec<f64> = (0..nm).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let n = np * nm;
        let (x, names) = design(n, |r| ((r / nm) % 5) as f64);
        let y: Vec<f64> = (0..n)
            .map(|r| 0.2 * x[(r, 1)] + u[r / nm] + v[r % nm] + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pids: Vec<usize> = (0..n).map(|r| r / nm).collect();
        let mids: Vec<usize> = (0..n).map(|r| r % nm).collect();
        let a = fit_crossed_lme(&y, &x, &names, &ids(&pids, "p"), &ids(&mids, "m")).unwrap();
        assert!(a.converged);
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!((a.trace.last().unwrap() - a.reml_loglik).abs() < 1e-6);
        let pr: Vec<usize> = pids.iter().map(|p| (p * 17 + 3) % np).collect();
        let mr: Vec<usize> = mids.iter().map(|m| nm - 1 - m).collect();
        let b = fit_crossed_lme(&y, &x, &names, &ids(&pr, "q"), &ids(&mr, "z")).unwrap();
        for (s, t) in [(a.var_patient, b.var_patient), (a.var_model, b.var_model), (a.var_resid, b.var_resid)] {
            assert!((s - t).abs() < 1e-6, "{s} vs {t}");
        }
        assert!(a.icc_patient + a.icc_model <= 1.0);
        assert!(a.r2_marginal <= a.r2_conditional && a.r2_conditional <= 1.0);
    }

    #[test]
    fn too_few_levels() {
        let (x, names) = design(10, |r| r as f64);
        let y: Vec<f64> = (0..10).map(|r| r as f64 * 0.1).collect();
        let pids: Vec<String> = (0..10).map(|r| format!("p{r}")).collect();
        let mids = vec!["m"; 10];
        assert!(matches!(fit_crossed_lme(&y, &x, &names, &pids, &mids), Err(Error::SingularDesign(_))));
    }
}
