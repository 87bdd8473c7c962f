//! Read-only JSON service over a finished run. Every artifact is loaded once
//! at startup; requests only slice, re-threshold or re-weight what is loaded.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fairboard_core::cohort::CohortRow;
use fairboard_core::league::{composite_table, League, Scenario};
use fairboard_core::metrics::{Metric, MetricRecord, Outcome};
use fairboard_core::stats::fdr::bh_fdr;
use fairboard_core::stats::glm::two_sided_p;
use fairboard_core::stats::descriptive::{mean, variance_sample};
use fairboard_core::univariate::{AgeBinRow, Factor, GapRow};
use fairboard_core::volume::{read_volume, Compartment, Volume};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::AnalysisConfig;
use crate::error::{CliError, Result};
use crate::manifest::run_hash;
use crate::pipeline::{
    artifacts, latent_path, read_cohort, read_metrics, spatial_map_path, spatial_summary_path, LatentSummary,
    SpatialSummary, SPATIAL_MAPS,
};

pub const MANIFEST_HEADER: &str = "x-fairboard-manifest";

/// Request keys that would need permutation, REML, smoothing or embedding
/// work; `/api/recompute` refuses them.
pub const HEAVY_KEYS: [&str; 9] = [
    "fwhm_mm",
    "n_perm",
    "seed",
    "bootstrap_iters",
    "n_neighbors",
    "min_dist",
    "embedding",
    "outcomes",
    "stage",
];

#[derive(Debug, Clone)]
pub struct SpatialData {
    pub summary: SpatialSummary,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub pooled_z: Vec<f32>,
    pub tau2: Vec<f32>,
    pub i2: Vec<f32>,
    pub prevalence: Vec<f32>,
    pub mask: Vec<u8>,
    pub fdr_mask: Vec<u8>,
}

impl SpatialData {
    /// BH over the analysis mask at `alpha`. The run's own alpha returns the
    /// stored mask, computed from unrounded z.
    pub fn threshold(&self, alpha: f64) -> (Vec<u8>, Option<f64>) {
        if alpha == self.summary.alpha {
            return (self.fdr_mask.clone(), self.summary.fdr_threshold);
        }
        let p: Vec<Option<f64>> = self
            .pooled_z
            .iter()
            .zip(&self.mask)
            .map(|(&z, &m)| (m == 1).then(|| two_sided_p(f64::from(z))))
            .collect();
        let bh = bh_fdr(&p, alpha);
        (bh.significant.iter().map(|&b| u8::from(b)).collect(), bh.threshold)
    }
}

#[derive(Debug, Clone)]
pub struct LatentData {
    pub summary: LatentSummary,
    pub size: usize,
    pub z: Option<Vec<f32>>,
}

/// Everything the service can answer from.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub manifest_hash: String,
    pub alpha: f64,
    pub cohort: Vec<CohortRow>,
    pub metrics: Option<Vec<MetricRecord>>,
    pub scores: Option<(BTreeMap<String, f64>, BTreeMap<String, f64>)>,
    pub gaps: Option<Vec<GapRow>>,
    pub age_bins: Option<Vec<AgeBinRow>>,
    pub spatial: BTreeMap<String, SpatialData>,
    pub coords: Option<Vec<(String, f64, f64)>>,
    pub latent: BTreeMap<String, LatentData>,
}

fn f32_data(v: &Volume) -> Vec<f32> {
    v.data.to_f64().into_iter().map(|x| x as f32).collect()
}

fn u8_data(v: &Volume) -> Vec<u8> {
    v.data.to_f64().into_iter().map(|x| x as u8).collect()
}

fn read_csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(serde::Deserialize)]
struct ScoreRow {
    model_id: String,
    perf_score: f64,
    equity_score: f64,
}

impl Snapshot {
    /// Load whatever artifacts exist under the configured output directory.
    pub fn load(cfg: &AnalysisConfig) -> Result<Self> {
        let out = &cfg.paths.output;
        let at = |rel: &str| Some(out.join(rel)).filter(|p| p.exists());
        let metrics = at(artifacts::METRICS).map(|p| read_metrics(&p)).transpose()?;
        let scores = at(artifacts::LEAGUE)
            .map(|p| -> Result<_> {
                let rows: Vec<ScoreRow> = read_csv_rows(&p)?;
                Ok((
                    rows.iter().map(|r| (r.model_id.clone(), r.perf_score)).collect(),
                    rows.iter().map(|r| (r.model_id.clone(), r.equity_score)).collect(),
                ))
            })
            .transpose()?;
        let gaps = at(artifacts::GAPS).map(|p| read_csv_rows(&p)).transpose()?;
        let age_bins = at(artifacts::AGE_BINS).map(|p| read_csv_rows(&p)).transpose()?;

        let mut spatial = BTreeMap::new();
        for o in Outcome::all() {
            let name = o.column();
            let Some(sp) = at(&spatial_summary_path(&name)) else {
                continue;
            };
            let summary: SpatialSummary = read_json(&sp)?;
            let vols: Vec<Volume> = SPATIAL_MAPS
                .iter()
                .map(|m| Ok(read_volume(out.join(spatial_map_path(&name, m)))?))
                .collect::<Result<_>>()?;
            spatial.insert(
                name,
                SpatialData {
                    summary,
                    dims: vols[0].dims,
                    spacing: vols[0].spacing,
                    pooled_z: f32_data(&vols[0]),
                    tau2: f32_data(&vols[1]),
                    i2: f32_data(&vols[2]),
                    prevalence: f32_data(&vols[3]),
                    mask: u8_data(&vols[4]),
                    fdr_mask: u8_data(&vols[5]),
                },
            );
        }

        let coords = at(&format!("{}/{}", artifacts::REPRESENTATIONAL, artifacts::COORDS))
            .map(|p| read_csv_rows::<(String, f64, f64)>(&p))
            .transpose()?;
        let mut latent = BTreeMap::new();
        for o in Outcome::all() {
            let name = o.column();
            let Some(lp) = at(&latent_path(&name, artifacts::LATENT)) else {
                continue;
            };
            let summary: LatentSummary = read_json(&lp)?;
            let z = at(&latent_path(&name, "zmap.nii.gz")).map(read_volume).transpose()?;
            latent.insert(
                name,
                LatentData {
                    summary,
                    size: z.as_ref().map_or(0, |v| v.dims[0]),
                    z: z.as_ref().map(f32_data),
                },
            );
        }
        Ok(Snapshot {
            manifest_hash: run_hash(out)?,
            alpha: cfg.alpha,
            cohort: read_cohort(&cfg.paths.cohort)?,
            metrics,
            scores,
            gaps,
            age_bins,
            spatial,
            coords,
            latent,
        })
    }

    pub fn league(&self, s: Scenario) -> Option<fairboard_core::Result<League>> {
        let (p, e) = self.scores.as_ref()?;
        Some(composite_table(p, e, &[s]))
    }
}

pub type Shared = Arc<Snapshot>;

/// A JSON body tagged with the manifest hash, in the body and as a header.
struct Reply {
    status: StatusCode,
    hash: String,
    body: Value,
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let mut body = self.body;
        if let Some(o) = body.as_object_mut() {
            o.insert("manifest_hash".into(), Value::String(self.hash.clone()));
        }
        let mut res = (self.status, Json(body)).into_response();
        if let Ok(v) = HeaderValue::from_str(&self.hash) {
            res.headers_mut().insert(MANIFEST_HEADER, v);
        }
        res
    }
}

fn ok(s: &Snapshot, data: impl Serialize) -> Reply {
    Reply {
        status: StatusCode::OK,
        hash: s.manifest_hash.clone(),
        body: json!({ "data": data }),
    }
}

fn fail(s: &Snapshot, status: StatusCode, msg: impl Into<String>) -> Reply {
    Reply {
        status,
        hash: s.manifest_hash.clone(),
        body: json!({ "error": msg.into() }),
    }
}

fn not_computed(s: &Snapshot, what: &str, stage: &str) -> Reply {
    fail(s, StatusCode::NOT_FOUND, format!("{what} not available; run `fairboard {stage}`"))
}

type Params = HashMap<String, String>;

fn parse_f64(q: &Params, key: &str) -> std::result::Result<Option<f64>, String> {
    q.get(key)
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("{key}={v:?} is not a number")))
        .transpose()
}

fn check_alpha(alpha: f64) -> std::result::Result<f64, String> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(format!("alpha {alpha} must lie in (0, 1)"))
    }
}

/// `we` defaults to `1 − wp` and `wp` to `1 − we`; both absent means 50/50.
fn scenario(wp: Option<f64>, we: Option<f64>) -> std::result::Result<Scenario, String> {
    let (p, e) = match (wp, we) {
        (Some(p), Some(e)) => (p, e),
        (Some(p), None) => (p, 1.0 - p),
        (None, Some(e)) => (1.0 - e, e),
        (None, None) => (0.5, 0.5),
    };
    Scenario::new(p, e).map_err(|err| err.to_string())
}

#[derive(Serialize)]
struct LeagueRow<'a> {
    rank: usize,
    model_id: &'a str,
    perf_score: f64,
    equity_score: f64,
    composite: f64,
}

fn league_json(league: &League) -> Value {
    let mut rows: Vec<LeagueRow> = league
        .entries
        .iter()
        .map(|e| LeagueRow {
            rank: e.composite_ranks[0],
            model_id: &e.model_id,
            perf_score: e.perf_score,
            equity_score: e.equity_score,
            composite: e.composite[0],
        })
        .collect();
    rows.sort_by_key(|r| r.rank);
    json!({ "w_perf": league.scenarios[0].w_perf, "w_equity": league.scenarios[0].w_equity, "models": rows })
}

async fn cohort(State(s): State<Shared>) -> Reply {
    ok(&s, cohort_summary(&s.cohort))
}

fn counts<'a>(values: impl Iterator<Item = Option<String>> + 'a) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for v in values {
        *m.entry(v.unwrap_or_else(|| "missing".into())).or_insert(0) += 1;
    }
    m
}

pub fn cohort_summary(rows: &[CohortRow]) -> Value {
    let ages: Vec<f64> = rows.iter().filter_map(|r| r.age_years).collect();
    let age = (!ages.is_empty()).then(|| {
        json!({
            "n": ages.len(),
            "mean": mean(&ages),
            "sd": if ages.len() > 1 { variance_sample(&ages).sqrt() } else { 0.0 },
            "min": ages.iter().copied().fold(f64::INFINITY, f64::min),
            "max": ages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    });
    json!({
        "n_patients": rows.len(),
        "age_years": age,
        "sex": counts(rows.iter().map(|r| r.sex.map(|v| v.as_str().to_string()))),
        "source": counts(rows.iter().map(|r| r.source.clone())),
        "who_grade": counts(rows.iter().map(|r| r.who_grade.map(|g| g.to_string()))),
        "resection": counts(rows.iter().map(|r| r.resection.map(|v| v.as_str().to_string()))),
        "diagnosis": counts(rows.iter().map(|r| r.diagnosis.clone())),
        "idh": counts(rows.iter().map(|r| r.idh.map(|v| v.as_str().to_string()))),
        "survival_days_present": rows.iter().filter(|r| r.survival_days.is_some()).count(),
    })
}

async fn metrics(State(s): State<Shared>, Query(q): Query<Params>) -> Reply {
    let Some(records) = &s.metrics else {
        return not_computed(&s, "metrics", "evaluate");
    };
    let model = q.get("model");
    if let Some(m) = model {
        if !records.iter().any(|r| &r.model_id == m) {
            return fail(&s, StatusCode::NOT_FOUND, format!("unknown model {m:?}"));
        }
    }
    let outcomes = Outcome::all();
    let rows: Vec<Value> = records
        .iter()
        .filter(|r| model.is_none_or(|m| &r.model_id == m))
        .map(|r| {
            let mut o = serde_json::Map::new();
            o.insert("patient_id".into(), json!(r.patient_id));
            o.insert("model_id".into(), json!(r.model_id));
            for &oc in &outcomes {
                o.insert(oc.column(), json!(r.get(oc)));
            }
            Value::Object(o)
        })
        .collect();
    ok(&s, json!({ "columns": outcomes.iter().map(|o| o.column()).collect::<Vec<_>>(), "rows": rows }))
}

async fn league(State(s): State<Shared>, Query(q): Query<Params>) -> Reply {
    let sc = match parse_f64(&q, "wp").and_then(|wp| Ok((wp, parse_f64(&q, "we")?))).and_then(|(p, e)| scenario(p, e)) {
        Ok(sc) => sc,
        Err(e) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    match s.league(sc) {
        None => not_computed(&s, "league", "league"),
        Some(Ok(l)) => ok(&s, league_json(&l)),
        Some(Err(e)) => fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn univariate(State(s): State<Shared>, Query(q): Query<Params>) -> Reply {
    let factor = match q.get("factor").map(|f| f.parse::<Factor>()) {
        Some(Ok(f)) => f,
        Some(Err(e)) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        None => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, "factor is required"),
    };
    let outcome = match q.get("metric").map(|m| m.parse::<Outcome>()) {
        Some(Ok(o)) => o.column(),
        Some(Err(e)) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        None => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, "metric is required"),
    };
    let (Some(gaps), Some(bins)) = (&s.gaps, &s.age_bins) else {
        return not_computed(&s, "univariate tables", "univariate");
    };
    let (a, b) = factor.groups();
    let gaps: Vec<&GapRow> = gaps.iter().filter(|g| g.factor == factor && g.outcome == outcome).collect();
    let bins: Vec<&AgeBinRow> = bins.iter().filter(|g| g.outcome == outcome).collect();
    ok(&s, json!({ "factor": factor, "group_a": a, "group_b": b, "metric": outcome, "gaps": gaps, "age_bins": bins }))
}

async fn spatial(
    State(s): State<Shared>,
    UrlPath((comp, metric)): UrlPath<(String, String)>,
    Query(q): Query<Params>,
) -> Reply {
    let (Ok(c), Ok(m)) = (comp.parse::<Compartment>(), metric.parse::<Metric>()) else {
        return fail(&s, StatusCode::NOT_FOUND, format!("unknown combination {comp}/{metric}"));
    };
    let name = Outcome::new(c, m).column();
    let alpha = match parse_f64(&q, "alpha").and_then(|a| check_alpha(a.unwrap_or(s.alpha))) {
        Ok(a) => a,
        Err(e) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let Some(d) = s.spatial.get(&name) else {
        return not_computed(&s, &format!("spatial map {name}"), "spatial");
    };
    let (fdr_mask, threshold) = d.threshold(alpha);
    ok(
        &s,
        json!({
            "outcome": name,
            "alpha": alpha,
            "dims": d.dims,
            "spacing": d.spacing,
            "layout": "x-fastest",
            "pooled_z": d.pooled_z,
            "tau2": d.tau2,
            "i2": d.i2,
            "prevalence": d.prevalence,
            "mask": d.mask,
            "fdr_mask": fdr_mask,
            "fdr_threshold": threshold,
            "n_significant": fdr_mask.iter().filter(|&&b| b == 1).count(),
            "summary": d.summary,
        }),
    )
}

async fn representational(State(s): State<Shared>, Query(q): Query<Params>) -> Reply {
    let name = match q.get("metric").map(|m| m.parse::<Outcome>()) {
        Some(Ok(o)) => o.column(),
        Some(Err(e)) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        None => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, "metric is required"),
    };
    let (Some(coords), Some(d)) = (&s.coords, s.latent.get(&name)) else {
        return not_computed(&s, &format!("latent analysis {name}"), "representational");
    };
    let coords: Vec<Value> = coords.iter().map(|(id, x, y)| json!({ "patient_id": id, "x": x, "y": y })).collect();
    ok(
        &s,
        json!({
            "metric": name,
            "coords": coords,
            "grid": { "size": d.size, "z": d.z },
            "summary": d.summary,
        }),
    )
}

async fn recompute(State(s): State<Shared>, body: Option<Json<Value>>) -> Reply {
    let Some(Json(Value::Object(req))) = body else {
        return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, "body must be a JSON object");
    };
    if let Some(k) = req.keys().find(|k| HEAVY_KEYS.contains(&k.as_str())) {
        return fail(
            &s,
            StatusCode::CONFLICT,
            format!("{k} requires re-running a heavy stage; use the command line"),
        );
    }
    if let Some(k) = req.keys().find(|k| !["alpha", "wp", "we"].contains(&k.as_str())) {
        return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, format!("unknown parameter {k:?}"));
    }
    let num = |k: &str| -> std::result::Result<Option<f64>, String> {
        req.get(k)
            .map(|v| v.as_f64().ok_or_else(|| format!("{k} must be a number")))
            .transpose()
    };
    let mut out = serde_json::Map::new();
    match num("alpha") {
        Ok(None) => {}
        Ok(Some(a)) => {
            let alpha = match check_alpha(a) {
                Ok(a) => a,
                Err(e) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
            };
            let spatial: BTreeMap<&str, Value> = s
                .spatial
                .iter()
                .map(|(k, d)| {
                    let (mask, t) = d.threshold(alpha);
                    (k.as_str(), json!({ "n_significant": mask.iter().filter(|&&b| b == 1).count(), "fdr_threshold": t }))
                })
                .collect();
            out.insert("alpha".into(), json!(alpha));
            out.insert("spatial".into(), json!(spatial));
        }
        Err(e) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
    }
    let (wp, we) = match (num("wp"), num("we")) {
        (Ok(p), Ok(e)) => (p, e),
        (Err(e), _) | (_, Err(e)) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    if wp.is_some() || we.is_some() {
        let sc = match scenario(wp, we) {
            Ok(sc) => sc,
            Err(e) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e),
        };
        match s.league(sc) {
            None => return not_computed(&s, "league", "league"),
            Some(Ok(l)) => {
                out.insert("league".into(), league_json(&l));
            }
            Some(Err(e)) => return fail(&s, StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        }
    }
    ok(&s, Value::Object(out))
}

async fn unknown(State(s): State<Shared>) -> Reply {
    fail(&s, StatusCode::NOT_FOUND, "unknown resource")
}

pub fn router(snapshot: Snapshot) -> Router {
    Router::new()
        .route("/api/cohort", get(cohort))
        .route("/api/metrics", get(metrics))
        .route("/api/league", get(league))
        .route("/api/univariate", get(univariate))
        .route("/api/spatial/{compartment}/{metric}", get(spatial))
        .route("/api/representational", get(representational))
        .route("/api/recompute", post(recompute))
        .fallback(unknown)
        .with_state(Arc::new(snapshot))
}

pub fn serve(cfg: &AnalysisConfig, port: u16) -> Result<()> {
    let app = router(Snapshot::load(cfg)?);
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::io(addr.to_string(), e))?;
        log::info!("serving on http://{addr}");
        axum::serve(listener, app).await.map_err(|e| CliError::io(addr.to_string(), e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights() {
        assert_eq!(scenario(None, None).unwrap(), Scenario { w_perf: 0.5, w_equity: 0.5 });
        assert_eq!(scenario(Some(0.3), None).unwrap().w_equity, 0.7);
        assert!(scenario(Some(2.0), None).is_err());
        assert!(scenario(Some(0.5), Some(0.6)).is_err());
    }

    #[test]
    fn cohort_counts_missing() {
        let mut a = CohortRow::new("a");
        a.age_years = Some(40.0);
        let b = CohortRow::new("b");
        let v = cohort_summary(&[a, b]);
        assert_eq!(v["sex"]["missing"], 2);
        assert_eq!(v["age_years"]["n"], 1);
    }
}
