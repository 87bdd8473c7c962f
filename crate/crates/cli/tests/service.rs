mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fairboard::manifest::run_hash;
use fairboard::server::{router, Snapshot, MANIFEST_HEADER};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(Snapshot::load(common::finished_run()).unwrap())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value, String) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let header = res.headers()[MANIFEST_HEADER].to_str().unwrap().to_string();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap(), header)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value, String) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value, String) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

#[tokio::test]
async fn league_matches_stored_composites() {
    let app = app();
    let (status, body, _) = get(&app, "/api/league?wp=0.5&we=0.5").await;
    assert_eq!(status, StatusCode::OK);
    let path = common::finished_run().paths.output.join("league.csv");
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "composite_50_50").unwrap();
    let stored: std::collections::BTreeMap<String, f64> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[col].parse().unwrap())
        })
        .collect();
    let models = body["data"]["models"].as_array().unwrap();
    assert_eq!(models.len(), 3);
    for m in models {
        assert_eq!(m["composite"].as_f64().unwrap(), stored[m["model_id"].as_str().unwrap()]);
    }
    let ranks: Vec<u64> = models.iter().map(|m| m["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, vec![1, 2, 3]);
}

#[tokio::test]
async fn invalid_weights_are_unprocessable() {
    let app = app();
    for uri in ["/api/league?wp=2", "/api/league?wp=0.7&we=0.7", "/api/league?wp=abc"] {
        let (status, body, _) = get(&app, uri).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{uri}");
        assert!(body["error"].is_string());
    }
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let app = app();
    let uris = ["/api/league?wp=0.3", "/api/spatial/WT/dice?alpha=0.1", "/api/metrics?model=model_a"];
    for uri in uris {
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let app = app.clone();
                tokio::spawn(async move { get(&app, uri).await.1 })
            })
            .collect();
        let mut bodies = Vec::new();
        for h in handles {
            bodies.push(h.await.unwrap());
        }
        assert!(bodies.windows(2).all(|w| w[0] == w[1]), "{uri}");
    }
}

#[tokio::test]
async fn every_reply_carries_the_run_hash() {
    let app = app();
    let want = run_hash(&common::finished_run().paths.output).unwrap();
    let cases = [
        get(&app, "/api/cohort").await,
        get(&app, "/api/nowhere").await,
        get(&app, "/api/league?wp=5").await,
        post(&app, "/api/recompute", json!({ "n_perm": 5000 })).await,
    ];
    let statuses: Vec<StatusCode> = cases.iter().map(|c| c.0).collect();
    assert_eq!(
        statuses,
        [StatusCode::OK, StatusCode::NOT_FOUND, StatusCode::UNPROCESSABLE_ENTITY, StatusCode::CONFLICT]
    );
    for (_, body, header) in cases {
        assert_eq!(body["manifest_hash"], want);
        assert_eq!(header, want);
    }
}

#[tokio::test]
async fn spatial_rethresholds_on_request() {
    let app = app();
    let (status, base, _) = get(&app, "/api/spatial/WT/dice").await;
    assert_eq!(status, StatusCode::OK);
    let alpha = base["data"]["alpha"].as_f64().unwrap();
    assert_eq!(alpha, 0.05);
    assert_eq!(base["data"]["n_significant"], base["data"]["summary"]["n_significant"]);
    let n = |v: &Value| v["data"]["n_significant"].as_u64().unwrap();
    let (_, loose, _) = get(&app, "/api/spatial/WT/dice?alpha=0.5").await;
    let (_, strict, _) = get(&app, "/api/spatial/WT/dice?alpha=0.0001").await;
    assert!(n(&strict) <= n(&base) && n(&base) <= n(&loose));
    let len = base["data"]["pooled_z"].as_array().unwrap().len();
    let dims: u64 = base["data"]["dims"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
    assert_eq!(len as u64, dims);

    assert_eq!(get(&app, "/api/spatial/WT/dice?alpha=1.5").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(get(&app, "/api/spatial/XX/dice").await.0, StatusCode::NOT_FOUND);
    // valid but not in the configured set
    assert_eq!(get(&app, "/api/spatial/WT/precision").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn univariate_slices() {
    let app = app();
    let (status, body, _) = get(&app, "/api/univariate?factor=resection&metric=WT_dice").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let gaps = body["data"]["gaps"].as_array().unwrap();
    assert_eq!(gaps.len(), 3);
    assert!(!body["data"]["age_bins"].as_array().unwrap().is_empty());
    assert_eq!(get(&app, "/api/univariate?factor=height&metric=WT_dice").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(get(&app, "/api/univariate?metric=WT_dice").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn representational_and_metrics() {
    let app = app();
    let (status, body, _) = get(&app, "/api/representational?metric=WT_dice").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["data"]["coords"].as_array().unwrap().len(), 30);
    let (status, body, _) = get(&app, "/api/metrics?model=model_b").await;
    assert_eq!(status, StatusCode::OK);
    let rows = body["data"]["rows"].as_array().unwrap();
    assert!(rows.iter().all(|r| r["model_id"] == "model_b"));
    assert_eq!(rows.len(), 29);
    assert_eq!(get(&app, "/api/metrics?model=nobody").await.0, StatusCode::NOT_FOUND);
    let (_, cohort, _) = get(&app, "/api/cohort").await;
    assert_eq!(cohort["data"]["n_patients"], 30);
}

#[tokio::test]
async fn recompute_only_does_light_work() {
    let app = app();
    let (status, body, _) = post(&app, "/api/recompute", json!({ "alpha": 0.01, "wp": 0.9 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["data"]["league"]["w_perf"], 0.9);
    assert!(body["data"]["spatial"]["WT_dice"]["n_significant"].is_u64());
    for heavy in ["seed", "fwhm_mm", "n_neighbors", "stage"] {
        assert_eq!(post(&app, "/api/recompute", json!({ heavy: 1 })).await.0, StatusCode::CONFLICT);
    }
    assert_eq!(post(&app, "/api/recompute", json!({ "colour": 1 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/api/recompute", json!({ "alpha": 2 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}
