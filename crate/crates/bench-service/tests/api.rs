use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use cryoplan::atlas::{Dataset, HoleRecord};
use cryoplan::dataset::{generate, GenConfig};
use cryoplan::dqn::{train, TrainConfig};
use cryoplan::classifier::{ClassifierModel, PredictionTable, Preset};
use cryoplan_bench::{router, AppState, EventLog, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny() -> Dataset {
    let ctfs = [4.2, 9.0, 5.0, 12.0, 3.3, 7.5];
    Dataset::from_records((0..6).map(|i| HoleRecord {
        hole_id: format!("h{i}"),
        grid_id: "g0".into(),
        square_id: format!("s{}", i / 4),
        patch_id: format!("p{}", i / 2),
        x: i as f64,
        y: 0.0,
        ctf: ctfs[i],
    }))
    .unwrap()
}

fn app_with(cfg: ServiceConfig, log: EventLog, policy: Option<cryoplan::dqn::Policy>) -> (Router, Arc<AppState>) {
    let mut datasets = BTreeMap::new();
    datasets.insert("tiny".to_string(), Arc::new(tiny()));
    let state = Arc::new(AppState::new(cfg, datasets, policy, log).unwrap());
    (router(state.clone()), state)
}

fn any_budget() -> ServiceConfig {
    ServiceConfig {
        any_budget: true,
        ..Default::default()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn new_session(app: &Router, budget: u32) -> String {
    let (s, v) = call(app, "POST", "/v1/sessions", Some(json!({"dataset_id": "tiny", "budget": budget}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// Every `ctf` value anywhere in `v`, with the `hole_id` next to it.
fn ctf_holes(v: &Value, out: &mut Vec<Option<String>>) {
    match v {
        Value::Object(m) => {
            if m.contains_key("ctf") {
                out.push(m.get("hole_id").and_then(Value::as_str).map(str::to_string));
            }
            m.values().for_each(|x| ctf_holes(x, out));
        }
        Value::Array(a) => a.iter().for_each(|x| ctf_holes(x, out)),
        _ => {}
    }
}

#[tokio::test]
async fn health_reports_version() {
    let (app, _) = app_with(ServiceConfig::default(), EventLog::in_memory(), None);
    let (s, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["agent_loaded"], false);
}

#[tokio::test]
async fn budgets_are_validated() {
    let (app, _) = app_with(ServiceConfig::default(), EventLog::in_memory(), None);
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(json!({"dataset_id": "tiny", "budget": 50}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["remaining"].clone(), v["budget_minutes"].clone()), (json!(50), json!(120.0)));
    let (s, v) = call(&app, "POST", "/v1/sessions", Some(json!({"dataset_id": "tiny", "budget": 37}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "bad_request");
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({"dataset_id": "nope", "budget": 50}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/v1/sessions", Some(json!({"budget": 50}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (lax, _) = app_with(any_budget(), EventLog::in_memory(), None);
    let (s, _) = call(&lax, "POST", "/v1/sessions", Some(json!({"dataset_id": "tiny", "budget": 3}))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn selection_flow_and_error_codes() {
    let (app, _) = app_with(any_budget(), EventLog::in_memory(), None);
    let id = new_session(&app, 2).await;
    let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}/view?patch=p0"), None).await;
    assert!(view["holes"].as_array().unwrap().iter().all(|h| h["state"] == "unknown" && h.get("ctf").is_none()));

    let (s, v) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "h0"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"hole_id": "h0", "ctf": 4.2, "is_low": true, "score": 1, "remaining": 1}));

    let (s, v) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "h0"}))).await;
    assert_eq!((s, v["error"]["code"].clone()), (StatusCode::CONFLICT, json!("duplicate_selection")));
    let (_, sess) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(sess["selections"].as_array().unwrap().len(), 1);

    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "zz"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "h1"}))).await;
    assert_eq!((s, v["is_low"].clone(), v["score"].clone()), (StatusCode::OK, json!(false), json!(1)));
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "h2"}))).await;
    assert_eq!(s, StatusCode::GONE);

    let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}/view?patch=p0"), None).await;
    let holes = view["holes"].as_array().unwrap();
    assert_eq!(holes[0]["state"], "revealed");
    assert_eq!(holes[0]["ctf"], 4.2);

    let (s, _) = call(&app, "GET", "/v1/sessions/missing/summary", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", &format!("/v1/sessions/{id}/view?patch=p9"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_isolated_and_summaries_rank_cohorts() {
    let (app, _) = app_with(any_budget(), EventLog::in_memory(), None);
    let a = new_session(&app, 2).await;
    let b = new_session(&app, 2).await;
    let (_, empty) = call(&app, "GET", &format!("/v1/sessions/{b}/summary"), None).await;
    assert_eq!((empty["score"].clone(), empty["percentile"].clone()), (json!(0), Value::Null));

    for h in ["h0", "h2"] {
        call(&app, "POST", &format!("/v1/sessions/{a}/select"), Some(json!({"hole_id": h}))).await;
    }
    let (_, vb) = call(&app, "GET", &format!("/v1/sessions/{b}/view?patch=p0"), None).await;
    assert!(vb["holes"].as_array().unwrap().iter().all(|h| h["state"] == "unknown"));

    for h in ["h1", "h4"] {
        call(&app, "POST", &format!("/v1/sessions/{b}/select"), Some(json!({"hole_id": h}))).await;
    }
    let (_, sb) = call(&app, "GET", &format!("/v1/sessions/{b}/summary"), None).await;
    assert_eq!(sb["score"], 1);
    assert_eq!(sb["cumulative"], json!([0, 1]));
    assert_eq!(sb["cohort_size"], 1);
    assert_eq!(sb["percentile"], 0.0);
    let hist: Vec<&str> = sb["selections"].as_array().unwrap().iter().map(|s| s["hole_id"].as_str().unwrap()).collect();
    assert_eq!(hist, ["h1", "h4"]);

    // Another budget is a different cohort.
    let c = new_session(&app, 1).await;
    call(&app, "POST", &format!("/v1/sessions/{c}/select"), Some(json!({"hole_id": "h0"}))).await;
    let (_, sc) = call(&app, "GET", &format!("/v1/sessions/{c}/summary"), None).await;
    assert_eq!(sc["cohort_size"], 0);
}

#[tokio::test]
async fn no_unrevealed_ctf_in_any_payload() {
    let (app, _) = app_with(any_budget(), EventLog::in_memory(), None);
    let id = new_session(&app, 3).await;
    let mut selected: HashSet<String> = HashSet::new();
    let mut bodies = Vec::new();
    for h in ["h3", "h0"] {
        let (_, v) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": h}))).await;
        selected.insert(h.to_string());
        bodies.push(v);
    }
    for uri in [
        format!("/v1/sessions/{id}"),
        format!("/v1/sessions/{id}/atlas"),
        format!("/v1/sessions/{id}/summary"),
        "/v1/datasets".to_string(),
    ] {
        bodies.push(call(&app, "GET", &uri, None).await.1);
    }
    for p in ["p0", "p1", "p2"] {
        bodies.push(call(&app, "GET", &format!("/v1/sessions/{id}/view?patch={p}"), None).await.1);
    }
    for b in &bodies {
        let mut found = Vec::new();
        ctf_holes(b, &mut found);
        for h in found {
            let h = h.expect("a ctf value is always attached to a hole id");
            assert!(selected.contains(&h), "ctf of unselected hole {h} leaked in {b}");
        }
        assert!(!b.to_string().contains("predicted"));
    }
}

#[tokio::test]
async fn patches_only_hides_lineage() {
    let cfg = ServiceConfig {
        patches_only: true,
        any_budget: true,
        ..Default::default()
    };
    let (app, _) = app_with(cfg, EventLog::in_memory(), None);
    let id = new_session(&app, 2).await;
    let (_, atlas) = call(&app, "GET", &format!("/v1/sessions/{id}/atlas"), None).await;
    assert!(atlas.get("grids").is_none());
    assert_eq!(atlas["patches"].as_array().unwrap().len(), 3);
    let (_, view) = call(&app, "GET", &format!("/v1/sessions/{id}/view?patch=p1"), None).await;
    assert!(view.get("square_id").is_none() && view.get("grid_id").is_none());

    let (full, _) = app_with(any_budget(), EventLog::in_memory(), None);
    let id = new_session(&full, 2).await;
    let (_, atlas) = call(&full, "GET", &format!("/v1/sessions/{id}/atlas"), None).await;
    assert_eq!(atlas["grids"][0]["squares"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (app, first) = app_with(any_budget(), EventLog::open(dir.path()).unwrap(), None);
    let id = new_session(&app, 3).await;
    for h in ["h5", "h4"] {
        call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": h}))).await;
    }
    let before = first.snapshot();
    drop(app);

    let (app, second) = app_with(any_budget(), EventLog::open(dir.path()).unwrap(), None);
    assert_eq!(second.snapshot(), before);
    let (_, v) = call(&app, "GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!((v["score"].clone(), v["remaining"].clone()), (json!(1), json!(1)));
    let (s, _) = call(&app, "POST", &format!("/v1/sessions/{id}/select"), Some(json!({"hole_id": "h5"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn compare_needs_a_policy_and_is_repeatable() {
    let (app, _) = app_with(ServiceConfig::default(), EventLog::in_memory(), None);
    let (s, v) = call(&app, "POST", "/v1/compare", Some(json!({"dataset_id": "tiny", "budget": 50}))).await;
    assert_eq!((s, v["error"]["code"].clone()), (StatusCode::SERVICE_UNAVAILABLE, json!("no_agent")));

    let ds = generate(&GenConfig {
        total_holes: Some(300),
        total_squares: Some(4),
        n_grids: 2,
        ..GenConfig::y1(2)
    })
    .unwrap();
    let pt = PredictionTable::predict_all(&ds, &ClassifierModel::preset(Preset::Gt, 2));
    let cfg = TrainConfig {
        budget: 60.0,
        epochs: 1,
        episodes_per_epoch: 3,
        ..Default::default()
    };
    let policy = train(&ds, &pt, &cfg).unwrap().policy;
    let mut datasets = BTreeMap::new();
    datasets.insert("syn".to_string(), Arc::new(ds));
    let state = Arc::new(AppState::new(ServiceConfig::default(), datasets, Some(policy), EventLog::in_memory()).unwrap());
    let app = router(state);
    let req = json!({"dataset_id": "syn", "budget": 50, "seed": 4});
    let (s, a) = call(&app, "POST", "/v1/compare", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = call(&app, "POST", "/v1/compare", Some(req)).await;
    assert_eq!(a, b);
    let cum: Vec<u64> = a["cumulative"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert!(cum.len() <= 50 && cum.len() == a["selections"].as_u64().unwrap() as usize);
    assert!(cum.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1));
    assert_eq!(cum.last().copied().unwrap_or(0), a["score"].as_u64().unwrap());
    let mut found = Vec::new();
    ctf_holes(&a, &mut found);
    assert!(found.is_empty());

    let (s, v) = call(&app, "POST", "/v1/sessions", Some(json!({"dataset_id": "syn", "budget": 50, "mode": "agent_replay", "seed": 4}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["score"], a["score"]);
    assert_eq!(v["mode"], "agent_replay");
}
