//! Route handlers and response schemas.
//!
//! A hole's CTF value is only ever serialized as part of a selection made in
//! the session being viewed. Agent runs report their per-step score series
//! and movement costs but no hole ids or CTF values.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cryoplan::atlas::{Dataset, HoleIdx, MoveClass, PatchIdx};
use cryoplan::classifier::{ClassifierModel, PredictionTable, Preset};
use cryoplan::dqn::run_policy_capped;
use cryoplan::episode::StepRecord;
use cryoplan::rng;
use serde::{Deserialize, Serialize};

use crate::session::{budget_minutes, now_ms, Event, Mode, Selection, Session, SessionError};
use crate::{AppState, VERSION};

type Shared = State<Arc<AppState>>;

const AGENT_START_STREAM: u64 = 0xA6E7;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Duplicate(_) => Self::new(StatusCode::CONFLICT, "duplicate_selection", e.to_string()),
            SessionError::Exhausted => Self::new(StatusCode::GONE, "budget_exhausted", e.to_string()),
            SessionError::Corrupt(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/health", get(health))
        .route("/datasets", get(datasets))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/atlas", get(atlas))
        .route("/sessions/{id}/view", get(view))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/summary", get(summary))
        .route("/compare", post(compare))
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub agent_loaded: bool,
}

async fn health(State(st): Shared) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: VERSION.into(),
        agent_loaded: st.policy.is_some(),
    })
}

#[derive(Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    pub holes: usize,
    pub patches: usize,
    pub squares: usize,
    pub grids: usize,
}

async fn datasets(State(st): Shared) -> Json<Vec<DatasetInfo>> {
    Json(
        st.datasets
            .iter()
            .map(|(id, ds)| DatasetInfo {
                id: id.clone(),
                holes: ds.n_holes(),
                patches: ds.patches().len(),
                squares: ds.squares().len(),
                grids: ds.grids().len(),
            })
            .collect(),
    )
}

fn dataset(st: &AppState, id: &str) -> Result<Arc<Dataset>, ApiError> {
    st.datasets.get(id).cloned().ok_or_else(|| ApiError::not_found("dataset", id))
}

fn check_budget(st: &AppState, ds: &Dataset, budget: u32) -> Result<(), ApiError> {
    if st.cfg.any_budget {
        if budget == 0 || budget as usize > ds.n_holes() {
            return Err(ApiError::bad_request(format!(
                "budget must lie in 1..={}, got {budget}",
                ds.n_holes()
            )));
        }
    } else if !st.cfg.budgets.contains(&budget) {
        return Err(ApiError::bad_request(format!(
            "budget must be one of {:?}, got {budget}",
            st.cfg.budgets
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub dataset_id: String,
    pub mode: Mode,
    pub budget_selections: u32,
    pub budget_minutes: f64,
    pub score: usize,
    pub remaining: u32,
    pub complete: bool,
    pub selections: Vec<Selection>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            dataset_id: s.dataset_id.clone(),
            mode: s.mode,
            budget_selections: s.budget_selections,
            budget_minutes: s.budget_minutes,
            score: s.score(),
            remaining: s.remaining(),
            complete: s.is_complete(),
            selections: s.selections.clone(),
            created_at_ms: s.created_at_ms,
            updated_at_ms: s.updated_at_ms,
        }
    }
}

#[derive(Deserialize)]
pub struct CreateSession {
    pub dataset_id: String,
    pub budget: u32,
    #[serde(default)]
    pub mode: Option<Mode>,
    /// Start-hole seed for agent-replay sessions.
    #[serde(default)]
    pub seed: u64,
}

async fn create_session(State(st): Shared, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<SessionView> {
    let Json(req) = body?;
    let ds = dataset(&st, &req.dataset_id)?;
    check_budget(&st, &ds, req.budget)?;
    let mode = req.mode.unwrap_or(Mode::Human);
    let agent_steps = match mode {
        Mode::Human => Vec::new(),
        Mode::AgentReplay => {
            let st2 = st.clone();
            let ds2 = ds.clone();
            tokio::task::spawn_blocking(move || run_agent(&st2, &ds2, req.budget, req.seed))
                .await
                .map_err(|e| ApiError::internal(e.to_string()))??
        }
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let created = Event::Created {
        session_id: id.clone(),
        dataset_id: req.dataset_id.clone(),
        mode,
        budget_selections: req.budget,
        budget_minutes: budget_minutes(req.budget),
        at_ms: now_ms(),
    };
    let mut session = Session::from_created(&created)?;
    st.log.append(&id, &created).map_err(|e| ApiError::internal(e.to_string()))?;
    for step in &agent_steps {
        let h = ds.hole(step.hole);
        let ev = Event::Selected(Selection {
            hole_id: h.id.clone(),
            ctf: h.ctf.get(),
            is_low: step.is_low,
            at_ms: now_ms(),
        });
        st.log.append(&id, &ev).map_err(|e| ApiError::internal(e.to_string()))?;
        session.apply(&ev)?;
    }
    let view = SessionView::from(&session);
    st.insert(session);
    Ok(Json(view))
}

fn locked_session(st: &AppState, id: &str) -> Result<Session, ApiError> {
    let slot = st.session(id).ok_or_else(|| ApiError::not_found("session", id))?;
    let snapshot = slot.lock().map_err(|_| ApiError::internal("session lock poisoned"))?.clone();
    Ok(snapshot)
}

async fn get_session(State(st): Shared, Path(id): Path<String>) -> ApiResult<SessionView> {
    Ok(Json(SessionView::from(&locked_session(&st, &id)?)))
}

#[derive(Serialize, Deserialize)]
pub struct PatchSummary {
    pub patch_id: String,
    pub holes: usize,
    pub selected: usize,
}

#[derive(Serialize, Deserialize)]
pub struct SquareListing {
    pub square_id: String,
    pub patches: Vec<PatchSummary>,
}

#[derive(Serialize, Deserialize)]
pub struct GridListing {
    pub grid_id: String,
    pub squares: Vec<SquareListing>,
}

/// Full hierarchy, or a flat patch list in patches-only mode.
#[derive(Serialize, Deserialize)]
pub struct AtlasView {
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<GridListing>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<Vec<PatchSummary>>,
}

fn patch_summary(ds: &Dataset, s: &Session, p: PatchIdx) -> PatchSummary {
    let patch = ds.patch(p);
    PatchSummary {
        patch_id: patch.id.clone(),
        holes: patch.holes.len(),
        selected: patch
            .holes
            .iter()
            .filter(|&&h| s.has_selected(&ds.hole(h).id))
            .count(),
    }
}

async fn atlas(State(st): Shared, Path(id): Path<String>) -> ApiResult<AtlasView> {
    let s = locked_session(&st, &id)?;
    let ds = dataset(&st, &s.dataset_id)?;
    let view = if st.cfg.patches_only {
        AtlasView {
            dataset_id: s.dataset_id.clone(),
            grids: None,
            patches: Some(
                (0..ds.patches().len() as u32)
                    .map(|p| patch_summary(&ds, &s, PatchIdx(p)))
                    .collect(),
            ),
        }
    } else {
        let grids = ds
            .grids()
            .iter()
            .map(|g| GridListing {
                grid_id: g.id.clone(),
                squares: g
                    .squares
                    .iter()
                    .map(|&sq| {
                        let square = &ds.squares()[sq.index()];
                        SquareListing {
                            square_id: square.id.clone(),
                            patches: square.patches.iter().map(|&p| patch_summary(&ds, &s, p)).collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        AtlasView {
            dataset_id: s.dataset_id.clone(),
            grids: Some(grids),
            patches: None,
        }
    };
    Ok(Json(view))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleState {
    Unknown,
    Revealed,
}

#[derive(Serialize, Deserialize)]
pub struct HoleView {
    pub hole_id: String,
    pub x: f64,
    pub y: f64,
    pub state: HoleState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_low: Option<bool>,
}

#[derive(Serialize, Deserialize)]
pub struct PatchView {
    pub patch_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub square_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_id: Option<String>,
    pub holes: Vec<HoleView>,
}

#[derive(Deserialize)]
pub struct ViewQuery {
    pub patch: Option<String>,
}

async fn view(State(st): Shared, Path(id): Path<String>, Query(q): Query<ViewQuery>) -> ApiResult<PatchView> {
    let s = locked_session(&st, &id)?;
    let ds = dataset(&st, &s.dataset_id)?;
    let pid = q.patch.ok_or_else(|| ApiError::bad_request("query parameter `patch` is required"))?;
    let p = ds.patch_idx(&pid).map_err(|_| ApiError::not_found("patch", &pid))?;
    let patch = ds.patch(p);
    let square = &ds.squares()[patch.square.index()];
    let holes = patch
        .holes
        .iter()
        .map(|&h| {
            let hole = ds.hole(h);
            let sel = s.selections.iter().find(|x| x.hole_id == hole.id);
            HoleView {
                hole_id: hole.id.clone(),
                x: hole.x,
                y: hole.y,
                state: if sel.is_some() { HoleState::Revealed } else { HoleState::Unknown },
                ctf: sel.map(|x| x.ctf),
                is_low: sel.map(|x| x.is_low),
            }
        })
        .collect();
    Ok(Json(PatchView {
        patch_id: patch.id.clone(),
        square_id: (!st.cfg.patches_only).then(|| square.id.clone()),
        grid_id: (!st.cfg.patches_only).then(|| ds.grids()[square.grid.index()].id.clone()),
        holes,
    }))
}

#[derive(Deserialize)]
pub struct SelectRequest {
    pub hole_id: String,
}

#[derive(Serialize, Deserialize)]
pub struct SelectResponse {
    pub hole_id: String,
    pub ctf: f64,
    pub is_low: bool,
    pub score: usize,
    pub remaining: u32,
}

async fn select(
    State(st): Shared,
    Path(id): Path<String>,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> ApiResult<SelectResponse> {
    let Json(req) = body?;
    let slot = st.session(&id).ok_or_else(|| ApiError::not_found("session", &id))?;
    let mut s = slot.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
    let ds = dataset(&st, &s.dataset_id)?;
    let h = ds
        .hole_idx(&req.hole_id)
        .map_err(|_| ApiError::not_found("hole", &req.hole_id))?;
    s.check(&req.hole_id)?;
    let ctf = ds.hole(h).ctf.get();
    let ev = Event::Selected(Selection {
        hole_id: req.hole_id.clone(),
        ctf,
        is_low: cryoplan::atlas::RewardTable::default().is_low(ds.hole(h).ctf),
        at_ms: now_ms(),
    });
    st.log.append(&id, &ev).map_err(|e| ApiError::internal(e.to_string()))?;
    s.apply(&ev)?;
    let last = s.selections.last().expect("just applied");
    Ok(Json(SelectResponse {
        hole_id: last.hole_id.clone(),
        ctf: last.ctf,
        is_low: last.is_low,
        score: s.score(),
        remaining: s.remaining(),
    }))
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub session_id: String,
    pub dataset_id: String,
    pub mode: Mode,
    pub budget_selections: u32,
    pub budget_minutes: f64,
    pub score: usize,
    pub complete: bool,
    /// Selection history in selection order.
    pub selections: Vec<Selection>,
    /// Low-CTF count after each selection.
    pub cumulative: Vec<usize>,
    /// Share of the cohort scoring below this session (ties count half), in
    /// percent; absent when the cohort is empty.
    pub percentile: Option<f64>,
    pub cohort_size: usize,
}

/// Cohort: other completed human sessions on the same dataset and budget.
pub fn percentile(score: usize, cohort: &[usize]) -> Option<f64> {
    if cohort.is_empty() {
        return None;
    }
    let below = cohort.iter().filter(|&&c| c < score).count() as f64;
    let equal = cohort.iter().filter(|&&c| c == score).count() as f64;
    Some(100.0 * (below + 0.5 * equal) / cohort.len() as f64)
}

fn cumulative(lows: impl IntoIterator<Item = bool>) -> Vec<usize> {
    lows.into_iter()
        .scan(0usize, |acc, low| {
            *acc += usize::from(low);
            Some(*acc)
        })
        .collect()
}

async fn summary(State(st): Shared, Path(id): Path<String>) -> ApiResult<Summary> {
    let s = locked_session(&st, &id)?;
    let cohort: Vec<usize> = st
        .snapshot()
        .iter()
        .filter(|o| {
            o.id != s.id
                && o.mode == Mode::Human
                && o.is_complete()
                && o.dataset_id == s.dataset_id
                && o.budget_selections == s.budget_selections
        })
        .map(Session::score)
        .collect();
    Ok(Json(Summary {
        session_id: s.id.clone(),
        dataset_id: s.dataset_id.clone(),
        mode: s.mode,
        budget_selections: s.budget_selections,
        budget_minutes: s.budget_minutes,
        score: s.score(),
        complete: s.is_complete(),
        cumulative: cumulative(s.selections.iter().map(|x| x.is_low)),
        selections: s.selections.clone(),
        percentile: percentile(s.score(), &cohort),
        cohort_size: cohort.len(),
    }))
}

/// Greedy policy rollout capped at `budget` selections, charged movement
/// time against the mapped minute budget.
fn run_agent(st: &AppState, ds: &Dataset, budget: u32, seed: u64) -> Result<Vec<StepRecord>, ApiError> {
    let policy = st
        .policy
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_agent", "no agent policy loaded"))?;
    let model = policy
        .classifier
        .clone()
        .unwrap_or_else(|| ClassifierModel::preset(Preset::Gt, seed));
    let pt = PredictionTable::predict_all(ds, &model);
    let mut r = rng::seeded(seed, &[AGENT_START_STREAM]);
    let start = HoleIdx(rand::Rng::random_range(&mut r, 0..ds.n_holes() as u32));
    let st = run_policy_capped(policy, ds, &pt, start, budget_minutes(budget), Some(budget as usize))
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(st.into_trajectory())
}

#[derive(Deserialize)]
pub struct CompareRequest {
    pub dataset_id: String,
    pub budget: u32,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct AgentStep {
    pub move_class: MoveClass,
    pub cost: f64,
    pub elapsed: f64,
}

#[derive(Serialize, Deserialize)]
pub struct CompareResponse {
    pub dataset_id: String,
    pub budget_selections: u32,
    pub budget_minutes: f64,
    pub seed: u64,
    pub selections: usize,
    pub score: usize,
    /// Low-CTF count after each agent selection.
    pub cumulative: Vec<usize>,
    pub steps: Vec<AgentStep>,
}

async fn compare(State(st): Shared, body: Result<Json<CompareRequest>, JsonRejection>) -> ApiResult<CompareResponse> {
    let Json(req) = body?;
    let ds = dataset(&st, &req.dataset_id)?;
    check_budget(&st, &ds, req.budget)?;
    let st2 = st.clone();
    let ds2 = ds.clone();
    let traj = tokio::task::spawn_blocking(move || run_agent(&st2, &ds2, req.budget, req.seed))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut elapsed = 0.0;
    let steps = traj
        .iter()
        .map(|s| {
            elapsed += s.cost;
            AgentStep {
                move_class: s.move_class,
                cost: s.cost,
                elapsed,
            }
        })
        .collect();
    Ok(Json(CompareResponse {
        dataset_id: req.dataset_id,
        budget_selections: req.budget,
        budget_minutes: budget_minutes(req.budget),
        seed: req.seed,
        selections: traj.len(),
        score: traj.iter().filter(|s| s.is_low).count(),
        cumulative: cumulative(traj.iter().map(|s| s.is_low)),
        steps,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_rules() {
        assert_eq!(percentile(3, &[]), None);
        assert_eq!(percentile(3, &[1, 2, 3, 5]), Some(62.5));
        assert_eq!(percentile(0, &[0]), Some(50.0));
    }

    #[test]
    fn cumulative_is_monotone() {
        assert_eq!(cumulative([true, false, true, true]), vec![1, 1, 2, 3]);
    }
}
