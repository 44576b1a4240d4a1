//! HTTP service over read-only artifacts. Every endpoint lives under
//! `/api/v1` except `/health`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use npicost_core::artifacts::{value_fingerprint, ArtifactStore, RegionBundle};
use npicost_core::cost::{CostBreakdown, EconScenario};
use npicost_core::counterfactual::{outcome_from_trajectories, simulate_all, CounterfactualDraw, ShockMode};
use npicost_core::icer::{sicer, PrevalenceSource};
use npicost_core::ingest::PolicySchedule;
use npicost_core::npi::{Npi, NPI_COUNT};
use npicost_core::optimizer::{optimize, OptimizationConfig, Parameterization};
use npicost_core::regression::ModelVariant;
use npicost_core::stats::Summary;
use npicost_core::Error;

pub const MAX_DRAWS: usize = 100;

pub struct AppState {
    pub regions: HashMap<String, Arc<RegionBundle>>,
    pub default_seed: u64,
    jobs: Mutex<HashMap<String, Job>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(regions: Vec<RegionBundle>, default_seed: u64) -> Self {
        Self {
            regions: regions.into_iter().map(|b| (b.meta.region_id.clone(), Arc::new(b))).collect(),
            default_seed,
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
        }
    }

    /// Load every region that has draws and an NPI fit for `variant`.
    pub fn load(store: &ArtifactStore, variant: ModelVariant, default_seed: u64) -> npicost_core::Result<Self> {
        let mut bundles = Vec::new();
        for region in store.regions()? {
            match store.bundle(&region, variant, MAX_DRAWS, default_seed) {
                Ok(b) => bundles.push(b),
                Err(e) => warn!("skipping {region}: {e}"),
            }
        }
        info!("serving {} regions", bundles.len());
        Ok(Self::new(bundles, default_seed))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/v1/regions", get(list_regions))
        .route("/api/v1/regions/{id}/observed", get(observed))
        .route("/api/v1/evaluate", post(evaluate))
        .route("/api/v1/optimize", post(submit_optimize))
        .route("/api/v1/jobs/{id}", get(job_status))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidParameter(_) => StatusCode::BAD_REQUEST,
            Error::Contract(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region_id: String,
    pub population: u64,
    pub start_date: String,
    pub weeks: usize,
    pub days: usize,
}

async fn list_regions(State(state): State<Arc<AppState>>) -> Json<Vec<RegionSummary>> {
    let mut out: Vec<RegionSummary> = state
        .regions
        .values()
        .map(|b| RegionSummary {
            region_id: b.meta.region_id.clone(),
            population: b.meta.population,
            start_date: b.meta.start_date.to_string(),
            weeks: b.weeks(),
            days: b.draws[0].days,
        })
        .collect();
    out.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    Json(out)
}

fn region(state: &AppState, id: &str) -> ApiResult<Arc<RegionBundle>> {
    state
        .regions
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown region {id:?}")))
}

/// Per-day median and central 90% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: Vec<f64>,
    pub p05: Vec<f64>,
    pub p95: Vec<f64>,
}

impl Band {
    fn of(per_draw: &[Vec<f64>]) -> Self {
        let len = per_draw.iter().map(Vec::len).min().unwrap_or(0);
        let mut band = Band {
            median: Vec::with_capacity(len),
            p05: Vec::with_capacity(len),
            p95: Vec::with_capacity(len),
        };
        for t in 0..len {
            let s = Summary::of(&per_draw.iter().map(|v| v[t]).collect::<Vec<_>>(), 0.9);
            band.median.push(s.median);
            band.p05.push(s.lo);
            band.p95.push(s.hi);
        }
        band
    }

    fn from_summaries(s: &[Summary]) -> Self {
        Band {
            median: s.iter().map(|x| x.median).collect(),
            p05: s.iter().map(|x| x.lo).collect(),
            p95: s.iter().map(|x| x.hi).collect(),
        }
    }
}

/// Schedule as an 11-row matrix, one row per NPI in canonical order.
pub fn schedule_matrix(s: &PolicySchedule) -> Vec<Vec<f64>> {
    Npi::ALL.iter().map(|n| s.series(*n)).collect()
}

pub fn schedule_from_matrix(region_id: &str, m: &[Vec<f64>], weeks: usize) -> ApiResult<PolicySchedule> {
    if m.len() != NPI_COUNT || m.iter().any(|row| row.len() != weeks) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "schedule must be {NPI_COUNT} rows of {weeks} weeks, got {} rows of lengths {:?}",
                m.len(),
                m.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        ));
    }
    if let Some(bad) = m.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ApiError::bad_request(format!("schedule entry {bad} outside [0,1]")));
    }
    let weeks_u = (0..weeks)
        .map(|w| {
            let mut u = [0.0; NPI_COUNT];
            for (k, row) in m.iter().enumerate() {
                u[k] = row[w];
            }
            u
        })
        .collect();
    Ok(PolicySchedule {
        region_id: region_id.to_owned(),
        weeks: weeks_u,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservedResponse {
    pub region_id: String,
    pub start_date: String,
    pub npis: Vec<String>,
    pub schedule: Vec<Vec<f64>>,
    pub deaths: Vec<u64>,
    pub cases: Vec<u64>,
    /// Expected daily deaths along the fitted trajectories.
    pub fitted_deaths: Band,
}

async fn observed(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ObservedResponse>> {
    let b = region(&state, &id)?;
    let weeks = b.weeks();
    let fitted: Vec<Vec<f64>> = b
        .set
        .draws
        .iter()
        .map(|d| d.trajectory.expected_deaths(&b.set.epi))
        .collect();
    Ok(Json(ObservedResponse {
        region_id: id,
        start_date: b.meta.start_date.to_string(),
        npis: Npi::ALL.iter().map(|n| n.name().to_owned()).collect(),
        schedule: schedule_matrix(&PolicySchedule {
            region_id: b.meta.region_id.clone(),
            weeks: b.schedule.weeks[..weeks].to_vec(),
        }),
        deaths: b.clinical.deaths.clone(),
        cases: b.clinical.cases.clone(),
        fitted_deaths: Band::of(&fitted),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    pub region_id: String,
    /// 11 rows (NPIs in canonical order) of weekly strengths.
    pub schedule: Vec<Vec<f64>>,
    #[serde(default)]
    pub scenario: EconScenario,
    pub draw_count: Option<usize>,
    #[serde(default)]
    pub shock_mode: ShockMode,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub region_id: String,
    pub weeks: usize,
    pub draw_count: usize,
    pub deaths: Band,
    pub cumulative_deaths: Band,
    pub deaths_total: Summary,
    pub cost: CostBreakdown,
    pub expected_cost: f64,
    /// Cumulative SICER at the end of each week; absent when the schedule
    /// costs nothing.
    pub sicer: Option<Band>,
    pub fingerprint: String,
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

fn draw_count(requested: Option<usize>, available: usize) -> ApiResult<usize> {
    let n = requested.unwrap_or(MAX_DRAWS);
    if n == 0 || n > MAX_DRAWS {
        return Err(ApiError::bad_request(format!("draw_count must be in 1..={MAX_DRAWS}")));
    }
    Ok(n.min(available))
}

/// Evenly spaced subset of the loaded draws with resampling seeds derived
/// from `seed`.
fn select_draws(b: &RegionBundle, n: usize, seed: u64) -> Vec<CounterfactualDraw> {
    let total = b.draws.len();
    (0..n)
        .map(|k| {
            let mut d = b.draws[k * total / n].clone();
            d.seed = seed.wrapping_add(k as u64);
            d
        })
        .collect()
}

pub fn evaluate_scenario(state: &AppState, req: &ScenarioRequest) -> ApiResult<ScenarioResponse> {
    let b = region(state, &req.region_id)?;
    req.scenario.validate()?;
    let weeks = b.weeks();
    let schedule = schedule_from_matrix(&req.region_id, &req.schedule, weeks)?;
    let n = draw_count(req.draw_count, b.draws.len())?;
    let seed = req.seed.unwrap_or(state.default_seed);
    let draws = select_draws(&b, n, seed);
    let econ = b.meta.econ(&req.scenario);
    let trajectories = simulate_all(&draws, &schedule, req.shock_mode)?;
    let outcome = outcome_from_trajectories(&schedule, &draws, &trajectories, &econ)?;
    let daily: Vec<Vec<f64>> = draws
        .iter()
        .zip(&trajectories)
        .map(|(d, t)| t.expected_deaths(&d.epi))
        .collect();
    let cumulative: Vec<Vec<f64>> = daily
        .iter()
        .map(|v| {
            v.iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let days = draws[0].days;
    let sicer_band = match sicer(&schedule, &draws, &econ, (0, days - 1), req.shock_mode, PrevalenceSource::Policy) {
        Ok(s) => {
            let weekly: Option<Vec<Summary>> = s.cumulative.into_iter().collect();
            weekly.map(|w| Band::from_summaries(&w))
        }
        Err(Error::UndefinedRatio) => None,
        Err(e) => return Err(e.into()),
    };
    let fingerprint = value_fingerprint(&(req, &b.fingerprint, seed, n));
    Ok(ScenarioResponse {
        region_id: req.region_id.clone(),
        weeks,
        draw_count: n,
        deaths: Band::of(&daily),
        cumulative_deaths: Band::of(&cumulative),
        deaths_total: outcome.deaths_total,
        cost: outcome.cost,
        expected_cost: outcome.expected_cost,
        sicer: sicer_band,
        fingerprint,
    })
}

async fn evaluate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ScenarioResponse>> {
    let req: ScenarioRequest = parse_json(&body)?;
    let res = tokio::task::spawn_blocking(move || evaluate_scenario(&state, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(res))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeRequest {
    pub region_id: String,
    #[serde(default)]
    pub scenario: EconScenario,
    pub draw_count: Option<usize>,
    #[serde(default)]
    pub shock_mode: ShockMode,
    #[serde(default)]
    pub parameterization: Parameterization,
    pub seed: Option<u64>,
    pub max_evals: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub schedule: Vec<Vec<f64>>,
    pub expected_cost: f64,
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub status: JobStatus,
    pub result: Option<OptimizeResult>,
    pub error: Option<String>,
}

fn set_job(state: &AppState, job: Job) {
    state.jobs.lock().expect("job table").insert(job.job_id.clone(), job);
}

async fn submit_optimize(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Job>)> {
    let req: OptimizeRequest = parse_json(&body)?;
    let b = region(&state, &req.region_id)?;
    req.scenario.validate()?;
    let n = draw_count(req.draw_count, b.draws.len())?;
    let seed = req.seed.unwrap_or(state.default_seed);
    let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::SeqCst));
    let job = Job {
        job_id: job_id.clone(),
        status: JobStatus::Running,
        result: None,
        error: None,
    };
    set_job(&state, job.clone());
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let draws = select_draws(&b, n, seed);
        let defaults = OptimizationConfig::default();
        let config = OptimizationConfig {
            parameterization: req.parameterization,
            shock_mode: req.shock_mode,
            seed,
            max_evals: req.max_evals.unwrap_or(defaults.max_evals),
            ..defaults
        };
        let done = match optimize(&draws, &b.schedule, &b.meta.econ(&req.scenario), &config) {
            Ok(r) => Job {
                job_id: job_id.clone(),
                status: JobStatus::Done,
                result: Some(OptimizeResult {
                    schedule: schedule_matrix(&r.schedule),
                    expected_cost: r.cost,
                    budget_exhausted: r.budget_exhausted,
                }),
                error: None,
            },
            Err(e) => Job {
                job_id: job_id.clone(),
                status: JobStatus::Failed,
                result: None,
                error: Some(e.to_string()),
            },
        };
        set_job(&worker, done);
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Job>> {
    state
        .jobs
        .lock()
        .expect("job table")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id:?}")))
}
