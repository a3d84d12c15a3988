use std::path::PathBuf;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use dvp_core::bank::{ImageId, ThemeBank};
use dvp_core::engine::{RefineRequest, ScoreWeights, Session};
use dvp_core::error::{BankError, EngineError, IntentError};
use dvp_core::generation::{GenerationParams, JobStatus};
use dvp_core::layout::{validate_pins, Cell, GridSpec, Pin, Pins, StarPolicy};

use crate::error::ApiError;
use crate::views::{BankView, RunResultView, RunView, SessionView};
use crate::{bank_id_for, AppState};

type ApiResult<T> = Result<T, ApiError>;
type Body<T> = Result<Json<T>, JsonRejection>;

pub fn router(state: AppState) -> Router {
    let origin = match &state.config().cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE]);
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/banks", post(create_bank))
        .route("/banks/{bank_id}", get(get_bank))
        .route("/banks/{bank_id}/images/{image_id}", get(bank_image))
        .route("/sessions", post(create_session))
        .route("/sessions/{session_id}", get(get_session))
        .route("/sessions/{session_id}/pins", post(add_pin).delete(remove_pin))
        .route("/sessions/{session_id}/runs", post(create_run))
        .route("/sessions/{session_id}/select", post(select))
        .route("/runs/{run_id}", get(get_run))
        .route("/artifacts/{file}", get(artifact));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::not_found("NotFound", "route") })
        .layer(cors)
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker panicked: {e}")))?
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    embedder: String,
    inpainter: String,
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    let b = st.engine().backends();
    Json(Health {
        status: "ok",
        embedder: b.embedder.descriptor().name,
        inpainter: b.inpainter.name().to_string(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBank {
    dir: PathBuf,
    theme: String,
}

async fn create_bank(State(st): State<AppState>, body: Body<CreateBank>) -> ApiResult<Json<BankView>> {
    let Json(req) = body?;
    if req.theme.trim().is_empty() {
        return Err(ApiError::bad_request("theme must not be empty"));
    }
    blocking(move || {
        let dir = std::fs::canonicalize(&req.dir).map_err(|e| {
            ApiError::from(BankError::UnreadableDirectory {
                path: req.dir.clone(),
                source: e,
            })
        })?;
        let bank = ThemeBank::create(&dir, req.theme.trim())?;
        st.engine().bank_vectors(&bank)?;
        let id = st.register_bank(&bank)?;
        Ok(Json(BankView::new(&id, &bank)))
    })
    .await
}

async fn get_bank(State(st): State<AppState>, Path(bank_id): Path<String>) -> ApiResult<Json<BankView>> {
    let bank = st.open_bank(&bank_id)?;
    Ok(Json(BankView::new(&bank_id, &bank)))
}

fn parse_image_id(s: &str) -> ApiResult<ImageId> {
    s.parse().map_err(ApiError::bad_request)
}

const IMMUTABLE: &str = "public, max-age=31536000, immutable";

fn png(bytes: Vec<u8>) -> Response {
    (
        [(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, IMMUTABLE)],
        bytes,
    )
        .into_response()
}

async fn bank_image(State(st): State<AppState>, Path((bank_id, image_id)): Path<(String, String)>) -> ApiResult<Response> {
    let bank = st.open_bank(&bank_id)?;
    let id = parse_image_id(&image_id)?;
    if bank.manifest().entry(&id).is_none() {
        return Err(BankError::UnknownImage(id).into());
    }
    let bytes = blocking(move || {
        let img = bank.load_image(&id)?;
        img.encode_png().map_err(|e| ApiError::internal(e.to_string()))
    })
    .await?;
    Ok(png(bytes))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    bank_id: String,
    prompt: String,
    n: Option<usize>,
    k: Option<usize>,
    elements: Option<Vec<String>>,
    weights: Option<ScoreWeights>,
    seed: Option<u64>,
    /// `RxC`, with `canvas` as accepted by the CLI.
    grid: Option<String>,
    canvas: Option<String>,
    cell_px: Option<u32>,
    stars: Option<String>,
}

async fn create_session(State(st): State<AppState>, body: Body<CreateSession>) -> ApiResult<Json<SessionView>> {
    let Json(req) = body?;
    let bank = st.open_bank(&req.bank_id)?;
    let mut config = st.config().defaults.clone();
    if let Some(e) = req.elements {
        config.n = e.len();
        config.elements = Some(e);
    } else if let Some(n) = req.n {
        config.n = n;
    }
    if let Some(k) = req.k {
        config.k = k;
    }
    if let Some(w) = req.weights {
        w.validate()?;
        config.weights = w;
    }
    if let Some(seed) = req.seed {
        config.seed = seed;
    }
    let px = req.cell_px.unwrap_or(config.grid.cell_px());
    if req.grid.is_some() || req.canvas.is_some() {
        let grid = req.grid.as_deref().unwrap_or("3x3");
        let canvas = req.canvas.as_deref().unwrap_or("center");
        config.grid = GridSpec::parse(grid, canvas, px).map_err(EngineError::from)?;
    } else if req.cell_px.is_some() {
        config.grid = config.grid.with_cell_px(px).map_err(EngineError::from)?;
    }
    if let Some(s) = req.stars {
        config.stars = StarPolicy::parse(&s).map_err(ApiError::bad_request)?;
        config.stars.resolve(&config.grid).map_err(EngineError::from)?;
    }
    let bank_id = req.bank_id;
    blocking(move || {
        let session = st.engine().open_session(st.store(), &bank, &req.prompt, config)?;
        Ok(Json(SessionView::new(&bank_id, &session)))
    })
    .await
}

fn view(s: &Session) -> Json<SessionView> {
    Json(SessionView::new(&bank_id_for(&s.bank_root), s))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    Ok(view(&st.store().load(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PinRequest {
    cell: Cell,
    image_id: ImageId,
}

async fn add_pin(State(st): State<AppState>, Path(id): Path<String>, body: Body<PinRequest>) -> ApiResult<Json<SessionView>> {
    let Json(req) = body?;
    let lock = st.session_lock(&id);
    let _g = lock.lock().await;
    let mut s = st.store().load(&id)?;
    let bank = ThemeBank::open(&s.bank_root)?;
    s.pin(req.cell, req.image_id, &bank)?;
    st.store().save(&s)?;
    Ok(view(&s))
}

/// Accepts the same body as pinning; only the cell matters.
#[derive(Deserialize)]
struct UnpinRequest {
    cell: Cell,
}

async fn remove_pin(State(st): State<AppState>, Path(id): Path<String>, body: Body<UnpinRequest>) -> ApiResult<Json<SessionView>> {
    let Json(req) = body?;
    let lock = st.session_lock(&id);
    let _g = lock.lock().await;
    let mut s = st.store().load(&id)?;
    if s.unpin(req.cell) {
        st.store().save(&s)?;
    }
    Ok(view(&s))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    run_id: String,
    arrangement_id: usize,
}

async fn select(State(st): State<AppState>, Path(id): Path<String>, body: Body<SelectRequest>) -> ApiResult<Json<SessionView>> {
    let Json(req) = body?;
    let lock = st.session_lock(&id);
    let _g = lock.lock().await;
    let mut s = st.store().load(&id)?;
    s.select(&req.run_id, req.arrangement_id)?;
    st.store().save(&s)?;
    Ok(view(&s))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunParams {
    guidance_scale: Option<f64>,
    steps: Option<u32>,
    seed: Option<u64>,
    seed_per_arrangement: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    weights: Option<ScoreWeights>,
    /// Replaces the session's pins.
    pins: Option<Vec<Pin>>,
    params: Option<RunParams>,
    /// Re-extracts and re-matches before running.
    prompt: Option<String>,
}

#[derive(Serialize)]
struct RunAccepted {
    run_id: String,
    status: JobStatus,
    url: String,
}

fn pins_from(list: Vec<Pin>) -> ApiResult<Pins> {
    let mut pins = Pins::new();
    for p in list {
        if pins.insert(p.cell, p.image_id).is_some() {
            return Err(ApiError::bad_request(format!("cell {:?} pinned twice", p.cell)));
        }
    }
    Ok(pins)
}

async fn create_run(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Body<RunRequest>,
) -> ApiResult<(StatusCode, Json<RunAccepted>)> {
    let Json(req) = body?;
    let lock = st.session_lock(&id);
    let _g = lock.lock().await;
    let mut snapshot = st.store().load(&id)?;
    let bank = ThemeBank::open(&snapshot.bank_root)?;

    if let Some(p) = &req.params {
        let c = &mut snapshot.config;
        c.guidance_scale = p.guidance_scale.unwrap_or(c.guidance_scale);
        c.steps = p.steps.unwrap_or(c.steps);
        c.seed = p.seed.unwrap_or(c.seed);
        c.seed_per_arrangement = p.seed_per_arrangement.unwrap_or(c.seed_per_arrangement);
        let check = GenerationParams {
            guidance_scale: c.guidance_scale,
            steps: c.steps,
            seed: c.seed,
            prompt: snapshot.prompt.clone(),
        };
        check.validate().map_err(EngineError::from)?;
    }
    if let Some(w) = &req.weights {
        w.validate()?;
    }
    let pins = req.pins.clone().map(pins_from).transpose()?;
    if let Some(pins) = &pins {
        validate_pins(&snapshot.config.grid, pins).map_err(EngineError::from)?;
        if let Some(missing) = pins.values().find(|id| bank.manifest().entry(id).is_none()) {
            return Err(BankError::UnknownImage(*missing).into());
        }
    }
    if matches!(&req.prompt, Some(p) if p.trim().is_empty()) {
        return Err(EngineError::from(IntentError::EmptyPrompt).into());
    }

    let run_id = st.allocate_run_id();
    st.set_live(RunView {
        run_id: run_id.clone(),
        session_id: id.clone(),
        status: JobStatus::Pending,
        error: None,
        result: None,
    });
    let refine = RefineRequest {
        pins,
        new_prompt: req.prompt.clone(),
        weights: req.weights,
    };
    tokio::spawn(execute_run(st.clone(), snapshot, bank, refine, run_id.clone()));
    Ok((
        StatusCode::ACCEPTED,
        Json(RunAccepted {
            url: format!("/v1/runs/{run_id}"),
            run_id,
            status: JobStatus::Pending,
        }),
    ))
}

async fn execute_run(st: AppState, snapshot: Session, bank: ThemeBank, req: RefineRequest, run_id: String) {
    let session_id = snapshot.session_id.clone();
    let mut live = RunView {
        run_id: run_id.clone(),
        session_id: session_id.clone(),
        status: JobStatus::Running,
        error: None,
        result: None,
    };
    let permit = st.0.pool.acquire().await;
    st.set_live(live.clone());

    let worker = st.clone();
    let (new_prompt, new_pins) = (req.new_prompt.is_some(), req.pins.is_some());
    let rid = run_id.clone();
    let ran = blocking(move || {
        let mut s = snapshot;
        let outcome = worker.engine().refine(&mut s, &bank, req, &rid)?;
        let result = RunResultView::new(&outcome.report, |rel| worker.publish_artifact(&outcome.run_dir.join(rel)))?;
        Ok((s, result))
    })
    .await;
    drop(permit);

    let merged = match ran {
        Ok((after, result)) => {
            let lock = st.session_lock(&session_id);
            let _g = lock.lock().await;
            merge_into_store(&st, after, new_prompt, new_pins).map(|_| result)
        }
        Err(e) => Err(e),
    };
    match merged {
        Ok(result) => {
            live.status = JobStatus::Done;
            live.result = Some(result);
        }
        Err(e) => {
            tracing::warn!(run_id, code = %e.code, "run failed");
            live.status = JobStatus::Failed;
            live.error = Some(e);
        }
    }
    if let Err(e) = st.finish(live) {
        tracing::error!(run_id, error = %e.message, "cannot persist run");
    }
}

/// Folds a finished run into the stored session, keeping pins changed while
/// it ran unless the run itself replaced them.
fn merge_into_store(st: &AppState, after: Session, new_prompt: bool, new_pins: bool) -> ApiResult<()> {
    let mut current = st.store().load(&after.session_id)?;
    if new_prompt {
        current.prompt = after.prompt;
        current.elements = after.elements;
        current.table = after.table;
        current.bank_digest = after.bank_digest;
    }
    if new_pins {
        current.pins = after.pins;
    }
    current.config = after.config;
    if let Some(entry) = after.history.last() {
        current.history.push(entry.clone());
    }
    st.store().save(&current)?;
    Ok(())
}

async fn get_run(State(st): State<AppState>, Path(run_id): Path<String>) -> ApiResult<Json<RunView>> {
    Ok(Json(st.run_view(&run_id)?))
}

async fn artifact(State(st): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let unknown = || ApiError::not_found("UnknownArtifact", format!("artifact {file}"));
    let path = file
        .strip_suffix(".png")
        .and_then(|sha| st.artifact_path(sha))
        .ok_or_else(unknown)?;
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(png(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(unknown()),
        Err(e) => Err(e.into()),
    }
}
