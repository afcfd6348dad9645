use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{RwLock, Semaphore};

use layerscene::imaging::{encode_grid, encode_png, TONEMAP};
use layerscene::metrics::{evaluate, EvalPair, MetricsReport};
use layerscene::scene::compute_alpha;
use layerscene::{
    BlendMode, ConditionToken, EditOp, Grid, GridPayload, ImportedLayer, Layout, Mask, Offset, Pipeline,
    SceneCheckpoint, SceneSpec,
};

use crate::error::{ApiError, ApiResult, ErrorBody};
use crate::store::{AnchorUpload, IndexEntry, SceneRecord, Store};

/// JSON body extractor whose rejections use the service error format.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

impl<T: Serialize> IntoResponse for ApiJson<T> {
    fn into_response(self) -> Response {
        Json(self.0).into_response()
    }
}

type Shared<T> = Arc<RwLock<T>>;

pub(crate) struct Inner {
    pipeline: Pipeline,
    store: Store,
    scenes: RwLock<BTreeMap<String, Shared<SceneRecord>>>,
    index: Mutex<BTreeMap<String, IndexEntry>>,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    /// Scene id to the job currently optimizing it.
    busy: Mutex<BTreeMap<String, String>>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    pub fn new(pipeline: Pipeline, store: Store, workers: usize) -> layerscene::Result<Self> {
        let records = store.load_all()?;
        let index = records
            .values()
            .map(|r| {
                (
                    r.id.clone(),
                    IndexEntry {
                        id: r.id.clone(),
                        created_ms: r.created_ms,
                        updated_ms: r.updated_ms,
                    },
                )
            })
            .collect();
        let scenes = records.into_iter().map(|(id, r)| (id, Arc::new(RwLock::new(r)))).collect();
        Ok(Self(Arc::new(Inner {
            pipeline,
            store,
            scenes: RwLock::new(scenes),
            index: Mutex::new(index),
            jobs: Mutex::new(BTreeMap::new()),
            busy: Mutex::new(BTreeMap::new()),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        })))
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.0.pipeline
    }

    /// Current state of a stored scene.
    pub async fn checkpoint(&self, id: &str) -> Option<SceneCheckpoint> {
        let rec = self.0.scenes.read().await.get(id).cloned()?;
        let cp = rec.read().await.current.clone();
        Some(cp)
    }

    async fn record(&self, id: &str) -> ApiResult<Shared<SceneRecord>> {
        self.0
            .scenes
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("scene", id))
    }

    /// Writes the record and refreshes its index entry.
    fn persist(&self, rec: &SceneRecord) -> ApiResult<()> {
        self.0.store.save(rec)?;
        let mut index = self.0.index.lock().unwrap();
        index.insert(
            rec.id.clone(),
            IndexEntry {
                id: rec.id.clone(),
                created_ms: rec.created_ms,
                updated_ms: rec.updated_ms,
            },
        );
        self.0.store.write_index(&index.values().cloned().collect::<Vec<_>>())?;
        Ok(())
    }

    fn unindex(&self, id: &str) -> ApiResult<()> {
        let mut index = self.0.index.lock().unwrap();
        index.remove(id);
        self.0.store.write_index(&index.values().cloned().collect::<Vec<_>>())?;
        Ok(())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", get(list_scenes).post(create_scene))
        .route("/scenes/{id}", get(get_scene).delete(delete_scene))
        .route("/scenes/{id}/edits", post(apply_edit))
        .route("/scenes/{id}/render", post(render_scene))
        .route("/scenes/{id}/anchor", post(upload_anchor))
        .route("/scenes/{id}/optimize", post(start_optimize))
        .route("/jobs/{id}", get(get_job))
        .route("/metrics", post(metrics))
        .with_state(state)
}

/// Parses an optional JSON body; an empty body gives the default.
fn optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "denoiser": state.pipeline().denoiser.name(),
        "scenes": state.0.scenes.read().await.len(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    /// Diffusion step the layers are held at.
    pub step: usize,
    pub spec: SceneSpec,
    pub global_prompt: Option<ConditionToken>,
    pub global_token: ConditionToken,
    pub blend: BlendMode,
    pub history: Vec<EditOp>,
    pub has_anchor: bool,
}

impl SceneView {
    fn of(r: &SceneRecord) -> Self {
        Self {
            id: r.id.clone(),
            created_ms: r.created_ms,
            updated_ms: r.updated_ms,
            step: r.current.tau(),
            spec: r.current.scene.spec(),
            global_prompt: r.current.global_prompt.clone(),
            global_token: r.current.global_token(),
            blend: r.current.blend,
            history: r.history.clone(),
            has_anchor: r.anchor.is_some(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateScene {
    pub spec: SceneSpec,
    #[serde(default)]
    pub global_prompt: Option<ConditionToken>,
    /// Starts an optimization job right away.
    #[serde(default)]
    pub optimize: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub scene: SceneView,
    pub job: Option<JobStatus>,
}

async fn create_scene(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<CreateScene>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let p = state.pipeline();
    p.check_canvas(&req.spec)?;
    let scene = layerscene::init_scene(&req.spec, p.schedule.steps())?;
    let cp = SceneCheckpoint {
        scene,
        schedule: p.schedule.clone(),
        blend: p.config.sampler.blend,
        stepper: p.config.sampler.stepper.clone(),
        guidance: p.config.sampler.guidance,
        global_prompt: req.global_prompt,
        denoiser: Some(p.config.denoiser.clone()),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let rec = SceneRecord::new(id.clone(), cp);
    state.persist(&rec)?;
    let view = SceneView::of(&rec);
    state.0.scenes.write().await.insert(id.clone(), Arc::new(RwLock::new(rec)));
    let job = if req.optimize { Some(spawn_optimize(&state, &id).await?) } else { None };
    Ok((StatusCode::CREATED, Json(Created { scene: view, job })))
}

async fn list_scenes(State(state): State<AppState>) -> Json<Vec<IndexEntry>> {
    Json(state.0.index.lock().unwrap().values().cloned().collect())
}

async fn get_scene(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SceneView>> {
    let rec = state.record(&id).await?;
    let view = SceneView::of(&*rec.read().await);
    Ok(Json(view))
}

async fn delete_scene(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let removed = state.0.scenes.write().await.remove(&id);
    let Some(rec) = removed else {
        return Err(ApiError::not_found("scene", &id));
    };
    // wait for in-flight edits on the record before removing its files
    let _guard = rec.write().await;
    state.0.store.remove(&id)?;
    state.unindex(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

/// Copies `layer` out of scene `from_scene` and inserts it at `depth`.
#[derive(Debug, Clone, Deserialize)]
struct ImportFrom {
    from_scene: String,
    layer: usize,
    depth: usize,
}

async fn apply_edit(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<serde_json::Value>,
) -> ApiResult<Json<SceneView>> {
    let op: EditOp = if body.get("from_scene").is_some() {
        let req: ImportFrom =
            serde_json::from_value(body).map_err(|e| ApiError::bad_request(format!("invalid import edit: {e}")))?;
        let source = state.record(&req.from_scene).await?;
        let source = source.read().await;
        let layer = source.current.scene.layers.get(req.layer).ok_or_else(|| {
            ApiError::bad_request(format!("scene {} has no layer {}", req.from_scene, req.layer))
        })?;
        EditOp::Import {
            layer: ImportedLayer::from_layer(layer),
            depth: req.depth,
        }
    } else {
        serde_json::from_value(body).map_err(|e| ApiError::bad_request(format!("invalid edit: {e}")))?
    };
    let rec = state.record(&id).await?;
    let mut rec = rec.write().await;
    let mut next = rec.clone();
    next.apply(op)?;
    state.persist(&next)?;
    *rec = next;
    Ok(Json(SceneView::of(&rec)))
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RenderRequest {
    #[serde(default)]
    layout: Option<Layout>,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RenderQuery {
    #[serde(default)]
    format: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderResponse {
    pub image: GridPayload,
    pub layout: Layout,
    pub elapsed_ms: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Png,
    Grid,
}

fn render_format(query: &RenderQuery, headers: &HeaderMap) -> ApiResult<Format> {
    if let Some(f) = &query.format {
        return match f.as_str() {
            "json" => Ok(Format::Json),
            "png" => Ok(Format::Png),
            "grid" => Ok(Format::Grid),
            other => Err(ApiError::bad_request(format!("unknown format {other:?} (json, png, grid)"))),
        };
    }
    let accept = headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).unwrap_or("");
    Ok(if accept.contains("image/png") {
        Format::Png
    } else if accept.contains("application/octet-stream") {
        Format::Grid
    } else {
        Format::Json
    })
}

async fn render_scene(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(query): Query<RenderQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let format = render_format(&query, &headers)?;
    let req: RenderRequest = optional_body(&body)?;
    let cp = state.record(&id).await?.read().await.current.clone();
    let layout = req.layout.unwrap_or_else(|| cp.scene.current_layout());
    let started = Instant::now();
    let (grid, layout) = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || state.pipeline().render(&cp, &layout).map(|g| (g, layout)))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??
    };
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(match format {
        Format::Json => Json(RenderResponse {
            image: GridPayload::from(&grid),
            layout,
            elapsed_ms,
        })
        .into_response(),
        Format::Png => ([(header::CONTENT_TYPE, "image/png")], encode_png(&grid, TONEMAP)?).into_response(),
        Format::Grid => ([(header::CONTENT_TYPE, "application/octet-stream")], encode_grid(&grid)).into_response(),
    })
}

async fn upload_anchor(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(upload): ApiJson<AnchorUpload>,
) -> ApiResult<Json<SceneView>> {
    let rec = state.record(&id).await?;
    let mut rec = rec.write().await;
    let image = upload.image.to_grid()?;
    let scene = &rec.current.scene;
    image.check_shape(scene.shape)?;
    scene.check_layout(&upload.layout)?;
    state
        .pipeline()
        .anchor(&Grid::zeros(scene.shape), upload.layout.clone(), upload.weight, scene.seed)?;
    let mut next = rec.clone();
    next.anchor = Some(upload);
    next.touch();
    state.persist(&next)?;
    *rec = next;
    Ok(Json(SceneView::of(&rec)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub scene: String,
    pub state: JobState,
    /// Joint diffusion steps finished so far.
    pub completed: usize,
    pub total: usize,
    pub elapsed_ms: f64,
    pub error: Option<ErrorBody>,
}

fn update_job(state: &AppState, id: &str, f: impl FnOnce(&mut JobStatus)) {
    if let Some(job) = state.0.jobs.lock().unwrap().get_mut(id) {
        f(job);
    }
}

async fn start_optimize(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    Ok((StatusCode::ACCEPTED, Json(spawn_optimize(&state, &id).await?)))
}

/// Queues a re-optimization of the scene's current spec.
async fn spawn_optimize(state: &AppState, scene_id: &str) -> ApiResult<JobStatus> {
    let rec = state.record(scene_id).await?;
    let snap = {
        let r = rec.read().await;
        Snapshot {
            spec: r.current.scene.spec(),
            anchor: r.anchor.clone(),
            global_prompt: r.current.global_prompt.clone(),
            revision: r.revision,
        }
    };
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    {
        let mut busy = state.0.busy.lock().unwrap();
        if let Some(running) = busy.get(scene_id) {
            return Err(ApiError::conflict(
                "job_running",
                format!("scene {scene_id} is already being optimized by job {running}"),
            ));
        }
        busy.insert(scene_id.to_string(), job_id.clone());
    }
    let p = state.pipeline();
    let total = p.schedule.steps() - p.config.sampler.tau.min(p.schedule.steps());
    let job = JobStatus {
        id: job_id.clone(),
        scene: scene_id.to_string(),
        state: JobState::Queued,
        completed: 0,
        total,
        elapsed_ms: 0.0,
        error: None,
    };
    state.0.jobs.lock().unwrap().insert(job_id.clone(), job.clone());
    let state = state.clone();
    let scene_id = scene_id.to_string();
    tokio::spawn(async move {
        let result = run_optimize(&state, &rec, &job_id, snap).await;
        state.0.busy.lock().unwrap().remove(&scene_id);
        update_job(&state, &job_id, |j| match result {
            Ok(()) => j.state = JobState::Succeeded,
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e.body);
            }
        });
    });
    Ok(job)
}

/// What a job optimizes, captured when the job is requested.
struct Snapshot {
    spec: SceneSpec,
    anchor: Option<AnchorUpload>,
    global_prompt: Option<ConditionToken>,
    revision: u64,
}

async fn run_optimize(state: &AppState, rec: &Shared<SceneRecord>, job_id: &str, snap: Snapshot) -> ApiResult<()> {
    let _permit = state
        .0
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let Snapshot {
        spec,
        anchor,
        global_prompt,
        revision,
    } = snap;
    update_job(state, job_id, |j| j.state = JobState::Running);
    let started = Instant::now();
    let cp = {
        let state = state.clone();
        let job_id = job_id.to_string();
        tokio::task::spawn_blocking(move || -> layerscene::Result<SceneCheckpoint> {
            let p = state.pipeline();
            let anchor = anchor
                .map(|a| p.anchor(&a.image.to_grid()?, a.layout, a.weight, spec.seed))
                .transpose()?;
            p.optimize_with(&spec, anchor.as_ref(), &mut |_, _| {
                update_job(&state, &job_id, |j| {
                    j.completed += 1;
                    j.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
                })
            })
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??
    };
    let mut r = rec.write().await;
    if r.revision != revision {
        return Err(ApiError::conflict("scene_changed", "the scene was edited while it was being optimized"));
    }
    if !state.0.scenes.read().await.contains_key(&r.id) {
        return Err(ApiError::not_found("scene", &r.id));
    }
    let mut next = r.clone();
    next.rebase(SceneCheckpoint { global_prompt, ..cp });
    state.persist(&next)?;
    *r = next;
    update_job(state, job_id, |j| j.elapsed_ms = started.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    state
        .0
        .jobs
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("job", &id))
}

fn default_data_range() -> f64 {
    TONEMAP.high - TONEMAP.low
}

/// Two images with single-channel masks locating the same layer.
#[derive(Debug, Clone, Deserialize)]
pub struct RawPair {
    #[serde(default)]
    pub name: String,
    pub image_a: GridPayload,
    pub mask_a: GridPayload,
    pub image_b: GridPayload,
    pub mask_b: GridPayload,
    #[serde(default)]
    pub delta: Option<Offset>,
    #[serde(default)]
    pub target: Option<GridPayload>,
    #[serde(default = "default_data_range")]
    pub data_range: f64,
}

/// One layer of a stored scene rendered at two layouts.
#[derive(Debug, Clone, Deserialize)]
pub struct ScenePair {
    #[serde(default)]
    pub name: Option<String>,
    pub scene: String,
    pub layer: usize,
    pub layout_a: Layout,
    pub layout_b: Layout,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct MetricsRequest {
    #[serde(default)]
    pub pairs: Vec<RawPair>,
    #[serde(default)]
    pub scenes: Vec<ScenePair>,
}

fn raw_pair(p: RawPair) -> layerscene::Result<EvalPair> {
    Ok(EvalPair {
        name: p.name,
        image_a: p.image_a.to_grid()?,
        mask_a: Mask::from_plane(p.mask_a.to_grid()?)?,
        image_b: p.image_b.to_grid()?,
        mask_b: Mask::from_plane(p.mask_b.to_grid()?)?,
        delta: p.delta,
        target: p.target.map(|t| t.to_grid().and_then(Mask::from_plane)).transpose()?,
        data_range: p.data_range,
    })
}

/// Visible region of layer `k` at `layout`, and the region it was asked to cover.
fn layer_masks(cp: &SceneCheckpoint, k: usize, layout: &Layout) -> layerscene::Result<(Mask, Mask)> {
    let alphas = compute_alpha(&cp.scene, layout, BlendMode::Binary)?;
    let visible = alphas[k].map(|a| if a > 0.5 { 1.0 } else { 0.0 });
    let requested = cp.scene.layers[k].mask.shifted(layout.offsets[k]).map(|a| if a > 0.5 { 1.0 } else { 0.0 });
    Ok((Mask::from_plane(visible)?, Mask::from_plane(requested)?))
}

fn scene_pair(p: &Pipeline, cp: &SceneCheckpoint, pair: &ScenePair) -> layerscene::Result<EvalPair> {
    if pair.layer >= cp.scene.len() {
        return Err(layerscene::Error::Parameter(format!("scene has no layer {}", pair.layer)));
    }
    let (mask_a, target) = layer_masks(cp, pair.layer, &pair.layout_a)?;
    let (mask_b, _) = layer_masks(cp, pair.layer, &pair.layout_b)?;
    Ok(EvalPair {
        name: pair.name.clone().unwrap_or_else(|| format!("{}/{}", pair.scene, pair.layer)),
        image_a: p.render(cp, &pair.layout_a)?,
        mask_a,
        image_b: p.render(cp, &pair.layout_b)?,
        mask_b,
        delta: Some(pair.layout_b.offsets[pair.layer] - pair.layout_a.offsets[pair.layer]),
        target: Some(target),
        data_range: default_data_range(),
    })
}

async fn metrics(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<MetricsRequest>,
) -> ApiResult<Json<MetricsReport>> {
    if req.pairs.is_empty() && req.scenes.is_empty() {
        return Err(ApiError::bad_request("no pairs to evaluate"));
    }
    let mut scenes = Vec::with_capacity(req.scenes.len());
    for pair in req.scenes {
        let cp = state.record(&pair.scene).await?.read().await.current.clone();
        scenes.push((cp, pair));
    }
    let worker = state.clone();
    let report = tokio::task::spawn_blocking(move || -> layerscene::Result<MetricsReport> {
        let mut pairs = req.pairs.into_iter().map(raw_pair).collect::<layerscene::Result<Vec<_>>>()?;
        for (cp, pair) in &scenes {
            pairs.push(scene_pair(worker.pipeline(), cp, pair)?);
        }
        evaluate(&pairs)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(report))
}
