//! HTTP labeling service. Each round publishes the selected samples as
//! tasks in ranking order, collects one label per task, then retrains in the
//! background and opens the next round.
//!
//! All pool mutations and round transitions go through one [`Session`]
//! behind a mutex. Training runs on a blocking thread over a snapshot of the
//! pools and hands the finished networks back in one step.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use crtcl_core::active::{ActiveLearner, SelectionResult};
use crtcl_core::data::{Normalization, SampleId, SamplePools};
use crtcl_core::eval::evaluate;
use crtcl_core::formats::quantize;
use crtcl_core::models::{CriticNet, GeneratorNet, ImageShape};
use crtcl_core::trainer::TrainLog;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::error::{Error, Result};
use crate::report::{RankedSample, SelectionRecord};
use crate::run::Prepared;

/// Version carried by every payload as `v`.
pub const API_VERSION: u32 = 1;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Retraining; no round is open.
    Training,
    /// A round is open and accepting labels.
    Open,
    /// The configured number of cycles is done or `D_U` is empty.
    Finished,
    /// The last training job failed; see `error`.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cycle: usize,
    pub n_labeled: usize,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub v: u32,
    /// Completed rounds.
    pub cycle: usize,
    pub phase: Phase,
    pub training: bool,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    /// Open tasks still waiting for a label.
    pub pending: usize,
    pub budget: usize,
    pub last_eval: Option<EvalSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub v: u32,
    pub task_id: u64,
    pub sample_id: SampleId,
    pub cycle: usize,
    /// Position in the round's ranking, 0 first.
    pub rank: usize,
    /// Lossless PNG, base64 encoded.
    pub image_png: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Selector score `p_u`; lower means more likely misclassified.
    pub score: f64,
    /// `sigmoid(score)` for display.
    pub display_score: f64,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub task_id: u64,
    pub class_index: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub v: u32,
    /// Machine-readable code, e.g. `no_open_round` or `duplicate_label`.
    pub error: String,
    pub message: String,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionView {
    pub v: u32,
    pub rounds: Vec<SelectionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl Rejection {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Task {
    id: u64,
    sample: SampleId,
    score: f64,
    label: Option<usize>,
}

#[derive(Debug, Clone)]
struct Round {
    cycle: usize,
    tasks: Vec<Task>,
}

impl Round {
    fn pending(&self) -> usize {
        self.tasks.iter().filter(|t| t.label.is_none()).count()
    }
}

/// Retraining work detached from the session.
#[derive(Debug, Clone)]
pub struct RetrainJob {
    learner: ActiveLearner,
    pools: SamplePools,
}

pub type RetrainOutput = crtcl_core::Result<(GeneratorNet, CriticNet, TrainLog)>;

impl RetrainJob {
    pub fn run(self) -> RetrainOutput {
        self.learner.retrain(&self.pools)
    }
}

/// The service's single state owner.
#[derive(Debug)]
pub struct Session {
    pools: SamplePools,
    normalization: Normalization,
    learner: ActiveLearner,
    models: Option<(GeneratorNet, CriticNet)>,
    round: Option<Round>,
    phase: Phase,
    last_eval: Option<EvalSummary>,
    error: Option<String>,
    next_task: u64,
    class_names: Vec<String>,
    selections: Vec<SelectionRecord>,
}

fn class_names(dataset: &DatasetSpec, classes: usize) -> Vec<String> {
    match dataset {
        DatasetSpec::Cifar10(_) => CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        DatasetSpec::Mnist(_) => (0..classes).map(|i| i.to_string()).collect(),
        DatasetSpec::Synthetic(_) => (0..classes).map(|i| format!("class {i}")).collect(),
    }
}

impl Session {
    /// Loads the dataset and seeds `D_L`; the first training job comes from
    /// [`Session::start_training`].
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let prepared = Prepared::load(cfg)?;
        let al = cfg.active.clone().normalized();
        let pools = prepared.seeded(al.initial_k, cfg.seed)?;
        let channels = pools.shape().channels;
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!(
                "dataset: the labeling service shows 1- or 3-channel images, got {channels}"
            )));
        }
        let gen_cfg = cfg.model.generator(pools.shape(), pools.classes());
        let learner = ActiveLearner::new(gen_cfg, cfg.train.clone(), al, cfg.seed)?;
        Ok(Self {
            class_names: class_names(&cfg.dataset, pools.classes()),
            pools,
            normalization: prepared.normalization,
            learner,
            models: None,
            round: None,
            phase: Phase::Training,
            last_eval: None,
            error: None,
            next_task: 0,
            selections: Vec::new(),
        })
    }

    pub fn pools(&self) -> &SamplePools {
        &self.pools
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn selections(&self) -> &[SelectionRecord] {
        &self.selections
    }

    pub fn start_training(&mut self) -> RetrainJob {
        self.phase = Phase::Training;
        self.round = None;
        RetrainJob {
            learner: self.learner.clone(),
            pools: self.pools.clone(),
        }
    }

    /// Installs the result of a training job: evaluate, then open the next
    /// round unless the run is over.
    pub fn finish_training(&mut self, result: RetrainOutput) {
        if let Err(e) = self.try_finish(result) {
            self.phase = Phase::Failed;
            self.error = Some(e.to_string());
        }
    }

    fn try_finish(&mut self, result: RetrainOutput) -> crtcl_core::Result<()> {
        let (gen, critic, _) = result?;
        let al = self.learner.config().clone();
        let eval = evaluate(&gen, &self.pools, al.ece_bins)?;
        self.last_eval = Some(EvalSummary {
            cycle: self.learner.cycle(),
            n_labeled: self.pools.labeled().len(),
            accuracy: eval.accuracy,
            ece: eval.ece,
        });
        self.error = None;
        let selection = if self.learner.cycle() < al.cycles {
            self.learner.select(&gen, &critic, &self.pools)?
        } else {
            SelectionResult::default()
        };
        self.models = Some((gen, critic));
        if selection.chosen.is_empty() {
            self.phase = Phase::Finished;
            return Ok(());
        }
        self.open_round(selection, al.selector);
        Ok(())
    }

    fn open_round(&mut self, selection: SelectionResult, selector: crtcl_core::active::Selector) {
        let score: std::collections::BTreeMap<SampleId, f64> = selection.ranked.iter().copied().collect();
        let tasks: Vec<Task> = selection
            .chosen
            .iter()
            .map(|&sample| {
                let id = self.next_task;
                self.next_task += 1;
                Task {
                    id,
                    sample,
                    score: score.get(&sample).copied().unwrap_or(f64::NAN),
                    label: None,
                }
            })
            .collect();
        let cycle = self.learner.cycle();
        self.selections.push(SelectionRecord {
            cycle,
            selector,
            candidates: selection.ranked.len(),
            chosen: tasks
                .iter()
                .map(|t| RankedSample {
                    sample_id: t.sample,
                    score: t.score,
                })
                .collect(),
            labels: Vec::new(),
        });
        self.round = Some(Round { cycle, tasks });
        self.phase = Phase::Open;
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            v: API_VERSION,
            cycle: self.learner.cycle(),
            phase: self.phase,
            training: self.phase == Phase::Training,
            labeled: self.pools.labeled().len(),
            unlabeled: self.pools.unlabeled().len(),
            test: self.pools.test().len(),
            pending: self.round.as_ref().map_or(0, Round::pending),
            budget: self.learner.config().budget,
            last_eval: self.last_eval.clone(),
            error: self.error.clone(),
        }
    }

    fn no_round(&self) -> Rejection {
        let why = match self.phase {
            Phase::Training => "retraining is in progress",
            Phase::Finished => "the run is finished",
            Phase::Failed => "the last training job failed",
            Phase::Open => "no round is open",
        };
        Rejection::new(StatusCode::CONFLICT, "no_open_round", why)
    }

    /// Open tasks in ranking order, at most `limit`.
    pub fn tasks(&self, limit: Option<usize>) -> Result<Vec<LabelTask>, Rejection> {
        let round = self.round.as_ref().filter(|_| self.phase == Phase::Open).ok_or_else(|| self.no_round())?;
        let shape = self.pools.shape();
        round
            .tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.label.is_none())
            .take(limit.unwrap_or(usize::MAX))
            .map(|(rank, t)| {
                let sample = self.pools.sample(t.sample).expect("task samples are in the store");
                let png = encode_png(&self.normalization.invert(&sample.image), shape).map_err(|e| {
                    Rejection::new(StatusCode::INTERNAL_SERVER_ERROR, "image_encoding", e.to_string())
                })?;
                Ok(LabelTask {
                    v: API_VERSION,
                    task_id: t.id,
                    sample_id: t.sample,
                    cycle: round.cycle,
                    rank,
                    image_png: base64::engine::general_purpose::STANDARD.encode(png),
                    width: shape.width,
                    height: shape.height,
                    channels: shape.channels,
                    score: t.score,
                    display_score: sigmoid(t.score),
                    class_names: self.class_names.clone(),
                })
            })
            .collect()
    }

    /// Applies one label. Returns the retraining job when it completes the
    /// round.
    pub fn submit(&mut self, task_id: u64, class_index: i64) -> Result<Option<RetrainJob>, Rejection> {
        if task_id >= self.next_task {
            return Err(Rejection::new(
                StatusCode::NOT_FOUND,
                "unknown_task",
                format!("task {task_id} does not exist"),
            ));
        }
        let open = self.phase == Phase::Open;
        let Some(round) = self.round.as_mut().filter(|_| open) else {
            return Err(self.no_round());
        };
        let classes = self.pools.classes();
        let Some(task) = round.tasks.iter_mut().find(|t| t.id == task_id) else {
            return Err(Rejection::new(
                StatusCode::CONFLICT,
                "round_closed",
                format!("task {task_id} belongs to a closed round"),
            ));
        };
        if class_index < 0 || class_index as usize >= classes {
            return Err(Rejection::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "class_out_of_range",
                format!("class_index {class_index} is outside 0..{classes}"),
            ));
        }
        if task.label.is_some() {
            return Err(Rejection::new(
                StatusCode::CONFLICT,
                "duplicate_label",
                format!("task {task_id} is already labeled"),
            ));
        }
        let label = class_index as usize;
        self.pools
            .reveal(task.sample, label)
            .map_err(|e| Rejection::new(StatusCode::CONFLICT, "pool_rejected", e.to_string()))?;
        task.label = Some(label);
        if round.pending() > 0 {
            return Ok(None);
        }
        if let Some(record) = self.selections.last_mut() {
            record.labels = round.tasks.iter().filter_map(|t| t.label).collect();
        }
        let (gen, critic) = self.models.clone().expect("an open round has trained models");
        self.learner.complete_cycle(gen, critic);
        Ok(Some(self.start_training()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// 8-bit PNG from a `(C, H, W)` image in `[0, 1]`; one channel is
/// grayscale, three are RGB.
pub fn encode_png(chw: &[f64], shape: ImageShape) -> Result<Vec<u8>> {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Config(format!("cannot encode a {c}-channel image as PNG"))),
    };
    let plane = h * w;
    let mut data = vec![0u8; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            data[p * c + ch] = quantize(chw[ch * plane + p]);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&data)?;
    }
    Ok(out)
}

pub type Shared = Arc<Mutex<Session>>;

fn lock(session: &Shared) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Runs `job` on a blocking thread and installs its result.
pub fn spawn_retrain(session: &Shared, job: RetrainJob) {
    let session = Arc::clone(session);
    tokio::task::spawn_blocking(move || {
        let result = job.run();
        lock(&session).finish_training(result);
    });
}

/// Kicks off the first training job of a fresh session.
pub fn start(session: &Shared) {
    let job = lock(session).start_training();
    spawn_retrain(session, job);
}

fn reject(session: &Session, r: Rejection) -> Response {
    let body = ApiError {
        v: API_VERSION,
        error: r.code.to_string(),
        message: r.message,
        state: session.state(),
    };
    (r.status, Json(body)).into_response()
}

#[derive(Debug, Deserialize)]
struct TasksQuery {
    limit: Option<usize>,
}

async fn get_tasks(State(session): State<Shared>, Query(q): Query<TasksQuery>) -> Response {
    let s = lock(&session);
    match s.tasks(q.limit) {
        Ok(tasks) => Json(tasks).into_response(),
        Err(r) => reject(&s, r),
    }
}

async fn post_label(State(session): State<Shared>, Json(req): Json<LabelRequest>) -> Response {
    let mut s = lock(&session);
    match s.submit(req.task_id, req.class_index) {
        Ok(job) => {
            let state = s.state();
            drop(s);
            if let Some(job) = job {
                spawn_retrain(&session, job);
            }
            Json(state).into_response()
        }
        Err(r) => reject(&s, r),
    }
}

async fn get_status(State(session): State<Shared>) -> Json<SessionState> {
    Json(lock(&session).state())
}

async fn get_selection(State(session): State<Shared>) -> Json<SelectionView> {
    Json(SelectionView {
        v: API_VERSION,
        rounds: lock(&session).selections().to_vec(),
    })
}

pub fn router(session: Shared) -> Router {
    Router::new()
        .route("/api/tasks", get(get_tasks))
        .route("/api/labels", post(post_label))
        .route("/api/status", get(get_status))
        .route("/api/selection", get(get_selection))
        .with_state(session)
}

/// Builds the session, trains the first model in the background and serves
/// until Ctrl-C.
pub async fn serve(cfg: ExperimentConfig, addr: SocketAddr) -> Result<()> {
    let session = tokio::task::spawn_blocking(move || Session::new(&cfg))
        .await
        .expect("session setup panicked")?;
    let session: Shared = Arc::new(Mutex::new(session));
    start(&session);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("bind {addr}"), e))?;
    eprintln!("labeling service listening on http://{addr}");
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(format!("serve {addr}"), e))
}
