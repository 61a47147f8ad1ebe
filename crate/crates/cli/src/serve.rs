//! HTTP play service: a human plays a board game against an agent.
//!
//! Routes:
//! - `POST /api/sessions` creates a session, `GET /api/sessions` lists them
//! - `GET /api/sessions/{id}` returns the session state
//! - `POST /api/sessions/{id}/moves` plays `{"action": n}`; the agent replies
//! - `GET /api/checkpoints` lists loaded checkpoints and built-in agents

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use afn_core::env::{Action, Outcome, TreeEnv};
use afn_core::eval::{Agent, ModelAgent};
use afn_core::games::{BoardGame, BoardState};
use afn_core::model::AnyModel;
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agents::{AgentKind, AgentSpec};
use crate::checkpoint::{Checkpoint, TrainerState};
use crate::commands::Common;
use crate::config::{self, default_version, EnvConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeRun {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Checkpoint files to offer.
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    /// Directory scanned for `*.json` and `*/checkpoint.json`.
    #[serde(default)]
    pub checkpoints_dir: Option<PathBuf>,
    /// Game for sessions that name neither a game nor a checkpoint.
    #[serde(default = "default_env")]
    pub env: EnvConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_port() -> u16 {
    8080
}
fn default_env() -> EnvConfig {
    EnvConfig::TicTacToe
}

impl Default for ServeRun {
    fn default() -> Self {
        ServeRun {
            version: default_version(),
            host: default_host(),
            port: default_port(),
            checkpoints: Vec::new(),
            checkpoints_dir: None,
            env: default_env(),
            out_dir: None,
        }
    }
}

/// Built-in opponents offered next to the checkpoints.
pub const BUILTIN_AGENTS: [&str; 3] = ["uniform", "perfect", "search:4"];

struct LoadedCheckpoint {
    env: EnvConfig,
    model: Arc<AnyModel>,
    step: u64,
    path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    /// Ply at which the agent moved.
    pub ply: usize,
    pub action: Action,
    /// Probabilities over the legal actions at that ply.
    pub probs: BTreeMap<Action, f64>,
}

struct Session {
    id: String,
    env: EnvConfig,
    game: BoardGame,
    state: BoardState,
    human_side: u8,
    agent_id: String,
    agent: Box<dyn Agent<BoardGame>>,
    rng: ChaCha8Rng,
    policies: Vec<PolicySnapshot>,
}

/// What clients see of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub env: EnvConfig,
    pub rows: usize,
    pub cols: usize,
    pub gravity: bool,
    /// Row-major cells, row 0 first: 0 empty, 1 or 2 for the owner.
    pub cells: Vec<u8>,
    pub history: Vec<Action>,
    pub human_side: u8,
    /// Side to move, absent once the game is over.
    pub to_move: Option<u8>,
    pub status: String,
    pub legal_actions: Vec<Action>,
    pub legal_mask: Vec<bool>,
    pub agent: String,
    pub last_policy: Option<PolicySnapshot>,
    pub policies: Vec<PolicySnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub env: EnvConfig,
    pub agent: String,
    pub status: String,
    pub plies: usize,
}

fn status(o: Option<Outcome>) -> &'static str {
    match o {
        None => "active",
        Some(Outcome::P1Win) => "p1_win",
        Some(Outcome::P2Win) => "p2_win",
        Some(Outcome::Draw) => "draw",
    }
}

impl Session {
    fn view(&self) -> SessionView {
        let spec = *self.game.spec();
        let b = &self.state.board;
        let cells = (0..spec.cells())
            .map(|i| {
                if b.stones[0] >> i & 1 == 1 {
                    1
                } else if b.stones[1] >> i & 1 == 1 {
                    2
                } else {
                    0
                }
            })
            .collect();
        let mask = self.game.legal_actions(&self.state);
        SessionView {
            id: self.id.clone(),
            env: self.env.clone(),
            rows: spec.rows,
            cols: spec.cols,
            gravity: spec.gravity,
            cells,
            history: self.state.history.iter().map(|&a| a as Action).collect(),
            human_side: self.human_side,
            to_move: self.state.outcome.is_none().then(|| b.to_move()),
            status: status(self.state.outcome).into(),
            legal_actions: mask.iter().collect(),
            legal_mask: (0..mask.width()).map(|a| mask.contains(a)).collect(),
            agent: self.agent_id.clone(),
            last_policy: self.policies.last().cloned(),
            policies: self.policies.clone(),
        }
    }

    fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            env: self.env.clone(),
            agent: self.agent_id.clone(),
            status: status(self.state.outcome).into(),
            plies: self.state.history.len(),
        }
    }

    /// Lets the agent move while it is its turn.
    fn agent_turns(&mut self) -> Result<(), ApiError> {
        while self.state.outcome.is_none() && self.state.board.to_move() != self.human_side {
            let legal = self.game.legal_actions(&self.state);
            let raw = self.agent.policy(&self.game, &self.state);
            let action = self
                .agent
                .act(&self.game, &self.state, &mut self.rng)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "agent_failed", e.to_string()))?;
            if !legal.contains(action) {
                return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "agent_failed", "agent chose an illegal move"));
            }
            let mut probs: BTreeMap<Action, f64> = match raw {
                Some(p) => legal.iter().map(|a| (a, p.get(a).copied().unwrap_or(0.0))).collect(),
                None => legal.iter().map(|a| (a, if a == action { 1.0 } else { 0.0 })).collect(),
            };
            let total: f64 = probs.values().sum();
            if total > 0.0 && total.is_finite() {
                probs.values_mut().for_each(|p| *p /= total);
            }
            self.policies.push(PolicySnapshot { ply: self.state.history.len(), action, probs });
            self.state = self.game.apply(&self.state, action);
        }
        Ok(())
    }
}

/// Shared service state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    default_env: EnvConfig,
    checkpoints: BTreeMap<String, LoadedCheckpoint>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

fn checkpoint_id(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "checkpoint" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn scan_dir(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            let c = p.join("checkpoint.json");
            if c.is_file() {
                out.push(c);
            }
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl AppState {
    pub fn new(run: &ServeRun) -> Result<Self, CliError> {
        let mut paths = run.checkpoints.clone();
        if let Some(dir) = &run.checkpoints_dir {
            paths.extend(scan_dir(dir)?);
        }
        let mut checkpoints = BTreeMap::new();
        for p in paths {
            let c = Checkpoint::load(&p)?;
            let Some(model) = c.policy_model() else {
                eprintln!("{}", json!({ "warning": "checkpoint holds no policy model", "path": p }));
                continue;
            };
            if c.env.board_spec().is_none() {
                eprintln!("{}", json!({ "warning": "checkpoint is not a board game", "path": p }));
                continue;
            }
            let step = c.step();
            let id = checkpoint_id(&p);
            if checkpoints.contains_key(&id) {
                return Err(CliError::config("checkpoints", &format!("two checkpoints share the id {id:?}")));
            }
            checkpoints.insert(id, LoadedCheckpoint { env: c.env, model, step, path: p });
        }
        if run.env.board_spec().is_none() {
            return Err(CliError::config("env", "the play service needs a board game"));
        }
        Ok(AppState {
            inner: Arc::new(Inner {
                default_env: run.env.clone(),
                checkpoints,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        })
    }

    /// Registers an in-memory model under `id`, as if loaded from disk.
    pub fn with_model(run: &ServeRun, id: &str, env: EnvConfig, model: AnyModel) -> Result<Self, CliError> {
        let mut s = Self::new(run)?;
        let inner = Arc::get_mut(&mut s.inner).expect("fresh state");
        inner.checkpoints.insert(
            id.into(),
            LoadedCheckpoint { env, model: Arc::new(model), step: 0, path: PathBuf::new() },
        );
        Ok(s)
    }
}

/// A JSON error response: `{"error": {"code", "message", ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "code": code, "message": message.into() }) }
    }

    fn with(mut self, key: &str, value: serde_json::Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = if e.code == "config" { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::INTERNAL_SERVER_ERROR };
        ApiError { status, body: serde_json::to_value(&e).unwrap_or_default() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Board game; defaults to the checkpoint's game or the service default.
    #[serde(default)]
    pub env: Option<EnvConfig>,
    /// Side the human plays, 1 (moves first) or 2.
    #[serde(default)]
    pub human_side: Option<u8>,
    /// Checkpoint id or built-in agent spec.
    #[serde(default)]
    pub agent: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveRequest {
    pub action: Action,
}

fn unprocessable(code: &str, message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
}

fn create_session(app: &AppState, req: CreateSession) -> Result<SessionView, ApiError> {
    let inner = &app.inner;
    let agent_id = match req.agent {
        Some(a) => a,
        None => inner.checkpoints.keys().next().cloned().unwrap_or_else(|| "uniform".into()),
    };
    let human_side = req.human_side.unwrap_or(1);
    if human_side != 1 && human_side != 2 {
        return Err(unprocessable("invalid_request", "human_side must be 1 or 2"));
    }
    let ckpt = inner.checkpoints.get(&agent_id);
    let env = match (req.env, ckpt) {
        (Some(e), _) => e,
        (None, Some(c)) => c.env.clone(),
        (None, None) => inner.default_env.clone(),
    };
    if env.board_spec().is_none() {
        return Err(unprocessable("invalid_request", "sessions need a board game"));
    }
    let game = env.build_board()?;
    let agent: Box<dyn Agent<BoardGame>> = match ckpt {
        Some(c) => {
            if c.env.board_spec() != env.board_spec() {
                return Err(unprocessable("invalid_request", format!("checkpoint {agent_id:?} plays another game")));
            }
            Box::new(ModelAgent::greedy(&agent_id, c.model.clone()))
        }
        None => {
            let spec = AgentSpec::parse(&agent_id).map_err(|_| {
                unprocessable("unknown_agent", format!("no checkpoint or built-in agent named {agent_id:?}"))
            })?;
            if matches!(spec.kind, AgentKind::Checkpoint(_)) {
                return Err(unprocessable("unknown_agent", "load checkpoints when starting the service"));
            }
            spec.build(&game)?
        }
    };
    let n = inner.next_id.fetch_add(1, Ordering::Relaxed);
    let id = n.to_string();
    let mut session = Session {
        id: id.clone(),
        state: game.root(),
        env,
        game,
        human_side,
        agent_id,
        agent,
        rng: ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(n)),
        policies: Vec::new(),
    };
    session.agent_turns()?;
    let view = session.view();
    inner.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(session)));
    Ok(view)
}

fn session(app: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    app.inner
        .sessions
        .lock()
        .unwrap()
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id:?}")))
}

fn play_move(s: &mut Session, action: Action) -> Result<SessionView, ApiError> {
    if s.state.outcome.is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, "game_over", format!("the game ended: {}", status(s.state.outcome))));
    }
    if s.state.board.to_move() != s.human_side {
        return Err(ApiError::new(StatusCode::CONFLICT, "not_your_turn", "the agent is to move"));
    }
    let mask = s.game.legal_actions(&s.state);
    if action >= mask.width() || !mask.contains(action) {
        let legal: Vec<Action> = mask.iter().collect();
        let bits: Vec<bool> = (0..mask.width()).map(|a| mask.contains(a)).collect();
        return Err(unprocessable("illegal_move", format!("action {action} is not legal"))
            .with("legal_actions", json!(legal))
            .with("legal_mask", json!(bits)));
    }
    s.state = s.game.apply(&s.state, action);
    s.agent_turns()?;
    Ok(s.view())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

// An empty body means all defaults.
async fn post_session(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| unprocessable("invalid_request", e.to_string()))?
    };
    let view = blocking(move || create_session(&app, req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionSummary>> {
    let all: Vec<Arc<Mutex<Session>>> = app.inner.sessions.lock().unwrap().values().cloned().collect();
    let mut out: Vec<SessionSummary> = all.iter().map(|s| s.lock().unwrap().summary()).collect();
    out.sort_by_key(|s| s.id.parse::<u64>().unwrap_or(u64::MAX));
    Json(out)
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let s = session(&app, &id)?;
    let view = s.lock().unwrap().view();
    Ok(Json(view))
}

async fn post_move(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<MoveRequest>,
) -> Result<Json<SessionView>, ApiError> {
    let s = session(&app, &id)?;
    let view = blocking(move || play_move(&mut s.lock().unwrap(), req.action)).await?;
    Ok(Json(view))
}

async fn list_checkpoints(State(app): State<AppState>) -> Json<serde_json::Value> {
    let list: Vec<serde_json::Value> = app
        .inner
        .checkpoints
        .iter()
        .map(|(id, c)| json!({ "id": id, "env": c.env, "step": c.step, "path": c.path }))
        .collect();
    Json(json!({ "checkpoints": list, "builtin": BUILTIN_AGENTS }))
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(post_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/moves", post(post_move))
        .route("/api/checkpoints", get(list_checkpoints))
        .with_state(app)
}

pub fn run(common: &Common) -> Result<(), CliError> {
    let run: ServeRun = config::load(common.config.as_deref(), &common.overrides())?;
    if let Some(dir) = &run.out_dir {
        config::write_resolved(dir, &run)?;
    }
    let app = AppState::new(&run)?;
    let addr = format!("{}:{}", run.host, run.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("serve", e.to_string()))?;
    rt.block_on(async {
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::new("serve", format!("{addr}: {e}")))?;
        eprintln!("{}", json!({ "listening": addr, "checkpoints": app.inner.checkpoints.keys().collect::<Vec<_>>() }));
        axum::serve(listener, router(app)).await.map_err(|e| CliError::new("serve", e.to_string()))
    })
}

/// Turns a checkpoint file into a `(id, env, model)` triple, for embedding.
pub fn load_policy(path: &Path) -> Result<(String, EnvConfig, AnyModel), CliError> {
    let c = Checkpoint::load(path)?;
    match c.trainer {
        TrainerState::Tb(s) => Ok((checkpoint_id(path), c.env, s.model)),
        TrainerState::Tree(_) => Err(CliError::config("checkpoints", "checkpoint holds no policy model")),
    }
}
