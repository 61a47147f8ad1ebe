use afn_cli::config::EnvConfig;
use afn_cli::serve::{router, AppState, ServeRun};
use afn_core::games::{Board, BoardGame, BoardGameSpec};
use afn_core::model::{AdamConfig, AnyModel, TabularModel};
use afn_core::selfplay::{TbTrainer, TrainConfig};
use afn_core::solver::{MoveQuality, Solver};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn service() -> Router {
    router(AppState::new(&ServeRun::default()).unwrap())
}

fn actions(v: &Value) -> Vec<u64> {
    v["legal_actions"].as_array().unwrap().iter().map(|a| a.as_u64().unwrap()).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn new_sessions_start_empty() {
    let app = service();
    let (st, v) = call(&app, "POST", "/api/sessions", Some(json!({}))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(v["status"], "active");
    let id = v["id"].as_str().unwrap().to_string();
    let (st, v) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(actions(&v).len(), 9);
    assert!(v["cells"].as_array().unwrap().iter().all(|c| c == 0));
    assert_eq!(v["to_move"], 1);

    let env = json!({ "kind": "connect", "rows": 5, "cols": 4, "win_length": 3 });
    let (st, v) = call(&app, "POST", "/api/sessions", Some(json!({ "env": env }))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(actions(&v), [0, 1, 2, 3]);
    assert_eq!(v["legal_mask"].as_array().unwrap().len(), 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn agent_moves_first_when_human_is_second() {
    let app = service();
    let (_, v) = call(&app, "POST", "/api/sessions", Some(json!({ "human_side": 2, "agent": "perfect" }))).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 1);
    assert_eq!(v["to_move"], 2);
    let p = &v["last_policy"]["probs"];
    let total: f64 = p.as_object().unwrap().values().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[tokio::test(flavor = "multi_thread")]
async fn illegal_moves_leave_the_session_unchanged() {
    let app = service();
    let (_, v) = call(&app, "POST", "/api/sessions", Some(json!({ "agent": "search:2" }))).await;
    let id = v["id"].as_str().unwrap().to_string();
    let moves = format!("/api/sessions/{id}/moves");
    let (st, after) = call(&app, "POST", &moves, Some(json!({ "action": 4 }))).await;
    assert_eq!(st, StatusCode::OK);
    let (_, before) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(before, after);
    // occupied cell
    let (st, e) = call(&app, "POST", &moves, Some(json!({ "action": 4 }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"]["code"], "illegal_move");
    assert_eq!(e["error"]["legal_mask"].as_array().unwrap().len(), 9);
    // off the board
    let (st, _) = call(&app, "POST", &moves, Some(json!({ "action": 40 }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, now) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(now, before);
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_sessions_and_agents() {
    let app = service();
    let (st, e) = call(&app, "GET", "/api/sessions/999", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(e["error"]["code"], "not_found");
    let (st, _) = call(&app, "POST", "/api/sessions/999/moves", Some(json!({ "action": 0 }))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, e) = call(&app, "POST", "/api/sessions", Some(json!({ "agent": "nobody" }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"]["code"], "unknown_agent");
    let (st, _) = call(&app, "POST", "/api/sessions", Some(json!({ "human_side": 3 }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, e) = call(&app, "POST", "/api/sessions", Some(json!({ "colour": 1 }))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"]["code"], "invalid_request");
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_games_accept_no_moves() {
    let app = service();
    let (_, v) = call(&app, "POST", "/api/sessions", Some(json!({ "agent": "perfect" }))).await;
    let id = v["id"].as_str().unwrap().to_string();
    let mut v = v;
    while v["status"] == "active" {
        let a = actions(&v)[0];
        v = call(&app, "POST", &format!("/api/sessions/{id}/moves"), Some(json!({ "action": a }))).await.1;
    }
    assert!(v["to_move"].is_null());
    assert!(actions(&v).is_empty());
    let (st, e) = call(&app, "POST", &format!("/api/sessions/{id}/moves"), Some(json!({ "action": 0 }))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(e["error"]["code"], "game_over");
    // the perfect agent never loses
    assert_ne!(v["status"], "p1_win");
}

#[tokio::test(flavor = "multi_thread")]
async fn reads_are_idempotent_and_listed() {
    let app = service();
    for _ in 0..3 {
        call(&app, "POST", "/api/sessions", None).await;
    }
    let (_, a) = call(&app, "GET", "/api/sessions/2", None).await;
    let (_, b) = call(&app, "GET", "/api/sessions/2", None).await;
    assert_eq!(a, b);
    let (st, list) = call(&app, "GET", "/api/sessions", None).await;
    assert_eq!(st, StatusCode::OK);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["1", "2", "3"]);
    let (st, c) = call(&app, "GET", "/api/checkpoints", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(c["checkpoints"].as_array().unwrap().is_empty());
    assert_eq!(c["builtin"].as_array().unwrap().len(), 3);
}

fn trained_model(g: &BoardGame) -> AnyModel {
    let cfg = TrainConfig {
        lambda: 10.0,
        batch_size: 512,
        trajectories_per_epoch: 2048,
        steps_per_epoch: 100,
        epochs: 30,
        eval_games: 0,
        uniform_side_fraction: 0.5,
        adam: AdamConfig { lr: 0.05, ..Default::default() },
        ..Default::default()
    };
    let model = AnyModel::Tabular(TabularModel::new(9, cfg.adam));
    let mut t = TbTrainer::new(g, cfg, model).unwrap();
    t.run(&mut |_| {}).unwrap();
    t.model().clone()
}

// A human plays random moves until one of them throws away the value of
// the position; the agent's answer is then scored by the solver.
#[tokio::test(flavor = "multi_thread")]
async fn trained_agent_punishes_blunders() {
    let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
    let model = trained_model(&g);
    let app = router(AppState::with_model(&ServeRun::default(), "ttt", EnvConfig::TicTacToe, model).unwrap());
    let (_, c) = call(&app, "GET", "/api/checkpoints", None).await;
    assert_eq!(c["checkpoints"][0]["id"], "ttt");

    let mut solver = Solver::new(g.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sessions, mut optimal) = (0, 0);
    while sessions < 200 {
        let side = rng.gen_range(1..=2);
        let (_, mut v) = call(&app, "POST", "/api/sessions", Some(json!({ "agent": "ttt", "human_side": side }))).await;
        let id = v["id"].as_str().unwrap().to_string();
        while v["status"] == "active" {
            let board = g.board_from_moves(&moves_string(&v)).unwrap();
            let legal = actions(&v);
            let a = legal[rng.gen_range(0..legal.len())] as usize;
            let blunder = solver.classify(&board, a) == Some(MoveQuality::Blunder);
            v = call(&app, "POST", &format!("/api/sessions/{id}/moves"), Some(json!({ "action": a }))).await.1;
            let history = v["history"].as_array().unwrap();
            if blunder && history.len() > board_len(&board) + 1 {
                let after = g.play(&board, a);
                let reply = history[board_len(&board) + 1].as_u64().unwrap() as usize;
                sessions += 1;
                optimal += usize::from(solver.classify(&after, reply) == Some(MoveQuality::Optimal));
                break;
            }
        }
    }
    let rate = optimal as f64 / sessions as f64;
    assert!(rate >= 0.8, "{rate}");
}

fn moves_string(v: &Value) -> String {
    v["history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| char::from_digit(a.as_u64().unwrap() as u32, 36).unwrap())
        .collect()
}

fn board_len(b: &Board) -> usize {
    (b.stones[0].count_ones() + b.stones[1].count_ones()) as usize
}
