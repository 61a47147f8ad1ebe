use std::path::PathBuf;

use afn_core::eval::{fit_elo, run_tournament as play_round_robin, write_records_csv, EloTable, MatchRecord};
use afn_core::games::{Board, BoardGame, BoardState};
use afn_core::solver::{classify_moves, expected_quality, random_corpus, uniform_optimal_rate, Solver};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::solve::read_corpus;
use super::{default_out, Common};
use crate::agents::{AgentKind, AgentSpec};
use crate::config::{self, default_version, EnvConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TournamentRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    /// Agent specs; see [`AgentSpec`].
    pub agents: Vec<String>,
    #[serde(default = "default_games")]
    pub games_per_pair: usize,
    #[serde(default)]
    pub seed: u64,
    /// Agent pinned at rating 0.
    #[serde(default = "default_anchor")]
    pub anchor: String,
    /// Virtual games added to every pair, a third each won by either side
    /// and drawn. Keeps ratings finite when one side wins every game.
    #[serde(default)]
    pub prior_games: f64,
    #[serde(default = "tournament_out")]
    pub out_dir: PathBuf,
}

fn default_games() -> usize {
    100
}
fn default_anchor() -> String {
    "uniform".into()
}
fn tournament_out() -> PathBuf {
    default_out("tournament")
}

#[derive(Debug, Clone, Serialize)]
pub struct TournamentSummary {
    pub matches: PathBuf,
    pub elo: PathBuf,
    pub games: usize,
    pub table: EloTable,
}

fn build_agents(specs: &[String], game: &BoardGame) -> Result<Vec<Box<dyn afn_core::eval::Agent<BoardGame>>>, CliError> {
    let parsed: Vec<AgentSpec> = specs.iter().map(|s| AgentSpec::parse(s)).collect::<Result<_, _>>()?;
    for (i, a) in parsed.iter().enumerate() {
        if parsed[..i].iter().any(|b| b.name == a.name) {
            return Err(CliError::config("agents", &format!("duplicate agent name {:?}", a.name)));
        }
    }
    parsed.iter().map(|s| s.build(game)).collect()
}

pub fn tournament(run: &TournamentRun) -> Result<(Vec<MatchRecord>, EloTable), CliError> {
    if run.games_per_pair == 0 || run.games_per_pair % 2 == 1 {
        return Err(CliError::config("games_per_pair", "must be a positive even number so colors balance"));
    }
    let game = run.env.build_board()?;
    let mut agents = build_agents(&run.agents, &game)?;
    let records = play_round_robin(&game, &mut agents, run.games_per_pair, run.seed)?;
    let table = fit_elo(&records, &run.anchor, run.prior_games)?;
    Ok((records, table))
}

pub fn run_tournament(common: &Common) -> Result<TournamentSummary, CliError> {
    let run: TournamentRun = config::load(common.config.as_deref(), &common.overrides())?;
    config::write_resolved(&run.out_dir, &run)?;
    let (records, table) = tournament(&run)?;
    let matches = run.out_dir.join("matches.csv");
    let f = std::fs::File::create(&matches).map_err(|e| CliError::io(&matches, e))?;
    write_records_csv(&records, f)?;
    let elo = run.out_dir.join("elo.csv");
    let f = std::fs::File::create(&elo).map_err(|e| CliError::io(&elo, e))?;
    table.write_csv(f)?;
    Ok(TournamentSummary { matches, elo, games: records.len(), table })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    #[serde(default = "default_anchor")]
    pub agent: String,
    /// Random positions to score when no corpus file is given.
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    /// File of move strings, one position per line.
    #[serde(default)]
    pub corpus_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_corpus_size() -> usize {
    10240
}

#[derive(Debug, Clone, Serialize)]
pub struct QualitySummary {
    pub agent: String,
    pub positions: usize,
    pub scored: usize,
    pub optimal_rate: f64,
    pub inaccuracy_rate: f64,
    pub blunder_rate: f64,
    /// Expected optimal rate of a uniformly random mover on the same corpus.
    pub uniform_baseline: f64,
    /// True when rates are expectations under the agent's move
    /// distribution rather than counts of its chosen moves.
    pub expected: bool,
}

pub fn corpus(run: &QualityRun, game: &BoardGame) -> Result<Vec<Board>, CliError> {
    match &run.corpus_file {
        Some(p) => read_corpus(p)?
            .iter()
            .map(|m| game.board_from_moves(m).map_err(|e| CliError::config("corpus_file", &format!("{m:?}: {e}"))))
            .collect(),
        None => Ok(random_corpus(game, run.corpus_size, &mut ChaCha8Rng::seed_from_u64(run.seed))),
    }
}

pub fn quality(run: &QualityRun) -> Result<QualitySummary, CliError> {
    let game = run.env.build_board()?;
    let spec = AgentSpec::parse(&run.agent)?;
    let boards = corpus(run, &game)?;
    let mut solver = Solver::new(game.clone());
    let uniform_baseline = uniform_optimal_rate(&mut solver, &boards);
    if spec.kind == AgentKind::Uniform {
        let q = expected_quality(&mut solver, &boards, |b| {
            let m = game.legal_moves(b);
            let p = 1.0 / m.count() as f64;
            m.iter().map(|a| (a, p)).collect()
        });
        return Ok(QualitySummary {
            agent: spec.name,
            positions: q.positions,
            scored: q.scored,
            optimal_rate: q.optimal,
            inaccuracy_rate: q.inaccuracy,
            blunder_rate: q.blunder,
            uniform_baseline,
            expected: true,
        });
    }
    let mut agent = spec.build(&game)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut failure = None;
    let report = classify_moves(&mut solver, &boards, |b| {
        let s = BoardState { board: *b, history: Vec::new(), outcome: None };
        match agent.act(&game, &s, &mut rng) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                game.legal_moves(b).iter().next().unwrap_or(0)
            }
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(QualitySummary {
        agent: spec.name,
        positions: report.positions,
        scored: report.scored(),
        optimal_rate: report.optimal_rate(),
        inaccuracy_rate: report.inaccuracy_rate(),
        blunder_rate: report.blunder_rate(),
        uniform_baseline,
        expected: false,
    })
}

pub fn run_quality(common: &Common) -> Result<QualitySummary, CliError> {
    let run: QualityRun = config::load(common.config.as_deref(), &common.overrides())?;
    let summary = quality(&run)?;
    if let Some(dir) = &run.out_dir {
        config::write_resolved(dir, &run)?;
        let path = dir.join("quality.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(summary)
}
