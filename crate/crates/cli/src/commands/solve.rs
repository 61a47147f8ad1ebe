use std::io::Write;
use std::path::{Path, PathBuf};

use afn_core::solver::{moves_to_string, Solved, Solver};
use serde::{Deserialize, Serialize};

use super::Common;
use crate::config::{self, default_version, EnvConfig};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    /// Node budget per position; unlimited when absent.
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default)]
    pub positions: Vec<String>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// One solved position. `value` and `plies` are from the side to move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub position: String,
    #[serde(flatten)]
    pub solved: Solved,
    /// Every move that keeps the optimal value and distance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_moves: Option<String>,
}

/// Reads a corpus file: one move string per line. Blank lines and `#`
/// comments are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn solve_positions(run: &SolveRun, positions: &[String]) -> Result<Vec<SolveRecord>, CliError> {
    let game = run.env.build_board()?;
    let mut solver = Solver::new(game.clone());
    if let Some(b) = run.budget {
        solver = solver.with_budget(b);
    }
    let mut out = Vec::with_capacity(positions.len());
    for p in positions {
        let board = game
            .board_from_moves(p)
            .map_err(|e| CliError { key: Some("positions".into()), ..CliError::new("position", format!("{p:?}: {e}")) })?;
        let solved = solver.solve(&board);
        let optimal_moves = match (solved, game.outcome(&board)) {
            (Solved::Solved(_), None) => solver.optimal_moves(&board).map(|m| moves_to_string(&m)),
            _ => None,
        };
        out.push(SolveRecord { position: p.clone(), solved, optimal_moves });
    }
    Ok(out)
}

pub fn run(common: &Common, args: &[String], corpus: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let run: SolveRun = config::load(common.config.as_deref(), &common.overrides())?;
    let mut positions = run.positions.clone();
    positions.extend(args.iter().cloned());
    if let Some(c) = corpus {
        positions.extend(read_corpus(c)?);
    }
    if positions.is_empty() {
        return Err(CliError::config("positions", "no positions given"));
    }
    let records = solve_positions(&run, &positions)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    if let Some(dir) = &run.out_dir {
        config::write_resolved(dir, &run)?;
        let path = dir.join("solutions.jsonl");
        std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    }
    out.write_all(text.as_bytes()).map_err(|e| CliError::new("io", e.to_string()))
}
