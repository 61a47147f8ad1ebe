//! Environment specs, config files and `--set key=value` overrides.

use std::path::Path;

use afn_core::games::{
    make_fig1a_tree, random_toy_tree, BoardGame, BoardGameSpec, SequenceEnv, SequenceEnvSpec, ToyStochasticTree,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Config files carry this schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    TicTacToe,
    ConnectFour,
    /// Connect-k with gravity.
    Connect { rows: usize, cols: usize, win_length: usize },
    Board { rows: usize, cols: usize, win_length: usize, gravity: bool },
    Sequence {
        length: usize,
        alphabet: usize,
        alpha: f64,
        beta: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<Vec<f64>>>,
    },
    /// The two-step stochastic tree where a stochastic GFlowNet fails.
    Fig1a,
    RandomTree { seed: u64, depth: usize, max_branch: usize, env_fraction: f64 },
}

impl EnvConfig {
    pub fn board_spec(&self) -> Option<BoardGameSpec> {
        match *self {
            EnvConfig::TicTacToe => Some(BoardGameSpec::tic_tac_toe()),
            EnvConfig::ConnectFour => Some(BoardGameSpec::connect_four()),
            EnvConfig::Connect { rows, cols, win_length } => Some(BoardGameSpec::connect_k(rows, cols, win_length)),
            EnvConfig::Board { rows, cols, win_length, gravity } => {
                Some(BoardGameSpec { rows, cols, win_length, gravity })
            }
            _ => None,
        }
    }

    pub fn build(&self) -> Result<AnyEnv, CliError> {
        if let Some(spec) = self.board_spec() {
            return Ok(AnyEnv::Board(BoardGame::new(spec)?));
        }
        match self {
            EnvConfig::Sequence { length, alphabet, alpha, beta, seed, weights } => {
                let spec = SequenceEnvSpec {
                    length: *length,
                    alphabet: *alphabet,
                    alpha: *alpha,
                    beta: *beta,
                    weights: weights.clone(),
                    seed: *seed,
                };
                Ok(AnyEnv::Sequence(SequenceEnv::new(spec)?))
            }
            EnvConfig::Fig1a => Ok(AnyEnv::Toy(make_fig1a_tree())),
            EnvConfig::RandomTree { seed, depth, max_branch, env_fraction } => {
                Ok(AnyEnv::Toy(random_toy_tree(*seed, *depth, *max_branch, *env_fraction)))
            }
            _ => unreachable!("board specs handled above"),
        }
    }

    pub fn build_board(&self) -> Result<BoardGame, CliError> {
        match self.build()? {
            AnyEnv::Board(g) => Ok(g),
            _ => Err(CliError::config("env", "this command needs a board game")),
        }
    }
}

pub enum AnyEnv {
    Board(BoardGame),
    Sequence(SequenceEnv),
    Toy(ToyStochasticTree),
}

/// Runs `$body` with `$e` bound to the concrete environment.
#[macro_export]
macro_rules! with_env {
    ($env:expr, |$e:ident| $body:expr) => {
        match $env {
            $crate::config::AnyEnv::Board($e) => $body,
            $crate::config::AnyEnv::Sequence($e) => $body,
            $crate::config::AnyEnv::Toy($e) => $body,
        }
    };
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Applies `a.b.c=value` to a table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "overrides look like key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::config(key, &format!("`{p}` is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(value.trim()));
    Ok(())
}

/// Reads an optional TOML file, applies overrides in order, and decodes.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            text.parse::<toml::Table>().map_err(|e| CliError::config(&p.display().to_string(), &e.to_string()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(v) = table.get("version") {
        if v.as_integer() != Some(SCHEMA_VERSION as i64) {
            return Err(CliError::config("version", &format!("unsupported schema version {v}")));
        }
    }
    T::deserialize(toml::Value::Table(table)).map_err(|e| CliError::config(&schema_key(&e), e.message()))
}

// best effort at naming the offending key
fn schema_key(e: &toml::de::Error) -> String {
    let m = e.message();
    match m.find('`') {
        Some(i) => m[i + 1..].split('`').next().unwrap_or("config").to_string(),
        None => "config".to_string(),
    }
}

/// Writes the resolved config next to a command's outputs.
pub fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::new("config", e.to_string()))?;
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn default_version() -> u32 {
    SCHEMA_VERSION
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        env: EnvConfig,
        #[serde(default)]
        n: usize,
    }

    #[test]
    fn overrides_build_nested_tables() {
        let d: Demo = load(None, &["env.kind=connect".into(), "env.rows=4".into(), "env.cols=5".into(), "env.win_length=3".into(), "n=7".into()]).unwrap();
        assert_eq!(d.env, EnvConfig::Connect { rows: 4, cols: 5, win_length: 3 });
        assert_eq!(d.n, 7);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = load::<Demo>(None, &["env.kind=tic_tac_toe".into(), "bogus=1".into()]).unwrap_err();
        assert_eq!(e.code, "config");
        assert!(e.key.as_deref() == Some("bogus"), "{e:?}");
    }
}
