use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use afn_core::env::Owner;
use afn_core::exact::{
    afn_edb_residual, branch_product_residual, check_product_flow, check_prop5, edb_residuals, solve_afn,
    solve_eflow, solve_gfn, tb_constant_check, tree_log_rewards, ExactError, FlowTable, DEFAULT_STRATEGY_LIMIT,
};
use afn_core::objectives::RewardScheme;
use afn_core::tree::ExpandedTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_out, Common};
use crate::config::{self, default_version, EnvConfig};
use crate::{with_env, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solution {
    /// Joint flows of every player (two-player games).
    #[default]
    Afn,
    /// One agent against the environment; other players count as uniform
    /// environment states.
    Eflow,
    /// Flow matching on a deterministic single-agent tree.
    Gfn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    #[serde(default)]
    pub solution: Solution,
    /// Defaults to branch-adjusted outcome rewards for games and stored
    /// rewards otherwise.
    #[serde(default)]
    pub reward: Option<RewardScheme>,
    #[serde(default = "one_f")]
    pub lambda: f64,
    #[serde(default = "one_u8")]
    pub agent: u8,
    #[serde(default = "exact_out")]
    pub out_dir: PathBuf,
}

fn one_f() -> f64 {
    1.0
}
fn one_u8() -> u8 {
    1
}
fn exact_out() -> PathBuf {
    default_out("exact")
}

#[derive(Debug, Clone, Serialize)]
pub struct ExactSummary {
    pub flows: PathBuf,
    pub nodes: usize,
    pub players: Vec<u8>,
    /// Root log-flow per player.
    pub root_log_flow: Vec<f64>,
    pub seconds: f64,
}

fn default_scheme(tree: &ExpandedTree, lambda: f64) -> RewardScheme {
    let outcome = tree.terminals().next().is_some_and(|t| matches!(tree.terminal(t), Some(afn_core::env::Terminal::Outcome(_))));
    if outcome {
        RewardScheme::BranchAdjusted { lambda }
    } else {
        RewardScheme::Direct
    }
}

pub fn solve_tree(tree: &ExpandedTree, run: &ExactRun) -> Result<FlowTable, CliError> {
    let scheme = run.reward.unwrap_or_else(|| default_scheme(tree, run.lambda));
    let r = tree_log_rewards(tree, scheme)?;
    let agent_rewards = || {
        r.get(run.agent as usize - 1)
            .ok_or_else(|| CliError::config("agent", &format!("the environment has {} players", r.len())))
    };
    Ok(match run.solution {
        Solution::Afn => solve_afn(tree, &r)?,
        Solution::Eflow => solve_eflow(tree, agent_rewards()?, run.agent)?,
        Solution::Gfn => solve_gfn(tree, agent_rewards()?)?,
    })
}

pub fn run_exact(common: &Common) -> Result<ExactSummary, CliError> {
    let run: ExactRun = config::load(common.config.as_deref(), &common.overrides())?;
    if run.agent == 0 {
        return Err(CliError::config("agent", "players are numbered from 1"));
    }
    config::write_resolved(&run.out_dir, &run)?;
    let start = Instant::now();
    let env = run.env.build()?;
    let tree = with_env!(&env, |e| ExpandedTree::build(e))?;
    let table = solve_tree(&tree, &run)?;
    let path = run.out_dir.join("flows.jsonl");
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    table.write_jsonl(&tree, BufWriter::new(file)).map_err(|e| CliError::io(&path, e))?;
    Ok(ExactSummary {
        flows: path,
        nodes: tree.len(),
        players: table.players().to_vec(),
        root_log_flow: table.players().iter().map(|&p| table.log_flow(p, 0)).collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    /// Reward temperatures checked on two-player games.
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Tolerance on the trajectory-balance constant.
    #[serde(default = "default_tb_tolerance")]
    pub tb_tolerance: f64,
    #[serde(default = "default_trajectories")]
    pub tb_trajectories: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_limit")]
    pub strategy_limit: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0, 10.0]
}
fn default_tolerance() -> f64 {
    1e-10
}
fn default_tb_tolerance() -> f64 {
    1e-8
}
fn default_trajectories() -> usize {
    1000
}
fn default_limit() -> usize {
    DEFAULT_STRATEGY_LIMIT
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub nodes: usize,
    pub checks: Vec<Check>,
    /// Checks that could not run, with the reason.
    pub skipped: Vec<String>,
    pub max_edb_residual: f64,
    pub passed: bool,
    pub seconds: f64,
}

struct Checks {
    list: Vec<Check>,
}

impl Checks {
    fn add(&mut self, name: &str, lambda: Option<f64>, value: f64, tolerance: f64) {
        let pass = value <= tolerance;
        self.list.push(Check { name: name.into(), lambda, value, tolerance, pass });
    }
}

pub fn run_verify(common: &Common) -> Result<VerifyReport, CliError> {
    let run: VerifyRun = config::load(common.config.as_deref(), &common.overrides())?;
    if let Some(dir) = &run.out_dir {
        config::write_resolved(dir, &run)?;
    }
    let report = verify(&run)?;
    if let Some(dir) = &run.out_dir {
        let path = dir.join("verify.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(report)
}

fn all_finite(table: &FlowTable) -> f64 {
    let bad = table.players().iter().any(|&p| table.log_flows(p).iter().any(|x| !x.is_finite()));
    if bad {
        f64::INFINITY
    } else {
        0.0
    }
}

pub fn verify(run: &VerifyRun) -> Result<VerifyReport, CliError> {
    let start = Instant::now();
    let env = run.env.build()?;
    let tree = with_env!(&env, |e| ExpandedTree::build(e))?;
    let mut checks = Checks { list: Vec::new() };
    let mut skipped = Vec::new();
    let mut max_edb: f64 = 0.0;
    let tol = run.tolerance;

    if tree.num_players() == 2 && tree.is_alternating() {
        for &lambda in &run.lambdas {
            let r = tree_log_rewards(&tree, RewardScheme::BranchAdjusted { lambda })?;
            let table = solve_afn(&tree, &r)?;
            let edb = afn_edb_residual(&tree, &table, &r).max();
            max_edb = max_edb.max(edb);
            checks.add("edb_residual", Some(lambda), edb, tol);
            checks.add("positive_flows", Some(lambda), all_finite(&table), 0.0);
            checks.add("product_flow_matching", Some(lambda), check_product_flow(&tree, &table, &r), tol);
            checks.add("branch_product_identity", Some(lambda), branch_product_residual(&tree, &table), tol);
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let tb = tb_constant_check(&tree, table.edge_log_probs(), lambda, run.tb_trajectories, &mut rng)?;
            checks.add("tb_constant", Some(lambda), tb.max_deviation_from(table.log_flow(1, 0)), run.tb_tolerance);
        }
    } else {
        let r = tree_log_rewards(&tree, default_scheme(&tree, 1.0))?;
        for agent in 1..=tree.num_players() as u8 {
            let rewards = &r[agent as usize - 1];
            let table = solve_eflow(&tree, rewards, agent)?;
            let edb = edb_residuals(&tree, table.log_flows(agent), table.edge_log_probs(), agent, rewards).max();
            max_edb = max_edb.max(edb);
            checks.add("edb_residual", None, edb, tol);
            checks.add("positive_flows", None, all_finite(&table), 0.0);
        }
        let agent_nodes = (0..tree.len()).any(|n| tree.owner(n) == Some(Owner::Player(1)));
        if tree.num_players() == 1 && agent_nodes {
            match check_prop5(&tree, &r[0], run.strategy_limit) {
                Ok(v) => checks.add("strategy_expectation", None, v, tol),
                Err(e @ ExactError::TooManyStrategies { .. }) => skipped.push(format!("strategy_expectation: {e}")),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let passed = checks.list.iter().all(|c| c.pass);
    Ok(VerifyReport {
        nodes: tree.len(),
        checks: checks.list,
        skipped,
        max_edb_residual: max_edb,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}
