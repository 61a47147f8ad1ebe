//! Ground-truth flows by backward induction over the history tree, and
//! numerical checks of the properties the exact solutions must satisfy.
//!
//! All flows are kept in log space. Nodes are processed in reverse
//! breadth-first order, so no recursion is involved.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Owner, StateKey, Terminal};
use crate::games::{Board, BoardGame};
use crate::objectives::{ObjectiveError, RewardScheme};
use crate::tree::{ExpandedTree, TreeError};
use crate::util::logsumexp;

/// Strategy enumeration refuses more strategies than this.
pub const DEFAULT_STRATEGY_LIMIT: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("reward at node {node} is not strictly positive")]
    NonPositiveReward { node: usize },
    #[error("{count} environment strategies exceed the limit of {limit}")]
    TooManyStrategies { count: f64, limit: usize },
    #[error("subtree of {count} paths exceeds the limit of {limit}")]
    SubtreeTooLarge { count: usize, limit: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

/// Order in which children are aggregated; the solution must not depend on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChildOrder {
    #[default]
    Forward,
    Reverse,
}

fn ordered(range: std::ops::Range<usize>, order: ChildOrder) -> Box<dyn Iterator<Item = usize>> {
    match order {
        ChildOrder::Forward => Box::new(range),
        ChildOrder::Reverse => Box::new(range.rev()),
    }
}

/// Per-player log state flows plus the joint forward policy they induce.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    players: Vec<u8>,
    log_flows: Vec<Vec<f64>>,
    // log-probability of entering each node from its parent; 0 at the root
    edge_log_prob: Vec<f64>,
}

impl FlowTable {
    pub fn players(&self) -> &[u8] {
        &self.players
    }

    fn row(&self, player: u8) -> usize {
        self.players.iter().position(|&p| p == player).unwrap_or_else(|| panic!("no flows for player {player}"))
    }

    pub fn log_flows(&self, player: u8) -> &[f64] {
        &self.log_flows[self.row(player)]
    }

    pub fn log_flow(&self, player: u8, node: usize) -> f64 {
        self.log_flows[self.row(player)][node]
    }

    pub fn edge_log_probs(&self) -> &[f64] {
        &self.edge_log_prob
    }

    pub fn edge_log_prob(&self, node: usize) -> f64 {
        self.edge_log_prob[node]
    }

    /// Forward-policy probabilities over the children of `node`.
    pub fn policy(&self, tree: &ExpandedTree, node: usize) -> Vec<f64> {
        tree.children(node).map(|c| self.edge_log_prob[c].exp()).collect()
    }

    /// Scales one flow value; used to construct violations in tests.
    pub fn perturb(&mut self, player: u8, node: usize, log_delta: f64) {
        let r = self.row(player);
        self.log_flows[r][node] += log_delta;
    }

    /// Line-delimited records `{"state": ..., "log_flow": [...]}`.
    pub fn write_jsonl<W: Write>(&self, tree: &ExpandedTree, mut w: W) -> io::Result<()> {
        for node in 0..tree.len() {
            let rec = FlowRecord {
                state: tree.key(node),
                log_flow: self.log_flows.iter().map(|row| row[node]).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub state: StateKey,
    pub log_flow: Vec<f64>,
}

/// Per-player log-rewards at every node (NaN at nonterminals).
pub fn tree_log_rewards(tree: &ExpandedTree, scheme: RewardScheme) -> Result<Vec<Vec<f64>>, ExactError> {
    let lb = tree.log_branch_factors();
    let mut out = vec![vec![f64::NAN; tree.len()]; tree.num_players()];
    let mut branch = vec![0.0; tree.num_players()];
    for node in tree.terminals() {
        for (i, b) in branch.iter_mut().enumerate() {
            *b = lb[i][node];
        }
        let t = tree.terminal(node).expect("terminal payoff");
        let r = scheme.log_rewards(t, &branch)?;
        for (i, row) in out.iter_mut().enumerate() {
            row[node] = r[i];
        }
    }
    Ok(out)
}

fn check_reward(log_r: f64, node: usize) -> Result<f64, ExactError> {
    if log_r.is_finite() {
        Ok(log_r)
    } else {
        Err(ExactError::NonPositiveReward { node })
    }
}

/// Flow matching on a deterministic single-agent tree: `F(x) = R(x)` and
/// `F(s)` is the sum of its children's flows.
pub fn solve_gfn(tree: &ExpandedTree, log_rewards: &[f64]) -> Result<FlowTable, ExactError> {
    if tree.num_players() != 1 || tree.has_env_states() {
        return Err(ExactError::Precondition("flow matching needs a deterministic single-agent tree".into()));
    }
    let mut f = vec![0.0; tree.len()];
    for node in (0..tree.len()).rev() {
        f[node] = if tree.is_terminal(node) {
            check_reward(log_rewards[node], node)?
        } else {
            logsumexp(tree.children(node).map(|c| f[c]))
        };
    }
    let mut edge = vec![0.0; tree.len()];
    for node in 1..tree.len() {
        edge[node] = f[node] - f[tree.parent(node).unwrap()];
    }
    Ok(FlowTable { players: vec![1], log_flows: vec![f], edge_log_prob: edge })
}

/// Unique EDB solution for `agent`: sums at agent states, expectations at
/// environment states. States of other players count as environment states
/// with a uniform policy.
pub fn solve_eflow(tree: &ExpandedTree, log_rewards: &[f64], agent: u8) -> Result<FlowTable, ExactError> {
    solve_eflow_ordered(tree, log_rewards, agent, ChildOrder::Forward)
}

pub fn solve_eflow_ordered(
    tree: &ExpandedTree,
    log_rewards: &[f64],
    agent: u8,
    order: ChildOrder,
) -> Result<FlowTable, ExactError> {
    let me = Owner::Player(agent);
    let mut f = vec![0.0; tree.len()];
    for node in (0..tree.len()).rev() {
        f[node] = match tree.owner(node) {
            None => check_reward(log_rewards[node], node)?,
            Some(o) if o == me => logsumexp(ordered(tree.children(node), order).map(|c| f[c])),
            Some(Owner::Env) => logsumexp(ordered(tree.children(node), order).map(|c| f[c] + tree.log_env_prob(c))),
            Some(Owner::Player(_)) => {
                let ln = (tree.num_children(node) as f64).ln();
                logsumexp(ordered(tree.children(node), order).map(|c| f[c])) - ln
            }
        };
    }
    let mut edge = vec![0.0; tree.len()];
    for node in 1..tree.len() {
        let p = tree.parent(node).unwrap();
        edge[node] = match tree.owner(p) {
            Some(o) if o == me => f[node] - f[p],
            Some(Owner::Env) => tree.log_env_prob(node),
            _ => -(tree.num_children(p) as f64).ln(),
        };
    }
    Ok(FlowTable { players: vec![agent], log_flows: vec![f], edge_log_prob: edge })
}

/// Jointly optimal flows of an n-player AFlowNet: each player sums over its
/// own children and takes the mover's flow-weighted average elsewhere.
/// Environment states, if any, use their expectation.
pub fn solve_afn(tree: &ExpandedTree, log_rewards: &[Vec<f64>]) -> Result<FlowTable, ExactError> {
    solve_afn_ordered(tree, log_rewards, ChildOrder::Forward)
}

pub fn solve_afn_ordered(
    tree: &ExpandedTree,
    log_rewards: &[Vec<f64>],
    order: ChildOrder,
) -> Result<FlowTable, ExactError> {
    let n = tree.num_players();
    if log_rewards.len() != n {
        return Err(ExactError::Precondition(format!("{} reward rows for {n} players", log_rewards.len())));
    }
    let mut f = vec![vec![0.0; tree.len()]; n];
    for node in (0..tree.len()).rev() {
        match tree.owner(node) {
            None => {
                for i in 0..n {
                    f[i][node] = check_reward(log_rewards[i][node], node)?;
                }
            }
            Some(Owner::Env) => {
                for fi in f.iter_mut() {
                    fi[node] = logsumexp(ordered(tree.children(node), order).map(|c| fi[c] + tree.log_env_prob(c)));
                }
            }
            Some(Owner::Player(p)) => {
                let j = p as usize - 1;
                let mover_total = logsumexp(ordered(tree.children(node), order).map(|c| f[j][c]));
                for i in 0..n {
                    f[i][node] = if i == j {
                        mover_total
                    } else {
                        logsumexp(ordered(tree.children(node), order).map(|c| f[i][c] + f[j][c])) - mover_total
                    };
                }
            }
        }
    }
    let mut edge = vec![0.0; tree.len()];
    for node in 1..tree.len() {
        let p = tree.parent(node).unwrap();
        edge[node] = match tree.owner(p) {
            Some(Owner::Player(q)) => f[q as usize - 1][node] - f[q as usize - 1][p],
            _ => tree.log_env_prob(node),
        };
    }
    Ok(FlowTable { players: (1..=n as u8).collect(), log_flows: f, edge_log_prob: edge })
}

/// Largest violation of each EDB constraint family, in log space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EdbResidual {
    pub agent_edge: f64,
    pub env_state: f64,
    pub terminal: f64,
}

impl EdbResidual {
    pub fn max(&self) -> f64 {
        self.agent_edge.max(self.env_state).max(self.terminal)
    }

    fn merge(self, o: EdbResidual) -> EdbResidual {
        EdbResidual {
            agent_edge: self.agent_edge.max(o.agent_edge),
            env_state: self.env_state.max(o.env_state),
            terminal: self.terminal.max(o.terminal),
        }
    }
}

/// EDB residuals of `agent`'s flows, where every state not owned by the
/// agent is an environment state whose transition is `edge_log_prob`.
pub fn edb_residuals(
    tree: &ExpandedTree,
    log_flow: &[f64],
    edge_log_prob: &[f64],
    agent: u8,
    log_rewards: &[f64],
) -> EdbResidual {
    let mut r = EdbResidual::default();
    for node in 0..tree.len() {
        match tree.owner(node) {
            None => r.terminal = r.terminal.max((log_flow[node] - log_rewards[node]).abs()),
            Some(Owner::Player(p)) if p == agent => {
                for c in tree.children(node) {
                    r.agent_edge = r.agent_edge.max((log_flow[node] + edge_log_prob[c] - log_flow[c]).abs());
                }
            }
            Some(_) => {
                let e = logsumexp(tree.children(node).map(|c| edge_log_prob[c] + log_flow[c]));
                r.env_state = r.env_state.max((log_flow[node] - e).abs());
            }
        }
    }
    r
}

/// EDB residuals of every player's EFlowNet against the others' policies.
pub fn afn_edb_residual(tree: &ExpandedTree, table: &FlowTable, log_rewards: &[Vec<f64>]) -> EdbResidual {
    table.players().iter().fold(EdbResidual::default(), |acc, &p| {
        acc.merge(edb_residuals(tree, table.log_flows(p), table.edge_log_probs(), p, &log_rewards[p as usize - 1]))
    })
}

/// Flow-matching residual of `F1 * F2` against the reward `R1 * R2`.
pub fn check_product_flow(tree: &ExpandedTree, table: &FlowTable, log_rewards: &[Vec<f64>]) -> f64 {
    let (f1, f2) = (table.log_flows(1), table.log_flows(2));
    let mut worst: f64 = 0.0;
    for node in 0..tree.len() {
        let lhs = f1[node] + f2[node];
        let rhs = if tree.is_terminal(node) {
            log_rewards[0][node] + log_rewards[1][node]
        } else {
            logsumexp(tree.children(node).map(|c| f1[c] + f2[c]))
        };
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

/// Largest `|log(F1 F2 B1 B2)|`; zero at the optimum for branch-adjusted
/// zero-sum rewards.
pub fn branch_product_residual(tree: &ExpandedTree, table: &FlowTable) -> f64 {
    let lb = tree.log_branch_factors();
    let (f1, f2) = (table.log_flows(1), table.log_flows(2));
    (0..tree.len()).map(|n| (f1[n] + f2[n] + lb[0][n] + lb[1][n]).abs()).fold(0.0, f64::max)
}

/// Trajectory-balance constant estimated from sampled trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TbConstant {
    /// Mean of `log Z̄(τ)` over the samples.
    pub log_z: f64,
    /// Largest `|log Z̄(τ) - log_z|`.
    pub max_deviation: f64,
    pub samples: Vec<f64>,
}

impl TbConstant {
    pub fn max_deviation_from(&self, reference: f64) -> f64 {
        self.samples.iter().map(|s| (s - reference).abs()).fold(0.0, f64::max)
    }
}

/// Samples `n_traj` uniformly random complete trajectories and evaluates
/// `log R1(x) + log B2(x) + Σ log P2 - Σ log P1` under the policy
/// `edge_log_prob` with branch-adjusted rewards at `lambda`.
pub fn tb_constant_check<R: Rng>(
    tree: &ExpandedTree,
    edge_log_prob: &[f64],
    lambda: f64,
    n_traj: usize,
    rng: &mut R,
) -> Result<TbConstant, ExactError> {
    if !tree.is_alternating() {
        return Err(ExactError::Precondition("trajectory balance needs an alternating two-player game".into()));
    }
    let log_r = tree_log_rewards(tree, RewardScheme::BranchAdjusted { lambda })?;
    let lb = tree.log_branch_factors();
    let mut samples = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut node = 0;
        let (mut sum1, mut sum2) = (0.0, 0.0);
        while !tree.is_terminal(node) {
            let kids = tree.children(node);
            let c = kids.start + rng.gen_range(0..kids.len());
            match tree.owner(node) {
                Some(Owner::Player(1)) => sum1 += edge_log_prob[c],
                _ => sum2 += edge_log_prob[c],
            }
            node = c;
        }
        samples.push(log_r[0][node] + lb[1][node] + sum2 - sum1);
    }
    let log_z = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
    let max_deviation = samples.iter().map(|s| (s - log_z).abs()).fold(0.0, f64::max);
    Ok(TbConstant { log_z, max_deviation, samples })
}

/// Uniform policy at every nonterminal state.
pub fn uniform_edge_log_probs(tree: &ExpandedTree) -> Vec<f64> {
    (0..tree.len())
        .map(|n| match tree.parent(n) {
            None => 0.0,
            Some(p) if tree.owner(p) == Some(Owner::Env) => tree.log_env_prob(n),
            Some(p) => -(tree.num_children(p) as f64).ln(),
        })
        .collect()
}

/// A pure environment strategy: a parent-closed vertex set keeping exactly
/// one child of each included environment state and every child of each
/// included agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStrategy {
    /// Sorted node ids.
    pub vertices: Vec<usize>,
    pub prob: f64,
}

impl EnvStrategy {
    pub fn contains(&self, node: usize) -> bool {
        self.vertices.binary_search(&node).is_ok()
    }

    pub fn is_valid(&self, tree: &ExpandedTree) -> bool {
        self.contains(0)
            && self.vertices.iter().all(|&v| {
                let parent_ok = tree.parent(v).map_or(true, |p| self.contains(p));
                let kept = tree.children(v).filter(|&c| self.contains(c)).count();
                let children_ok = match tree.owner(v) {
                    None => true,
                    Some(Owner::Env) => kept == 1,
                    Some(_) => kept == tree.num_children(v),
                };
                parent_ok && children_ok
            })
    }
}

fn count_strategies(tree: &ExpandedTree) -> Vec<f64> {
    let mut count = vec![1.0; tree.len()];
    for node in (0..tree.len()).rev() {
        count[node] = match tree.owner(node) {
            None => 1.0,
            Some(Owner::Env) => tree.children(node).map(|c| count[c]).sum(),
            Some(_) => tree.children(node).map(|c| count[c]).product(),
        };
    }
    count
}

/// All environment strategies with their probabilities under `P_env`.
pub fn enumerate_env_strategies(tree: &ExpandedTree, limit: usize) -> Result<Vec<EnvStrategy>, ExactError> {
    let count = count_strategies(tree)[0];
    if count > limit as f64 {
        return Err(ExactError::TooManyStrategies { count, limit });
    }
    // strategies of each subtree, built bottom-up
    let mut sub: Vec<Option<Vec<(Vec<usize>, f64)>>> = vec![None; tree.len()];
    for node in (0..tree.len()).rev() {
        let list = match tree.owner(node) {
            None => vec![(vec![node], 1.0)],
            Some(Owner::Env) => {
                let mut out = Vec::new();
                for c in tree.children(node) {
                    let p = tree.log_env_prob(c).exp();
                    for (v, q) in sub[c].take().unwrap() {
                        let mut verts = Vec::with_capacity(v.len() + 1);
                        verts.push(node);
                        verts.extend(v);
                        out.push((verts, p * q));
                    }
                }
                out
            }
            Some(_) => {
                let mut acc = vec![(vec![node], 1.0)];
                for c in tree.children(node) {
                    let child = sub[c].take().unwrap();
                    let mut next = Vec::with_capacity(acc.len() * child.len());
                    for (va, pa) in &acc {
                        for (vb, pb) in &child {
                            let mut v = va.clone();
                            v.extend_from_slice(vb);
                            next.push((v, pa * pb));
                        }
                    }
                    acc = next;
                }
                acc
            }
        };
        sub[node] = Some(list);
    }
    Ok(sub[0]
        .take()
        .unwrap()
        .into_iter()
        .map(|(mut vertices, prob)| {
            vertices.sort_unstable();
            EnvStrategy { vertices, prob }
        })
        .collect())
}

/// Compares the EDB-optimal agent policy with the normalized expectation of
/// deterministic GFlowNet flows over environment strategies containing the
/// state. Returns the largest absolute probability difference.
pub fn check_prop5(tree: &ExpandedTree, log_rewards: &[f64], limit: usize) -> Result<f64, ExactError> {
    if tree.num_players() != 1 {
        return Err(ExactError::Precondition("strategy check is defined for a single agent".into()));
    }
    let table = solve_eflow(tree, log_rewards, 1)?;
    let strategies = enumerate_env_strategies(tree, limit)?;
    // weighted[c] = Σ_{G ∋ c} P(G) F^G(c)
    let mut weighted = vec![0.0; tree.len()];
    let mut flow = vec![0.0; tree.len()];
    for g in &strategies {
        for &v in g.vertices.iter().rev() {
            flow[v] = match tree.owner(v) {
                None => log_rewards[v].exp(),
                Some(_) => tree.children(v).filter(|&c| g.contains(c)).map(|c| flow[c]).sum(),
            };
        }
        for &v in &g.vertices {
            weighted[v] += g.prob * flow[v];
        }
    }
    let mut worst: f64 = 0.0;
    for node in 0..tree.len() {
        if tree.owner(node) != Some(Owner::Player(1)) {
            continue;
        }
        let total: f64 = tree.children(node).map(|c| weighted[c]).sum();
        for c in tree.children(node) {
            worst = worst.max((weighted[c] / total - table.edge_log_prob(c).exp()).abs());
        }
    }
    Ok(worst)
}

/// Checks `B_i(s) F_i(s) = E[R°_i(x)]` where player `i` moves uniformly and
/// the opponent follows the table's policy, by summing over every path of
/// the subtree below each queried node. Returns the largest relative error.
pub fn check_flow_as_expectation(
    tree: &ExpandedTree,
    table: &FlowTable,
    lambda: f64,
    player: u8,
    nodes: &[usize],
    path_limit: usize,
) -> Result<f64, ExactError> {
    if !tree.is_alternating() {
        return Err(ExactError::Precondition("flow-as-expectation needs an alternating two-player game".into()));
    }
    let lb = tree.log_branch_factors();
    let mut worst: f64 = 0.0;
    for &start in nodes {
        let mut expectation = 0.0;
        let mut paths = 0usize;
        let mut stack = vec![(start, 1.0f64)];
        while let Some((node, prob)) = stack.pop() {
            match tree.owner(node) {
                None => {
                    paths += 1;
                    if paths > path_limit {
                        return Err(ExactError::SubtreeTooLarge { count: paths, limit: path_limit });
                    }
                    let Some(Terminal::Outcome(o)) = tree.terminal(node) else {
                        return Err(ExactError::Precondition("terminal without a game outcome".into()));
                    };
                    expectation += prob * (lambda * o.sign_for(player) as f64).exp();
                }
                Some(Owner::Player(p)) if p == player => {
                    let u = 1.0 / tree.num_children(node) as f64;
                    stack.extend(tree.children(node).map(|c| (c, prob * u)));
                }
                Some(_) => stack.extend(tree.children(node).map(|c| (c, prob * table.edge_log_prob(c).exp()))),
            }
        }
        let lhs = (lb[player as usize - 1][start] + table.log_flow(player, start)).exp();
        worst = worst.max((lhs - expectation).abs() / expectation.abs());
    }
    Ok(worst)
}

/// Exact minimum of a tree-structured least-squares problem over log-flows:
/// `Σ (x_parent + offset_child - x_child)^2` over edges whose offset is
/// `Some`, plus `Σ (x_leaf - log R)^2` over terminals. Edges with `None`
/// are cut. Returns the minimum and the minimizing log-flows.
pub fn quadratic_tree_min(tree: &ExpandedTree, log_rewards: &[f64], offsets: &[Option<f64>]) -> (f64, Vec<f64>) {
    let n = tree.len();
    // cost-to-go below each node: a (x - mu)^2 + c
    let (mut a, mut mu, mut c) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut detached = 0.0;
    for node in (0..n).rev() {
        if tree.is_terminal(node) {
            a[node] = 1.0;
            mu[node] = log_rewards[node];
            continue;
        }
        let (mut sa, mut sam, mut sc) = (0.0, 0.0, 0.0);
        for ch in tree.children(node) {
            match offsets[ch] {
                Some(o) => {
                    let w = a[ch] / (1.0 + a[ch]);
                    sa += w;
                    sam += w * (mu[ch] - o);
                    sc += c[ch];
                }
                None => detached += c[ch],
            }
        }
        a[node] = sa;
        mu[node] = if sa > 0.0 { sam / sa } else { 0.0 };
        let mut spread = 0.0;
        for ch in tree.children(node) {
            if let Some(o) = offsets[ch] {
                let w = a[ch] / (1.0 + a[ch]);
                spread += w * (mu[ch] - o - mu[node]).powi(2);
            }
        }
        c[node] = sc + spread;
    }
    let mut x = vec![0.0; n];
    for node in 0..n {
        x[node] = match tree.parent(node).and_then(|p| offsets[node].map(|o| (p, o))) {
            Some((p, o)) => (x[p] + o + a[node] * mu[node]) / (1.0 + a[node]),
            None => mu[node],
        };
    }
    (c[0] + detached, x)
}

/// Minimum over state flows of the stochastic-GFlowNet detailed-balance
/// loss on the augmented tree, for a fixed agent policy (`edge_log_prob` at
/// children of agent states).
pub fn stochgfn_min_loss(tree: &ExpandedTree, log_rewards: &[f64], edge_log_prob: &[f64]) -> (f64, Vec<f64>) {
    let offsets: Vec<Option<f64>> = (0..tree.len())
        .map(|n| {
            tree.parent(n).map(|p| if tree.owner(p) == Some(Owner::Env) { tree.log_env_prob(n) } else { edge_log_prob[n] })
        })
        .collect();
    quadratic_tree_min(tree, log_rewards, &offsets)
}

/// Lower bound on the stochastic-GFlowNet loss over all agent policies and
/// flows: the minimum with every agent edge term dropped.
pub fn stochgfn_loss_lower_bound(tree: &ExpandedTree, log_rewards: &[f64]) -> f64 {
    let offsets: Vec<Option<f64>> = (0..tree.len())
        .map(|n| tree.parent(n).and_then(|p| (tree.owner(p) == Some(Owner::Env)).then(|| tree.log_env_prob(n))))
        .collect();
    quadratic_tree_min(tree, log_rewards, &offsets).0
}

/// Jointly optimal two-player flows on the position graph of a board game,
/// in the form `log(B_i F_i)`, which depends only on the position.
///
/// At a player's own turn this is the mean over children; at the
/// opponent's turn it is the average weighted by the opponent's values.
#[derive(Debug, Clone)]
pub struct PositionalAfn {
    values: HashMap<Board, [f64; 2]>,
    lambda: f64,
}

impl PositionalAfn {
    pub fn solve(game: &BoardGame, lambda: f64, root: Board, limit: usize) -> Result<Self, ExactError> {
        let mut values: HashMap<Board, [f64; 2]> = HashMap::new();
        let mut stack = vec![(root, false)];
        while let Some((b, expanded)) = stack.pop() {
            if values.contains_key(&b) {
                continue;
            }
            if let Some(o) = game.outcome(&b) {
                values.insert(b, [lambda * o.sign_for(1) as f64, lambda * o.sign_for(2) as f64]);
                continue;
            }
            let moves = game.legal_moves(&b);
            if !expanded {
                stack.push((b, true));
                for a in moves.iter() {
                    let c = game.play(&b, a);
                    if !values.contains_key(&c) {
                        stack.push((c, false));
                    }
                }
                continue;
            }
            let kids: Vec<[f64; 2]> = moves.iter().map(|a| values[&game.play(&b, a)]).collect();
            let j = (b.to_move() - 1) as usize;
            let n = kids.len() as f64;
            let own = logsumexp(kids.iter().map(|k| k[j])) - n.ln();
            let other = logsumexp(kids.iter().map(|k| k[0] + k[1])) - logsumexp(kids.iter().map(|k| k[j]));
            let mut v = [0.0; 2];
            v[j] = own;
            v[1 - j] = other;
            values.insert(b, v);
            if values.len() > limit {
                return Err(ExactError::Tree(TreeError::TooLarge { limit }));
            }
        }
        Ok(PositionalAfn { values, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `log(B_i F_i)` for both players.
    pub fn log_value(&self, b: &Board) -> Option<[f64; 2]> {
        self.values.get(b).copied()
    }

    /// Optimal policy of the side to move, over its legal moves.
    pub fn policy(&self, game: &BoardGame, b: &Board) -> Option<Vec<(usize, f64)>> {
        let j = (b.to_move() - 1) as usize;
        let moves: Vec<usize> = game.legal_moves(b).iter().collect();
        let logs: Option<Vec<f64>> = moves.iter().map(|&a| self.values.get(&game.play(b, a)).map(|v| v[j])).collect();
        let logs = logs?;
        let z = logsumexp(logs.iter().copied());
        Some(moves.into_iter().zip(logs.into_iter().map(|l| (l - z).exp())).collect())
    }
}
