//! Training losses as squared log-ratios, with analytic gradients with
//! respect to the log-quantities they are built from (log-flows, log policy
//! probabilities, log transition probabilities, log Z). Models chain these
//! through their own parameterization.

pub mod rewards;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

pub use rewards::{branch_factor, make_rewards, trajectory_log_branch, OutcomeReward, RewardScheme};

use crate::env::{Owner, Trajectory};
use crate::tree::ExpandedTree;
use crate::util::logsumexp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("rewards must be strictly positive")]
    NonPositiveReward,
    #[error("reward: {0}")]
    Reward(String),
    #[error("trajectory is incomplete")]
    IncompleteTrajectory,
    #[error("trajectory does not alternate between two players")]
    NotAlternating,
    #[error("{got} step log-probabilities for a trajectory of {expected} steps")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node {node} is {found}, not valid for a {term} term")]
    WrongOwner { node: usize, term: &'static str, found: String },
}

/// Which family a loss term belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    AgentEdge,
    EnvState,
    EnvEdge,
    Terminal,
    Trajectory,
    StateSum,
    EnvModel,
}

/// Scalar loss with a per-family breakdown. The total is the sum of the
/// recorded terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub terms: usize,
    pub breakdown: Vec<(TermKind, f64)>,
}

impl LossValue {
    pub fn add(&mut self, kind: TermKind, value: f64) {
        self.total += value;
        self.terms += 1;
        match self.breakdown.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, v)) => *v += value,
            None => self.breakdown.push((kind, value)),
        }
    }

    pub fn merge(&mut self, other: &LossValue) {
        for &(k, v) in &other.breakdown {
            match self.breakdown.iter_mut().find(|(kk, _)| *kk == k) {
                Some((_, x)) => *x += v,
                None => self.breakdown.push((k, v)),
            }
        }
        self.total += other.total;
        self.terms += other.terms;
    }

    pub fn part(&self, kind: TermKind) -> f64 {
        self.breakdown.iter().find(|(k, _)| *k == kind).map_or(0.0, |x| x.1)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// A squared log-ratio `r^2`; `dr` is its derivative with respect to `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub residual: f64,
    pub loss: f64,
    pub dr: f64,
}

impl Term {
    pub fn new(residual: f64) -> Self {
        Term { residual, loss: residual * residual, dr: 2.0 * residual }
    }
}

/// Agent edge (also plain detailed balance on a tree):
/// `log F(s) + log P(s'|s) - log F(s')`.
pub fn agent_edge_term(log_f_s: f64, log_p: f64, log_f_child: f64) -> Term {
    Term::new(log_f_s + log_p - log_f_child)
}

/// Environment state: `log F(s) - log Σ P_env(s'|s) F(s')`. Returns the
/// term and the softmax weights of the children, so that
/// `d/d log F(s') = d/d log P_env(s'|s) = -dr * w`.
pub fn env_state_term(log_f_s: f64, children: &[(f64, f64)]) -> (Term, Vec<f64>) {
    let scores: Vec<f64> = children.iter().map(|(lp, lf)| lp + lf).collect();
    let lse = logsumexp(scores.iter().copied());
    let w = scores.iter().map(|s| (s - lse).exp()).collect();
    (Term::new(log_f_s - lse), w)
}

/// Sampled environment edge with a learned distribution `Q`:
/// `log F(s) + log Q(s'|s) - log F(s') - log P_env(s'|s)`.
pub fn env_edge_q_term(log_f_s: f64, log_q: f64, log_f_child: f64, log_p_env: f64) -> Term {
    Term::new(log_f_s + log_q - log_f_child - log_p_env)
}

pub fn terminal_term(log_f_x: f64, log_reward: f64) -> Term {
    Term::new(log_f_x - log_reward)
}

/// Flow matching: `log F(s) - log Σ F(s')`, with softmax weights of the
/// children.
pub fn flow_matching_term(log_f_s: f64, log_f_children: &[f64]) -> (Term, Vec<f64>) {
    let pairs: Vec<(f64, f64)> = log_f_children.iter().map(|&f| (0.0, f)).collect();
    env_state_term(log_f_s, &pairs)
}

/// Trajectory balance for an alternating two-player game, from player 1's
/// side:
/// `log Z + Σ_{P1 moves} log P1 - log R1(x) - log B2(x) - Σ_{P2 moves} log P2`.
///
/// `step_log_probs[i]` is the log-probability of the action taken at step
/// `i`; `log R1` is read from the trajectory. The returned gradient has one
/// entry per step.
pub fn tb_loss(traj: &Trajectory, log_z: f64, step_log_probs: &[f64]) -> Result<TbLoss, ObjectiveError> {
    if !traj.is_complete() {
        return Err(ObjectiveError::IncompleteTrajectory);
    }
    if step_log_probs.len() != traj.len() {
        return Err(ObjectiveError::LengthMismatch { expected: traj.len(), got: step_log_probs.len() });
    }
    let log_r1 = traj.log_reward().and_then(|r| r.first().copied()).ok_or(ObjectiveError::IncompleteTrajectory)?;
    let mut residual = log_z - log_r1;
    let mut sign = Vec::with_capacity(traj.len());
    for (i, (st, &lp)) in traj.steps.iter().zip(step_log_probs).enumerate() {
        let s = match st.curr_player {
            Owner::Player(1) if i % 2 == 0 => 1.0,
            Owner::Player(2) if i % 2 == 1 => {
                residual -= (st.mask.count() as f64).ln();
                -1.0
            }
            _ => return Err(ObjectiveError::NotAlternating),
        };
        residual += s * lp;
        sign.push(s);
    }
    let term = Term::new(residual);
    Ok(TbLoss { term, d_log_z: term.dr, d_step_log_probs: sign.into_iter().map(|s| s * term.dr).collect() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbLoss {
    pub term: Term,
    pub d_log_z: f64,
    pub d_step_log_probs: Vec<f64>,
}

/// Read access to flow-network quantities on an expanded tree, addressed by
/// node id. Edge quantities are addressed by the child node.
pub trait FlowParams {
    fn log_flow(&self, node: usize) -> f64;
    /// Agent policy `log P(child | parent)`.
    fn log_policy(&self, child: usize) -> f64;
    /// Environment transition `log P_env(child | parent)`, known or modeled.
    fn log_env(&self, child: usize) -> f64;
    /// Learned `log Q(child | parent)`; only used by the Q form.
    fn log_q(&self, _child: usize) -> f64 {
        0.0
    }
}

/// Sparse gradients with respect to the quantities of [`FlowParams`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowGrads {
    pub log_flow: HashMap<usize, f64>,
    pub log_policy: HashMap<usize, f64>,
    pub log_env: HashMap<usize, f64>,
    pub log_q: HashMap<usize, f64>,
}

fn bump(m: &mut HashMap<usize, f64>, k: usize, v: f64) {
    *m.entry(k).or_insert(0.0) += v;
}

impl FlowGrads {
    pub fn clear(&mut self) {
        self.log_flow.clear();
        self.log_policy.clear();
        self.log_env.clear();
        self.log_q.clear();
    }
}

/// One EDB term, addressed by node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdbTerm {
    /// Edge into `child` from a state of the agent.
    AgentEdge(usize),
    /// Expectation over all children of a state the agent does not own.
    EnvState(usize),
    /// Sampled edge into `child` from a non-agent state, using `Q`.
    EnvEdgeQ(usize),
    Terminal(usize),
}

fn owner_name(tree: &ExpandedTree, node: usize) -> String {
    tree.owner(node).map_or_else(|| "terminal".to_string(), |o| format!("owned by {o}"))
}

fn check_parent_is_agent(tree: &ExpandedTree, child: usize, agent: u8, term: &'static str) -> Result<usize, ObjectiveError> {
    match tree.parent(child) {
        Some(p) if tree.owner(p) == Some(Owner::Player(agent)) => Ok(p),
        Some(p) => Err(ObjectiveError::WrongOwner { node: p, term, found: owner_name(tree, p) }),
        None => Err(ObjectiveError::WrongOwner { node: child, term, found: "the root".into() }),
    }
}

fn check_env_state(tree: &ExpandedTree, node: usize, agent: u8, term: &'static str) -> Result<(), ObjectiveError> {
    match tree.owner(node) {
        Some(o) if o != Owner::Player(agent) => Ok(()),
        _ => Err(ObjectiveError::WrongOwner { node, term, found: owner_name(tree, node) }),
    }
}

/// Expected-detailed-balance loss of `agent`'s flows on a batch of terms.
/// States not owned by the agent are environment states.
pub fn edb_losses<P: FlowParams + ?Sized>(
    tree: &ExpandedTree,
    agent: u8,
    params: &P,
    log_rewards: &[f64],
    batch: &[EdbTerm],
    grads: &mut FlowGrads,
) -> Result<LossValue, ObjectiveError> {
    let mut loss = LossValue::default();
    for &t in batch {
        match t {
            EdbTerm::AgentEdge(c) => {
                let p = check_parent_is_agent(tree, c, agent, "agent-edge")?;
                let term = agent_edge_term(params.log_flow(p), params.log_policy(c), params.log_flow(c));
                bump(&mut grads.log_flow, p, term.dr);
                bump(&mut grads.log_policy, c, term.dr);
                bump(&mut grads.log_flow, c, -term.dr);
                loss.add(TermKind::AgentEdge, term.loss);
            }
            EdbTerm::EnvState(s) => {
                check_env_state(tree, s, agent, "environment-state")?;
                let kids: Vec<(f64, f64)> = tree.children(s).map(|c| (params.log_env(c), params.log_flow(c))).collect();
                let (term, w) = env_state_term(params.log_flow(s), &kids);
                bump(&mut grads.log_flow, s, term.dr);
                for (c, wc) in tree.children(s).zip(w) {
                    bump(&mut grads.log_flow, c, -term.dr * wc);
                    bump(&mut grads.log_env, c, -term.dr * wc);
                }
                loss.add(TermKind::EnvState, term.loss);
            }
            EdbTerm::EnvEdgeQ(c) => {
                let s = tree.parent(c).ok_or(ObjectiveError::WrongOwner {
                    node: c,
                    term: "environment-edge",
                    found: "the root".into(),
                })?;
                check_env_state(tree, s, agent, "environment-edge")?;
                let term = env_edge_q_term(params.log_flow(s), params.log_q(c), params.log_flow(c), params.log_env(c));
                bump(&mut grads.log_flow, s, term.dr);
                bump(&mut grads.log_q, c, term.dr);
                bump(&mut grads.log_flow, c, -term.dr);
                bump(&mut grads.log_env, c, -term.dr);
                loss.add(TermKind::EnvEdge, term.loss);
            }
            EdbTerm::Terminal(x) => {
                if !tree.is_terminal(x) {
                    return Err(ObjectiveError::WrongOwner { node: x, term: "terminal", found: owner_name(tree, x) });
                }
                let term = terminal_term(params.log_flow(x), log_rewards[x]);
                bump(&mut grads.log_flow, x, term.dr);
                loss.add(TermKind::Terminal, term.loss);
            }
        }
    }
    Ok(loss)
}

/// Detailed balance on the augmented graph of a stochastic GFlowNet: agent
/// edges use the learned policy, environment edges the fixed transition
/// `log_env`. Terms are addressed by the child node; terminals by the leaf.
pub fn stochgfn_db_loss<P: FlowParams + ?Sized>(
    tree: &ExpandedTree,
    params: &P,
    log_rewards: &[f64],
    edges: &[usize],
    terminals: &[usize],
    grads: &mut FlowGrads,
) -> Result<LossValue, ObjectiveError> {
    let mut loss = LossValue::default();
    for &c in edges {
        let s = tree.parent(c).ok_or(ObjectiveError::WrongOwner { node: c, term: "edge", found: "the root".into() })?;
        let env = tree.owner(s) == Some(Owner::Env);
        let lp = if env { params.log_env(c) } else { params.log_policy(c) };
        let term = agent_edge_term(params.log_flow(s), lp, params.log_flow(c));
        bump(&mut grads.log_flow, s, term.dr);
        bump(&mut grads.log_flow, c, -term.dr);
        if env {
            bump(&mut grads.log_env, c, term.dr);
            loss.add(TermKind::EnvEdge, term.loss);
        } else {
            bump(&mut grads.log_policy, c, term.dr);
            loss.add(TermKind::AgentEdge, term.loss);
        }
    }
    for &x in terminals {
        if !tree.is_terminal(x) {
            return Err(ObjectiveError::WrongOwner { node: x, term: "terminal", found: owner_name(tree, x) });
        }
        let term = terminal_term(params.log_flow(x), log_rewards[x]);
        bump(&mut grads.log_flow, x, term.dr);
        loss.add(TermKind::Terminal, term.loss);
    }
    Ok(loss)
}

/// Detailed balance that ignores the environment: the flow of an
/// environment state is matched directly to the realized child's, as if
/// the transition were the only one possible.
pub fn naive_db_loss<P: FlowParams + ?Sized>(
    tree: &ExpandedTree,
    params: &P,
    log_rewards: &[f64],
    edges: &[usize],
    terminals: &[usize],
    grads: &mut FlowGrads,
) -> Result<LossValue, ObjectiveError> {
    let mut loss = LossValue::default();
    for &c in edges {
        let s = tree.parent(c).ok_or(ObjectiveError::WrongOwner { node: c, term: "edge", found: "the root".into() })?;
        let env = tree.owner(s) == Some(Owner::Env);
        let lp = if env { 0.0 } else { params.log_policy(c) };
        let term = agent_edge_term(params.log_flow(s), lp, params.log_flow(c));
        bump(&mut grads.log_flow, s, term.dr);
        bump(&mut grads.log_flow, c, -term.dr);
        if !env {
            bump(&mut grads.log_policy, c, term.dr);
        }
        loss.add(if env { TermKind::EnvEdge } else { TermKind::AgentEdge }, term.loss);
    }
    for &x in terminals {
        let term = terminal_term(params.log_flow(x), log_rewards[x]);
        bump(&mut grads.log_flow, x, term.dr);
        loss.add(TermKind::Terminal, term.loss);
    }
    Ok(loss)
}

/// Negative log-likelihood of observed environment transitions under the
/// modeled `log_env`.
pub fn env_model_nll<P: FlowParams + ?Sized>(params: &P, observed: &[usize], grads: &mut FlowGrads) -> LossValue {
    let mut loss = LossValue::default();
    for &c in observed {
        bump(&mut grads.log_env, c, -1.0);
        loss.add(TermKind::EnvModel, -params.log_env(c));
    }
    loss
}

/// Log-probabilities given by a fixed table, for evaluating losses at known
/// flows and policies.
#[derive(Debug, Clone)]
pub struct TableParams<'a> {
    pub log_flow: &'a [f64],
    pub log_policy: &'a [f64],
    pub log_env: &'a [f64],
    pub log_q: Option<&'a [f64]>,
}

impl FlowParams for TableParams<'_> {
    fn log_flow(&self, node: usize) -> f64 {
        self.log_flow[node]
    }
    fn log_policy(&self, child: usize) -> f64 {
        self.log_policy[child]
    }
    fn log_env(&self, child: usize) -> f64 {
        self.log_env[child]
    }
    fn log_q(&self, child: usize) -> f64 {
        self.log_q.map_or(0.0, |q| q[child])
    }
}

/// Transition log-probabilities seen by `agent`: the environment's own at
/// environment states, uniform at other players' states.
pub fn agent_view_env_log_probs(tree: &ExpandedTree, agent: u8) -> Vec<f64> {
    (0..tree.len())
        .map(|n| match tree.parent(n) {
            None => 0.0,
            Some(p) => match tree.owner(p) {
                Some(Owner::Env) => tree.log_env_prob(n),
                Some(Owner::Player(q)) if q != agent => -(tree.num_children(p) as f64).ln(),
                _ => 0.0,
            },
        })
        .collect()
}

/// Every EDB term of the tree for `agent`, in node order.
pub fn all_edb_terms(tree: &ExpandedTree, agent: u8) -> Vec<EdbTerm> {
    let mut out = Vec::new();
    for n in 0..tree.len() {
        match tree.owner(n) {
            None => out.push(EdbTerm::Terminal(n)),
            Some(Owner::Player(p)) if p == agent => out.extend(tree.children(n).map(EdbTerm::AgentEdge)),
            Some(_) => out.push(EdbTerm::EnvState(n)),
        }
    }
    out
}
