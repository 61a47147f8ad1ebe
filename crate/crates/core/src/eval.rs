//! Agents, matches, tournaments, Elo fitting and flow-error metrics.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Outcome, Owner, Terminal, TreeEnv};
use crate::exact::PositionalAfn;
use crate::games::{BoardGame, BoardState};
use crate::model::{sample_action, ModelError, PolicyModel};
use crate::solver::{Solver, TreeSearchAgent};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("agent {agent} could not move: {reason}")]
    Agent { agent: String, reason: String },
    #[error("a tournament needs at least two agents")]
    TooFewAgents,
    #[error("comparison graph is disconnected: {0}")]
    Disconnected(String),
    #[error("rating fit did not converge ({0})")]
    NotConverged(String),
    #[error("unknown anchor agent {0}")]
    UnknownAnchor(String),
    #[error("game ended without an outcome")]
    NoOutcome,
    #[error("node {0} is missing from the exact table")]
    MissingState(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Something that picks moves in an environment.
pub trait Agent<E: TreeEnv>: Send {
    fn name(&self) -> &str;

    fn act(&mut self, env: &E, s: &E::State, rng: &mut ChaCha8Rng) -> Result<Action, EvalError>;

    /// Move probabilities over the action width, where meaningful.
    fn policy(&mut self, _env: &E, _s: &E::State) -> Option<Vec<f64>> {
        None
    }
}

/// Picks uniformly among legal moves.
#[derive(Debug, Clone)]
pub struct UniformAgent {
    name: String,
}

impl UniformAgent {
    pub fn new() -> Self {
        UniformAgent { name: "uniform".into() }
    }

    pub fn named(name: &str) -> Self {
        UniformAgent { name: name.into() }
    }
}

impl Default for UniformAgent {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: TreeEnv> Agent<E> for UniformAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, env: &E, s: &E::State, rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        let legal: Vec<Action> = env.legal_actions(s).iter().collect();
        if legal.is_empty() {
            return Err(EvalError::Agent { agent: self.name.clone(), reason: "no legal moves".into() });
        }
        Ok(legal[rng.gen_range(0..legal.len())])
    }

    fn policy(&mut self, env: &E, s: &E::State) -> Option<Vec<f64>> {
        let m = env.legal_actions(s);
        let p = 1.0 / m.count() as f64;
        Some((0..m.width()).map(|a| if m.contains(a) { p } else { 0.0 }).collect())
    }
}

/// Plays a policy model, greedily at temperature 0.
pub struct ModelAgent<M: PolicyModel> {
    name: String,
    model: Arc<M>,
    temperature: f64,
}

impl<M: PolicyModel> ModelAgent<M> {
    pub fn new(name: &str, model: Arc<M>, temperature: f64) -> Self {
        ModelAgent { name: name.into(), model, temperature }
    }

    pub fn greedy(name: &str, model: Arc<M>) -> Self {
        Self::new(name, model, 0.0)
    }
}

impl<E: TreeEnv, M: PolicyModel> Agent<E> for ModelAgent<M> {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, env: &E, s: &E::State, rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        let lp = self.model.log_probs_for(env, s)?;
        Ok(sample_action(&lp, &env.legal_actions(s), self.temperature, rng)?)
    }

    fn policy(&mut self, env: &E, s: &E::State) -> Option<Vec<f64>> {
        let lp = self.model.log_probs_for(env, s).ok()?;
        Some(lp.iter().map(|x| x.exp()).collect())
    }
}

/// Plays a solver-optimal move, the lowest-indexed one among ties.
pub struct PerfectAgent {
    name: String,
    solver: Solver,
}

impl PerfectAgent {
    pub fn new(game: BoardGame) -> Self {
        PerfectAgent { name: "perfect".into(), solver: Solver::new(game) }
    }
}

impl Agent<BoardGame> for PerfectAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, _env: &BoardGame, s: &BoardState, _rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        self.solver
            .optimal_moves(&s.board)
            .and_then(|m| m.first().copied())
            .ok_or_else(|| EvalError::Agent { agent: self.name.clone(), reason: "position not solved".into() })
    }
}

/// Depth-limited alpha-beta search.
pub struct SearchAgent {
    name: String,
    search: TreeSearchAgent,
}

impl SearchAgent {
    pub fn new(game: BoardGame, depth: u32) -> Self {
        SearchAgent { name: format!("search{depth}"), search: TreeSearchAgent::new(game, depth) }
    }
}

impl Agent<BoardGame> for SearchAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, _env: &BoardGame, s: &BoardState, _rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        self.search
            .choose(&s.board)
            .ok_or_else(|| EvalError::Agent { agent: self.name.clone(), reason: "no legal moves".into() })
    }
}

/// Greedy play from the exact jointly optimal flows.
pub struct ExactAfnAgent {
    name: String,
    afn: Arc<PositionalAfn>,
}

impl ExactAfnAgent {
    pub fn new(name: &str, afn: Arc<PositionalAfn>) -> Self {
        ExactAfnAgent { name: name.into(), afn }
    }
}

impl Agent<BoardGame> for ExactAfnAgent {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, env: &BoardGame, s: &BoardState, _rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        let p = self
            .afn
            .policy(env, &s.board)
            .ok_or_else(|| EvalError::Agent { agent: self.name.clone(), reason: "position not in table".into() })?;
        // ties go to the lowest action
        Ok(p.iter().fold(p[0], |b, &x| if x.1 > b.1 { x } else { b }).0)
    }

    fn policy(&mut self, env: &BoardGame, s: &BoardState) -> Option<Vec<f64>> {
        let mut out = vec![0.0; env.action_space_size()];
        for (a, p) in self.afn.policy(env, &s.board)? {
            out[a] = p;
        }
        Some(out)
    }
}

/// Plays one game of a two-player environment; `agents[0]` moves first.
pub fn play_game<E: TreeEnv>(
    env: &E,
    agents: [&mut dyn Agent<E>; 2],
    rng: &mut ChaCha8Rng,
) -> Result<(Outcome, usize), EvalError> {
    let [a1, a2] = agents;
    let mut s = env.root();
    let mut plies = 0;
    loop {
        match env.owner_of(&s) {
            None => {
                return match env.terminal(&s) {
                    Some(Terminal::Outcome(o)) => Ok((o, plies)),
                    _ => Err(EvalError::NoOutcome),
                }
            }
            Some(Owner::Player(1)) => s = env.apply(&s, a1.act(env, &s, rng)?),
            Some(Owner::Player(_)) => s = env.apply(&s, a2.act(env, &s, rng)?),
            Some(Owner::Env) => {
                let m: Vec<Action> = env.legal_actions(&s).iter().collect();
                let p = env.transition_probs(&s);
                let mut u = rng.gen::<f64>();
                let mut pick = *m.last().unwrap();
                for (a, q) in m.iter().zip(p) {
                    if u < q {
                        pick = *a;
                        break;
                    }
                    u -= q;
                }
                s = env.apply(&s, pick);
            }
        }
        plies += 1;
    }
}

/// Win/draw/loss fractions from one agent's perspective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub games: usize,
    pub win: f64,
    pub draw: f64,
    pub loss: f64,
}

impl Rates {
    pub fn losses(&self) -> usize {
        (self.loss * self.games as f64).round() as usize
    }
}

/// `agent` against a uniform opponent, alternating colors.
pub fn rates_vs_uniform<E: TreeEnv>(
    env: &E,
    agent: &mut dyn Agent<E>,
    games: usize,
    seed: u64,
) -> Result<Rates, EvalError> {
    let mut uni = UniformAgent::new();
    let (mut w, mut d, mut l) = (0usize, 0usize, 0usize);
    for g in 0..games {
        let mut rng = ChaCha8Rng::seed_from_u64(match_seed(seed, 0, 1, g));
        let first = g % 2 == 0;
        let (o, _) = if first {
            play_game(env, [agent, &mut uni], &mut rng)?
        } else {
            play_game(env, [&mut uni, agent], &mut rng)?
        };
        match o.sign_for(if first { 1 } else { 2 }) {
            1 => w += 1,
            0 => d += 1,
            _ => l += 1,
        }
    }
    let n = games.max(1) as f64;
    Ok(Rates { games, win: w as f64 / n, draw: d as f64 / n, loss: l as f64 / n })
}

struct BorrowedModel<'a, M> {
    model: &'a M,
}

impl<E: TreeEnv, M: PolicyModel> Agent<E> for BorrowedModel<'_, M> {
    fn name(&self) -> &str {
        "model"
    }

    fn act(&mut self, env: &E, s: &E::State, rng: &mut ChaCha8Rng) -> Result<Action, EvalError> {
        let lp = self.model.log_probs_for(env, s)?;
        Ok(sample_action(&lp, &env.legal_actions(s), 0.0, rng)?)
    }
}

/// Greedy play of `model` against a uniform opponent.
pub fn greedy_rates_vs_uniform<E: TreeEnv, M: PolicyModel>(
    env: &E,
    model: &M,
    games: usize,
    seed: u64,
) -> Result<Rates, EvalError> {
    rates_vs_uniform(env, &mut BorrowedModel { model }, games, seed)
}

/// One game of a tournament.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub agent_a: String,
    pub agent_b: String,
    pub a_first: bool,
    pub outcome: Outcome,
    pub plies: usize,
    pub seed: u64,
}

impl MatchRecord {
    /// 2 for a win, 1 for a draw, 0 for a loss, from `agent_a`'s side.
    pub fn points_a(&self) -> u32 {
        let side = if self.a_first { 1 } else { 2 };
        (self.outcome.sign_for(side) + 1) as u32
    }
}

/// Deterministic per-game seed.
pub fn match_seed(seed: u64, i: usize, j: usize, g: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [i as u64, j as u64, g as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

/// Round robin: every pair plays `games_per_pair` games, half with each
/// agent moving first.
pub fn run_tournament<E: TreeEnv>(
    env: &E,
    agents: &mut [Box<dyn Agent<E>>],
    games_per_pair: usize,
    seed: u64,
) -> Result<Vec<MatchRecord>, EvalError> {
    if agents.len() < 2 {
        return Err(EvalError::TooFewAgents);
    }
    let mut out = Vec::new();
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            let (left, right) = agents.split_at_mut(j);
            let (a, b) = (&mut left[i], &mut right[0]);
            for g in 0..games_per_pair {
                let s = match_seed(seed, i, j, g);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let a_first = g % 2 == 0;
                let (outcome, plies) = if a_first {
                    play_game(env, [a.as_mut(), b.as_mut()], &mut rng)?
                } else {
                    play_game(env, [b.as_mut(), a.as_mut()], &mut rng)?
                };
                out.push(MatchRecord {
                    agent_a: a.name().to_string(),
                    agent_b: b.name().to_string(),
                    a_first,
                    outcome,
                    plies,
                    seed: s,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_records_csv<W: std::io::Write>(records: &[MatchRecord], w: W) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<MatchRecord>, EvalError> {
    csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>().map_err(Into::into)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloRow {
    pub agent: String,
    pub rating: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub rows: Vec<EloRow>,
    /// Draw parameter of the likelihood; 0 when no game was drawn.
    pub draw_param: f64,
    pub iterations: usize,
}

impl EloTable {
    pub fn rating(&self, agent: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.agent == agent).map(|r| r.rating)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

const ELO_SCALE: f64 = 400.0 / std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, Default)]
struct PairCounts {
    wins_i: f64,
    draws: f64,
    wins_j: f64,
}

struct EloProblem {
    pairs: Vec<(usize, usize, PairCounts)>,
    free: Vec<usize>,
    n: usize,
    fit_draw: bool,
}

impl EloProblem {
    // x = [theta of free agents..., log nu if fitted]
    fn unpack(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut theta = vec![0.0; self.n];
        for (k, &a) in self.free.iter().enumerate() {
            theta[a] = x[k];
        }
        let nu = if self.fit_draw { x[self.free.len()].exp() } else { 0.0 };
        (theta, nu)
    }

    fn loglik(&self, x: &[f64]) -> f64 {
        let (t, nu) = self.unpack(x);
        let mut ll = 0.0;
        for &(i, j, c) in &self.pairs {
            let mid = 0.5 * (t[i] + t[j]);
            let d = crate::util::logsumexp([t[i], t[j], if nu > 0.0 { nu.ln() + mid } else { f64::NEG_INFINITY }]);
            ll += c.wins_i * (t[i] - d) + c.wins_j * (t[j] - d);
            if c.draws > 0.0 {
                ll += c.draws * (nu.ln() + mid - d);
            }
        }
        ll
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let (t, nu) = self.unpack(x);
        let mut gt = vec![0.0; self.n];
        let mut gnu = 0.0;
        for &(i, j, c) in &self.pairs {
            let mid = 0.5 * (t[i] + t[j]);
            let ld = if nu > 0.0 { nu.ln() + mid } else { f64::NEG_INFINITY };
            let d = crate::util::logsumexp([t[i], t[j], ld]);
            let (pi, pj, pd) = ((t[i] - d).exp(), (t[j] - d).exp(), (ld - d).exp());
            let total = c.wins_i + c.draws + c.wins_j;
            // d D / d theta_i = p_i + p_d / 2
            gt[i] += c.wins_i + 0.5 * c.draws - total * (pi + 0.5 * pd);
            gt[j] += c.wins_j + 0.5 * c.draws - total * (pj + 0.5 * pd);
            gnu += c.draws - total * pd;
        }
        let mut g: Vec<f64> = self.free.iter().map(|&a| gt[a]).collect();
        if self.fit_draw {
            g.push(gnu);
        }
        g
    }

    // observed information = minus the Hessian, by central differences of the gradient
    fn information(&self, x: &[f64]) -> DMatrix<f64> {
        let k = x.len();
        let mut h = DMatrix::zeros(k, k);
        let eps = 1e-6;
        for c in 0..k {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[c] += eps;
            lo[c] -= eps;
            let (gh, gl) = (self.grad(&hi), self.grad(&lo));
            for r in 0..k {
                h[(r, c)] = -(gh[r] - gl[r]) / (2.0 * eps);
            }
        }
        (h.clone() + h.transpose()) * 0.5
    }
}

fn components(names: &[String], edges: &[(usize, usize)]) -> Vec<Vec<String>> {
    let mut parent: Vec<usize> = (0..names.len()).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let nx = p[y];
            p[y] = r;
            y = nx;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..names.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(names[i].clone());
    }
    groups.into_values().collect()
}

/// Games sampled from the Davidson model with known ratings (Elo points)
/// and draw parameter `nu`, `games_per_pair` per pair with colors
/// alternating.
pub fn synthetic_records(ratings: &[(&str, f64)], nu: f64, games_per_pair: usize, seed: u64) -> Vec<MatchRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..ratings.len() {
        for j in i + 1..ratings.len() {
            let (ti, tj) = (ratings[i].1 / ELO_SCALE, ratings[j].1 / ELO_SCALE);
            let wi = ti.exp();
            let wj = tj.exp();
            let wd = nu * (0.5 * (ti + tj)).exp();
            for g in 0..games_per_pair {
                let u = rng.gen::<f64>() * (wi + wj + wd);
                let a_first = g % 2 == 0;
                let outcome = if u < wi {
                    if a_first { Outcome::P1Win } else { Outcome::P2Win }
                } else if u < wi + wj {
                    if a_first { Outcome::P2Win } else { Outcome::P1Win }
                } else {
                    Outcome::Draw
                };
                out.push(MatchRecord {
                    agent_a: ratings[i].0.into(),
                    agent_b: ratings[j].0.into(),
                    a_first,
                    outcome,
                    plies: 0,
                    seed,
                });
            }
        }
    }
    out
}

/// Maximum-likelihood ratings under a Davidson draw model, with `anchor`
/// fixed at 0. `prior_games` adds that many virtual games to every pair
/// that met, split equally between a win for each side and a draw. This
/// keeps the ratings and the draw parameter finite when an agent never
/// loses or a pair only ever draws.
pub fn fit_elo(records: &[MatchRecord], anchor: &str, prior_games: f64) -> Result<EloTable, EvalError> {
    let mut names: Vec<String> = Vec::new();
    let index = |s: &str, names: &mut Vec<String>| match names.iter().position(|n| n == s) {
        Some(i) => i,
        None => {
            names.push(s.to_string());
            names.len() - 1
        }
    };
    let mut counts: BTreeMap<(usize, usize), PairCounts> = BTreeMap::new();
    for r in records {
        let a = index(&r.agent_a, &mut names);
        let b = index(&r.agent_b, &mut names);
        let pts = r.points_a();
        let (i, j, pa) = if a < b { (a, b, pts) } else { (b, a, 2 - pts) };
        let c = counts.entry((i, j)).or_default();
        match pa {
            2 => c.wins_i += 1.0,
            1 => c.draws += 1.0,
            _ => c.wins_j += 1.0,
        }
    }
    let anchor_idx = names.iter().position(|n| n == anchor).ok_or_else(|| EvalError::UnknownAnchor(anchor.into()))?;
    let groups = components(&names, &counts.keys().copied().collect::<Vec<_>>());
    if groups.len() > 1 {
        let desc: Vec<String> = groups.iter().map(|g| format!("{{{}}}", g.join(", "))).collect();
        return Err(EvalError::Disconnected(desc.join(" | ")));
    }
    for c in counts.values_mut() {
        c.wins_i += prior_games / 3.0;
        c.wins_j += prior_games / 3.0;
        c.draws += prior_games / 3.0;
    }
    let decisive: f64 = counts.values().map(|c| c.wins_i + c.wins_j).sum();
    let drawn: f64 = counts.values().map(|c| c.draws).sum();
    let n = names.len();
    if decisive == 0.0 {
        let rows = names.into_iter().map(|agent| EloRow { agent, rating: 0.0, stderr: f64::INFINITY }).collect();
        return Ok(EloTable { rows, draw_param: f64::INFINITY, iterations: 0 });
    }
    let free: Vec<usize> = (0..n).filter(|&i| i != anchor_idx).collect();
    let prob = EloProblem {
        pairs: counts.iter().map(|(&(i, j), &c)| (i, j, c)).collect(),
        free,
        n,
        fit_draw: drawn > 0.0,
    };
    let k = prob.free.len() + usize::from(prob.fit_draw);
    let mut x = vec![0.0; k];
    let mut iterations = 0;
    loop {
        let g = prob.grad(&x);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm <= 1e-8 {
            break;
        }
        iterations += 1;
        if iterations > 500 {
            return Err(EvalError::NotConverged(format!("gradient norm {gnorm:.3e}; an agent may be undefeated")));
        }
        let info = prob.information(&x);
        let step = info
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&DVector::from_vec(g.clone())))
            .unwrap_or_else(|| DVector::from_vec(g.clone()) * 0.1);
        let ll0 = prob.loglik(&x);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if prob.loglik(&cand) >= ll0 - 1e-12 || t < 1e-10 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let info = prob.information(&x);
    let cov = info.try_inverse();
    let (theta, nu) = prob.unpack(&x);
    let rows = (0..n)
        .map(|i| {
            let stderr = match prob.free.iter().position(|&f| f == i) {
                None => 0.0,
                Some(k) => cov.as_ref().map_or(f64::INFINITY, |c| c[(k, k)].max(0.0).sqrt() * ELO_SCALE),
            };
            EloRow { agent: names[i].clone(), rating: theta[i] * ELO_SCALE, stderr }
        })
        .collect();
    Ok(EloTable { rows, draw_param: nu, iterations })
}

/// Mean absolute error of linear-space flows at `nodes`.
pub fn flow_mae(learned_log_flow: impl Fn(usize) -> f64, exact_log_flow: &[f64], nodes: &[usize]) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for &n in nodes {
        let e = *exact_log_flow.get(n).ok_or(EvalError::MissingState(n))?;
        total += (learned_log_flow(n).exp() - e.exp()).abs();
    }
    Ok(total / nodes.len().max(1) as f64)
}

/// Mean absolute error of edge flows `F(s) P(s'|s)`, edges addressed by
/// child node.
pub fn edge_flow_mae(
    learned: impl Fn(usize) -> f64,
    exact: impl Fn(usize) -> Option<f64>,
    edges: &[usize],
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for &c in edges {
        let e = exact(c).ok_or(EvalError::MissingState(c))?;
        total += (learned(c).exp() - e.exp()).abs();
    }
    Ok(total / edges.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(a: &str, b: &str, a_first: bool, o: Outcome) -> MatchRecord {
        MatchRecord { agent_a: a.into(), agent_b: b.into(), a_first, outcome: o, plies: 0, seed: 0 }
    }

    #[test]
    fn three_to_one_is_191_points() {
        let mut r = Vec::new();
        for k in 0..400 {
            let first = k % 2 == 0;
            let a_wins = k % 4 != 3;
            let o = match (first, a_wins) {
                (true, true) | (false, false) => Outcome::P1Win,
                _ => Outcome::P2Win,
            };
            r.push(rec("a", "uniform", first, o));
        }
        let t = fit_elo(&r, "uniform", 0.0).unwrap();
        assert_eq!(t.rating("uniform"), Some(0.0));
        assert!((t.rating("a").unwrap() - 400.0 * 3f64.log10()).abs() < 1e-6);
        assert_eq!(t.draw_param, 0.0);
    }

    #[test]
    fn all_draws_rate_everyone_zero() {
        let r = vec![rec("a", "b", true, Outcome::Draw), rec("b", "c", false, Outcome::Draw)];
        let t = fit_elo(&r, "a", 0.0).unwrap();
        assert!(t.rows.iter().all(|x| x.rating == 0.0));
    }

    #[test]
    fn disconnected_graph_names_components() {
        let r = vec![rec("a", "b", true, Outcome::P1Win), rec("c", "d", true, Outcome::P2Win)];
        let e = fit_elo(&r, "a", 0.0).unwrap_err().to_string();
        assert!(e.contains("{a, b}") && e.contains("{c, d}"), "{e}");
    }

    #[test]
    fn prior_games_bound_a_degenerate_fit() {
        let mut r = Vec::new();
        for g in 0..20 {
            let first = g % 2 == 0;
            r.push(rec("u", "p", first, if first { Outcome::P2Win } else { Outcome::P1Win }));
            r.push(rec("u", "s", first, if first { Outcome::P2Win } else { Outcome::P1Win }));
            r.push(rec("p", "s", first, Outcome::Draw));
        }
        let t = fit_elo(&r, "u", 3.0).unwrap();
        assert!(t.draw_param.is_finite() && t.draw_param < 100.0, "{t:?}");
        assert!(t.rows.iter().all(|row| row.rating.abs() < 3000.0 && row.stderr.is_finite()));
        assert!((t.rating("p").unwrap() - t.rating("s").unwrap()).abs() < 1.0);
    }

    #[test]
    fn points_follow_colors() {
        assert_eq!(rec("a", "b", false, Outcome::P2Win).points_a(), 2);
        assert_eq!(rec("a", "b", true, Outcome::P2Win).points_a(), 0);
        assert_eq!(rec("a", "b", true, Outcome::Draw).points_a(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let r = vec![rec("a", "b", true, Outcome::P1Win), rec("a", "b", false, Outcome::Draw)];
        let mut buf = Vec::new();
        write_records_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("agent_a,agent_b,a_first,outcome,plies,seed"));
        assert_eq!(read_records_csv(&buf[..]).unwrap(), r);
    }

    #[test]
    fn flow_mae_arithmetic() {
        let exact = [4f64.ln(), 0.0, 3f64.ln()];
        let m = flow_mae(|_| 0.0, &exact, &[0, 1, 2]).unwrap();
        assert!((m - 5.0 / 3.0).abs() < 1e-12);
        assert!(flow_mae(|n| exact[n], &exact, &[0, 1, 2]).unwrap() == 0.0);
    }
}
