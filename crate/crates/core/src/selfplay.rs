//! Training loops: trajectory generation, replay, and the epoch schedule
//! (generate `K` trajectories, then `L` gradient steps on batches drawn from
//! the buffer).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Outcome, Owner, Terminal, Trajectory, TreeEnv};
use crate::eval::{greedy_rates_vs_uniform, match_seed, EvalError, Rates};
use crate::exact::{solve_afn, solve_eflow, tree_log_rewards, ExactError, FlowTable};
use crate::model::flow::TabularFlowModel;
use crate::model::{sample_action, AdamConfig, AnyModel, ModelError, PolicyInput, PolicyModel};
use crate::objectives::rewards::trajectory_log_branch;
use crate::objectives::{
    edb_losses, env_model_nll, naive_db_loss, stochgfn_db_loss, tb_loss, EdbTerm, FlowGrads, FlowParams, LossValue,
    ObjectiveError, RewardScheme,
};
use crate::tree::ExpandedTree;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at step {step}: {reason}")]
    NonFinite { step: u64, reason: String, batch: Vec<String> },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Tb,
    Edb,
    StochGfn,
    NaiveGfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentMode {
    /// Both sides are learned and play each other.
    SelfPlay,
    /// Only `agent` learns; the other side moves uniformly.
    FixedUniform,
    /// One learner per side, each against a uniform opponent.
    FixedUniformBoth,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub opponent: OpponentMode,
    pub agent: u8,
    pub lambda: f64,
    /// Overrides the default reward: branch-adjusted outcome rewards for
    /// games, stored rewards otherwise.
    pub reward: Option<RewardScheme>,
    pub batch_size: usize,
    pub trajectories_per_epoch: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub buffer_capacity: usize,
    pub temperature: f64,
    /// Sample every learner move uniformly instead of from its policy.
    pub uniform_behavior: bool,
    /// Fraction of generated games in which one side, chosen at random,
    /// moves uniformly. Trajectory balance is off-policy, so these games
    /// only widen coverage.
    pub uniform_side_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub eval_games: usize,
    pub stop_when_unbeaten: bool,
    pub max_steps: Option<u64>,
    /// Environment states with more children than this use the sampled
    /// `Q` form of the expectation term.
    pub q_threshold: usize,
    pub learn_env: bool,
    pub env_model_weight: f64,
    /// Uniform rollouts whose states are used for flow-error metrics.
    pub mae_rollouts: usize,
    /// Starting log-flow of nonterminal states in tabular flow models.
    pub init_log_flow: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Tb,
            opponent: OpponentMode::SelfPlay,
            agent: 1,
            lambda: 1.0,
            reward: None,
            batch_size: 512,
            trajectories_per_epoch: 10240,
            steps_per_epoch: 500,
            epochs: 1,
            buffer_capacity: 10240,
            temperature: 1.5,
            uniform_behavior: false,
            uniform_side_fraction: 0.0,
            seed: 0,
            adam: AdamConfig::default(),
            eval_games: 1000,
            stop_when_unbeaten: false,
            max_steps: None,
            q_threshold: 32,
            learn_env: false,
            env_model_weight: 1.0,
            mae_rollouts: 256,
            init_log_flow: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.trajectories_per_epoch == 0 {
            return bad("batch_size, steps_per_epoch and trajectories_per_epoch must be positive");
        }
        if self.buffer_capacity < self.batch_size.min(self.trajectories_per_epoch) {
            return bad("buffer_capacity is smaller than a batch");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.uniform_side_fraction) {
            return bad("uniform_side_fraction must lie in [0, 1]");
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite");
        }
        if self.agent != 1 && self.agent != 2 {
            return bad("agent must be 1 or 2");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr_z > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    fn scheme_for(&self, terminal: &Terminal) -> RewardScheme {
        match (self.reward, terminal) {
            (Some(s), _) => s,
            (None, Terminal::Outcome(_)) => RewardScheme::BranchAdjusted { lambda: self.lambda },
            (None, Terminal::LogRewards(_)) => RewardScheme::Direct,
        }
    }
}

/// FIFO buffer of the most recent items, sampled with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, item: T) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.items[rng.gen_range(0..self.items.len())].clone()).collect()
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Step {
        epoch: u64,
        step: u64,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        log_z: Option<f64>,
    },
    Epoch {
        epoch: u64,
        step: u64,
        mean_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        vs_uniform: Option<Rates>,
        #[serde(skip_serializing_if = "Option::is_none")]
        flow_mae: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        edge_mae: Option<f64>,
    },
}

/// What a finished epoch says about continuing.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub metrics: Metrics,
    pub stop: bool,
}

fn sample_env<R: Rng>(probs: &[f64], actions: &[usize], rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>();
    for (&a, &p) in actions.iter().zip(probs) {
        if u < p {
            return a;
        }
        u -= p;
    }
    *actions.last().unwrap()
}

/// Samples one complete trajectory. Player `p` moves uniformly when
/// `uniform_sides[p - 1]` is set, otherwise from the model at
/// `temperature`. Rewards are attached per `scheme_for`.
pub fn generate_trajectory<E: TreeEnv, M: PolicyModel, R: Rng>(
    env: &E,
    model: &M,
    cfg: &TrainConfig,
    uniform_sides: [bool; 2],
    rng: &mut R,
) -> Result<Trajectory, TrainError> {
    let mut traj = Trajectory::new();
    let mut s = env.root();
    while let Some(owner) = env.owner_of(&s) {
        let mask = env.legal_actions(&s);
        let actions: Vec<usize> = mask.iter().collect();
        let a = match owner {
            Owner::Env => sample_env(&env.transition_probs(&s), &actions, rng),
            Owner::Player(p) if uniform_sides.get(p as usize - 1).copied().unwrap_or(true) => {
                actions[rng.gen_range(0..actions.len())]
            }
            Owner::Player(p) => {
                let input = PolicyInput::new(env, &s, p, model.wants_features())?;
                sample_action(&model.log_probs(&input), &mask, cfg.temperature, rng)?
            }
        };
        s = traj.record(env, &s, a)?;
    }
    let terminal = env.terminal(&s).ok_or_else(|| EnvError::InvalidTrajectory("terminal without payload".into()))?;
    let lb = trajectory_log_branch(&traj, env.num_players())?;
    traj.finish(cfg.scheme_for(&terminal).log_rewards(&terminal, &lb)?)?;
    Ok(traj)
}

/// Serializable state of a trajectory-balance run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TbState {
    pub config: TrainConfig,
    pub model: AnyModel,
    pub buffer: ReplayBuffer<Trajectory>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
}

/// Trajectory balance with a policy model on any two-player alternating
/// environment.
pub struct TbTrainer<'e, E: TreeEnv> {
    env: &'e E,
    pub state: TbState,
}

impl<'e, E: TreeEnv> TbTrainer<'e, E> {
    pub fn new(env: &'e E, config: TrainConfig, model: AnyModel) -> Result<Self, TrainError> {
        config.validate()?;
        if config.objective != ObjectiveKind::Tb {
            return Err(TrainError::Config("trajectory-balance trainer needs objective = tb".into()));
        }
        if env.num_players() != 2 {
            return Err(TrainError::Config("trajectory balance here is defined for two-player games".into()));
        }
        let state = TbState {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            epoch: 0,
            model,
            config,
        };
        Ok(TbTrainer { env, state })
    }

    pub fn resume(env: &'e E, state: TbState) -> Result<Self, TrainError> {
        state.config.validate()?;
        Ok(TbTrainer { env, state })
    }

    pub fn model(&self) -> &AnyModel {
        &self.state.model
    }

    fn uniform_sides(&self) -> [bool; 2] {
        let c = &self.state.config;
        let u = c.uniform_behavior;
        match c.opponent {
            OpponentMode::SelfPlay | OpponentMode::FixedUniformBoth => [u, u],
            OpponentMode::FixedUniform if c.agent == 1 => [u, true],
            OpponentMode::FixedUniform => [true, u],
        }
    }

    pub fn fill_buffer(&mut self, n: usize) -> Result<(), TrainError> {
        let base = self.uniform_sides();
        let frac = self.state.config.uniform_side_fraction;
        for _ in 0..n {
            let mut sides = base;
            if frac > 0.0 && self.state.rng.gen::<f64>() < frac {
                sides[self.state.rng.gen_range(0..2)] = true;
            }
            let t = generate_trajectory(self.env, &self.state.model, &self.state.config, sides, &mut self.state.rng)?;
            self.state.buffer.push(t);
        }
        Ok(())
    }

    /// Loss and gradient of one batch, without updating.
    pub fn batch_loss(&mut self, batch: &[Trajectory]) -> Result<f64, TrainError> {
        let env = self.env;
        let model = &mut self.state.model;
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for traj in batch {
            let mut s = env.root();
            let mut inputs = Vec::with_capacity(traj.len());
            let mut lps = Vec::with_capacity(traj.len());
            for st in &traj.steps {
                let side = match st.curr_player {
                    Owner::Player(p) => p,
                    Owner::Env => return Err(ObjectiveError::NotAlternating.into()),
                };
                let input = PolicyInput::new(env, &s, side, model.wants_features())?;
                lps.push(model.log_probs(&input)[st.action]);
                inputs.push(input);
                s = env.apply(&s, st.action);
            }
            let l = tb_loss(traj, model.log_z(), &lps)?;
            total += l.term.loss;
            model.accumulate_log_z(l.d_log_z * scale);
            for ((input, st), d) in inputs.iter().zip(&traj.steps).zip(&l.d_step_log_probs) {
                let mut g = vec![0.0; model.action_space_size()];
                g[st.action] = d * scale;
                model.accumulate(input, &g);
            }
        }
        Ok(total * scale)
    }

    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let batch = self.state.buffer.sample(self.state.config.batch_size, &mut self.state.rng);
        let loss = self.batch_loss(&batch)?;
        let step = self.state.step;
        let fail = |reason: String| TrainError::NonFinite {
            step,
            reason,
            batch: batch.iter().map(Trajectory::to_json_line).collect(),
        };
        if !loss.is_finite() {
            return Err(fail(format!("loss {loss}")));
        }
        self.state.model.step().map_err(|e| fail(e.to_string()))?;
        self.state.step += 1;
        Ok(loss)
    }

    fn step_budget_left(&self) -> bool {
        self.state.config.max_steps.map_or(true, |m| self.state.step < m)
    }

    pub fn finished(&self) -> bool {
        self.state.epoch as usize >= self.state.config.epochs || !self.step_budget_left()
    }

    /// One epoch; `sink` receives every metrics record.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&Metrics)) -> Result<EpochReport, TrainError> {
        let k = self.state.config.trajectories_per_epoch;
        self.fill_buffer(k)?;
        let mut sum = 0.0;
        let mut n = 0;
        for _ in 0..self.state.config.steps_per_epoch {
            if !self.step_budget_left() {
                break;
            }
            let loss = self.train_step()?;
            sum += loss;
            n += 1;
            sink(&Metrics::Step {
                epoch: self.state.epoch,
                step: self.state.step,
                loss,
                log_z: Some(self.state.model.log_z()),
            });
        }
        let games = self.state.config.eval_games;
        let vs_uniform = if games > 0 {
            let seed = match_seed(self.state.config.seed, 7, self.state.epoch as usize, 0);
            Some(greedy_rates_vs_uniform(self.env, &self.state.model, games, seed)?)
        } else {
            None
        };
        self.state.epoch += 1;
        let metrics = Metrics::Epoch {
            epoch: self.state.epoch - 1,
            step: self.state.step,
            mean_loss: sum / n.max(1) as f64,
            vs_uniform,
            flow_mae: None,
            edge_mae: None,
        };
        sink(&metrics);
        let unbeaten = vs_uniform.is_some_and(|r| r.loss == 0.0);
        Ok(EpochReport { stop: self.state.config.stop_when_unbeaten && unbeaten, metrics })
    }

    /// Runs epochs until the configured count, the step budget, or an early
    /// stop.
    pub fn run(&mut self, sink: &mut dyn FnMut(&Metrics)) -> Result<Vec<Metrics>, TrainError> {
        let mut out = Vec::new();
        while !self.finished() {
            let r = self.run_epoch(sink)?;
            out.push(r.metrics);
            if r.stop {
                break;
            }
        }
        Ok(out)
    }
}

/// How one learner sees the states it does not own during self-play: the
/// other learner's policy is its environment.
struct OpponentView<'a> {
    tree: &'a ExpandedTree,
    me: &'a TabularFlowModel,
    other: Option<&'a TabularFlowModel>,
}

impl FlowParams for OpponentView<'_> {
    fn log_flow(&self, node: usize) -> f64 {
        self.me.log_flow(node)
    }
    fn log_policy(&self, child: usize) -> f64 {
        self.me.log_policy(child)
    }
    fn log_env(&self, child: usize) -> f64 {
        match (self.other, self.tree.parent(child).and_then(|p| self.tree.owner(p))) {
            (Some(o), Some(Owner::Player(q))) if q == o.agent() => o.log_policy(child),
            _ => self.me.log_env(child),
        }
    }
    fn log_q(&self, child: usize) -> f64 {
        self.me.log_q(child)
    }
}

/// Serializable state of a tree-based run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeState {
    pub config: TrainConfig,
    pub models: Vec<TabularFlowModel>,
    pub buffer: ReplayBuffer<Vec<u32>>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
}

/// Detailed-balance family (EDB, stochastic-GFN DB, naive DB) with tabular
/// flows over an expanded tree. Replayed items are root-to-leaf node paths.
pub struct TreeTrainer<'t> {
    tree: &'t ExpandedTree,
    rewards: Vec<Vec<f64>>,
    exact: Vec<FlowTable>,
    mae_nodes: Vec<usize>,
    pub state: TreeState,
}

fn learners(tree: &ExpandedTree, cfg: &TrainConfig) -> Vec<u8> {
    let players: Vec<u8> = (1..=tree.num_players() as u8).collect();
    if players.len() < 2 || cfg.objective != ObjectiveKind::Edb {
        return vec![cfg.agent.min(players.len().max(1) as u8)];
    }
    match cfg.opponent {
        OpponentMode::FixedUniform => vec![cfg.agent],
        OpponentMode::SelfPlay | OpponentMode::FixedUniformBoth => players,
    }
}

impl<'t> TreeTrainer<'t> {
    pub fn new(tree: &'t ExpandedTree, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if config.objective == ObjectiveKind::Tb {
            return Err(TrainError::Config("tree trainer handles edb, stoch_gfn and naive_gfn".into()));
        }
        let models = learners(tree, &config)
            .into_iter()
            .map(|a| TabularFlowModel::new(tree, a, config.learn_env, config.adam))
            .collect();
        let mut t = Self::resume(tree, TreeState {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            epoch: 0,
            models,
            config,
        })?;
        // terminal flows are fixed to the rewards
        let init = t.state.config.init_log_flow;
        for m in &mut t.state.models {
            let r = &t.rewards[m.agent() as usize - 1];
            for n in 0..tree.len() {
                m.log_flow[n] = if tree.is_terminal(n) { r[n] } else { init };
            }
        }
        Ok(t)
    }

    pub fn resume(tree: &'t ExpandedTree, state: TreeState) -> Result<Self, TrainError> {
        let cfg = &state.config;
        cfg.validate()?;
        if cfg.objective != ObjectiveKind::Edb {
            let foreign = (0..tree.len())
                .any(|n| matches!(tree.owner(n), Some(Owner::Player(p)) if p != cfg.agent));
            if foreign {
                return Err(TrainError::Config(
                    "stochastic and naive GFlowNets need a tree where only the agent and the environment move".into(),
                ));
            }
        }
        let scheme = match tree.terminals().next().and_then(|x| tree.terminal(x)) {
            Some(t) => cfg.scheme_for(t),
            None => RewardScheme::Direct,
        };
        let rewards = tree_log_rewards(tree, scheme)?;
        let selfplay = cfg.objective == ObjectiveKind::Edb
            && cfg.opponent == OpponentMode::SelfPlay
            && tree.num_players() == 2;
        let exact = if selfplay {
            vec![solve_afn(tree, &rewards)?]
        } else {
            state
                .models
                .iter()
                .map(|m| solve_eflow(tree, &rewards[m.agent() as usize - 1], m.agent()))
                .collect::<Result<_, _>>()?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(match_seed(cfg.seed, 11, 0, 0));
        let mut seen = vec![false; tree.len()];
        for _ in 0..cfg.mae_rollouts {
            let mut n = 0;
            loop {
                seen[n] = true;
                let kids = tree.children(n);
                if kids.is_empty() {
                    break;
                }
                n = kids.start + rng.gen_range(0..kids.len());
            }
        }
        let mae_nodes = (0..tree.len()).filter(|&n| seen[n]).collect();
        Ok(TreeTrainer { tree, rewards, exact, mae_nodes, state })
    }

    pub fn models(&self) -> &[TabularFlowModel] {
        &self.state.models
    }

    pub fn model_for(&self, agent: u8) -> Option<&TabularFlowModel> {
        self.state.models.iter().find(|m| m.agent() == agent)
    }

    pub fn log_rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    /// Exact log-flows of `agent` under the run's setting.
    pub fn exact_log_flows(&self, agent: u8) -> &[f64] {
        if self.exact.len() == 1 && self.exact[0].players().contains(&agent) {
            self.exact[0].log_flows(agent)
        } else {
            let i = self.state.models.iter().position(|m| m.agent() == agent).expect("learner");
            self.exact[i].log_flows(agent)
        }
    }

    fn exact_edge_log_prob(&self, agent: u8, child: usize) -> f64 {
        if self.exact.len() == 1 {
            self.exact[0].edge_log_prob(child)
        } else {
            let i = self.state.models.iter().position(|m| m.agent() == agent).expect("learner");
            self.exact[i].edge_log_prob(child)
        }
    }

    fn sample_path(&mut self, designated: Option<u8>) -> Vec<u32> {
        let tree = self.tree;
        let cfg = &self.state.config;
        let mut path = vec![0u32];
        let mut n = 0;
        while let Some(owner) = tree.owner(n) {
            let kids = tree.children(n);
            let rng = &mut self.state.rng;
            let learner = match owner {
                Owner::Player(p) if designated.map_or(true, |d| d == p) => {
                    self.state.models.iter().find(|m| m.agent() == p)
                }
                _ => None,
            };
            n = match (owner, learner) {
                (Owner::Env, _) => {
                    let probs: Vec<f64> = kids.clone().map(|c| tree.log_env_prob(c).exp()).collect();
                    sample_env(&probs, &kids.clone().collect::<Vec<_>>(), rng)
                }
                (_, Some(m)) if !cfg.uniform_behavior => {
                    let lp: Vec<f64> = kids.clone().map(|c| m.log_policy(c)).collect();
                    let mask = crate::env::ActionMask::full(lp.len());
                    kids.start + sample_action(&lp, &mask, cfg.temperature, rng).expect("non-empty")
                }
                _ => kids.start + rng.gen_range(0..kids.len()),
            };
            path.push(n as u32);
        }
        path
    }

    pub fn fill_buffer(&mut self, n: usize) {
        let both = self.state.config.opponent == OpponentMode::FixedUniformBoth && self.state.models.len() == 2;
        let single = self.state.config.opponent == OpponentMode::FixedUniform;
        for i in 0..n {
            let designated = if both {
                Some(1 + (i % 2) as u8)
            } else if single {
                Some(self.state.config.agent)
            } else {
                None
            };
            let p = self.sample_path(designated);
            self.state.buffer.push(p);
        }
    }

    fn terms_for(&self, agent: u8, path: &[u32]) -> Vec<EdbTerm> {
        let tree = self.tree;
        let mut out = Vec::new();
        for (k, &n) in path.iter().enumerate() {
            let n = n as usize;
            match tree.owner(n) {
                None => out.push(EdbTerm::Terminal(n)),
                Some(Owner::Player(p)) if p == agent => out.extend(tree.children(n).map(EdbTerm::AgentEdge)),
                Some(_) if tree.num_children(n) > self.state.config.q_threshold => {
                    out.push(EdbTerm::EnvEdgeQ(path[k + 1] as usize))
                }
                Some(_) => out.push(EdbTerm::EnvState(n)),
            }
        }
        out
    }

    /// Loss of a batch of paths for every learner; returns per-learner
    /// gradients and the summed mean loss.
    pub fn batch_loss(&self, batch: &[Vec<u32>]) -> Result<(f64, Vec<FlowGrads>), TrainError> {
        let tree = self.tree;
        let cfg = &self.state.config;
        let selfplay = cfg.opponent == OpponentMode::SelfPlay && self.state.models.len() == 2;
        let mut total = LossValue::default();
        let mut all = Vec::new();
        for (i, m) in self.state.models.iter().enumerate() {
            let a = m.agent();
            let r = &self.rewards[a as usize - 1];
            let view = OpponentView { tree, me: m, other: if selfplay { Some(&self.state.models[1 - i]) } else { None } };
            let mut g = FlowGrads::default();
            let mut observed = Vec::new();
            for path in batch {
                let l = match cfg.objective {
                    ObjectiveKind::Edb => edb_losses(tree, a, &view, r, &self.terms_for(a, path), &mut g)?,
                    ObjectiveKind::StochGfn | ObjectiveKind::NaiveGfn => {
                        let edges: Vec<usize> = path[1..].iter().map(|&x| x as usize).collect();
                        let leaf = [*path.last().unwrap() as usize];
                        if cfg.objective == ObjectiveKind::StochGfn {
                            stochgfn_db_loss(tree, &view, r, &edges, &leaf, &mut g)?
                        } else {
                            naive_db_loss(tree, &view, r, &edges, &leaf, &mut g)?
                        }
                    }
                    ObjectiveKind::Tb => unreachable!("rejected at construction"),
                };
                total.merge(&l);
                observed.extend(
                    path[1..]
                        .iter()
                        .map(|&c| c as usize)
                        .filter(|&c| tree.owner(tree.parent(c).unwrap()) == Some(Owner::Env)),
                );
            }
            g.log_env.clear();
            g.log_flow.retain(|&k, _| !tree.is_terminal(k));
            if cfg.learn_env {
                let mut ge = FlowGrads::default();
                let nll = env_model_nll(&view, &observed, &mut ge);
                total.total += cfg.env_model_weight * nll.total;
                for (k, v) in ge.log_env {
                    g.log_env.insert(k, v * cfg.env_model_weight);
                }
            }
            all.push(g);
        }
        Ok((total.total / batch.len().max(1) as f64, all))
    }

    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let cfg = self.state.config.clone();
        let batch = self.state.buffer.sample(cfg.batch_size, &mut self.state.rng);
        let (loss, grads) = self.batch_loss(&batch)?;
        let step = self.state.step;
        let fail = |reason: String| TrainError::NonFinite {
            step,
            reason,
            batch: batch.iter().map(|p| serde_json::to_string(p).expect("path")).collect(),
        };
        if !loss.is_finite() {
            return Err(fail(format!("loss {loss}")));
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        for (m, g) in self.state.models.iter_mut().zip(&grads) {
            m.apply(g, scale).map_err(|e| fail(e.to_string()))?;
        }
        self.state.step += 1;
        Ok(loss)
    }

    /// Mean absolute error of linear flows over the metric states, averaged
    /// over learners.
    pub fn flow_mae(&self) -> f64 {
        let mut total = 0.0;
        for m in &self.state.models {
            let exact = self.exact_log_flows(m.agent());
            total += crate::eval::flow_mae(|n| m.log_flow[n], exact, &self.mae_nodes).expect("in range");
        }
        total / self.state.models.len() as f64
    }

    /// Same for edge flows out of each learner's own metric states.
    pub fn edge_mae(&self) -> f64 {
        let tree = self.tree;
        let mut total = 0.0;
        for m in &self.state.models {
            let a = m.agent();
            let exact = self.exact_log_flows(a);
            let edges: Vec<usize> = self
                .mae_nodes
                .iter()
                .filter(|&&n| tree.owner(n) == Some(Owner::Player(a)))
                .flat_map(|&n| tree.children(n))
                .collect();
            let learned = |c: usize| m.log_flow[tree.parent(c).unwrap()] + m.log_policy(c);
            let truth = |c: usize| Some(exact[tree.parent(c).unwrap()] + self.exact_edge_log_prob(a, c));
            total += crate::eval::edge_flow_mae(learned, truth, &edges).expect("in range");
        }
        total / self.state.models.len() as f64
    }

    /// Greedy learners against uniform opponents; each learner plays its
    /// own side. `None` when the tree is not a two-player game.
    pub fn rates_vs_uniform(&self, games: usize, seed: u64) -> Option<Rates> {
        let tree = self.tree;
        if tree.num_players() != 2 || games == 0 {
            return None;
        }
        let (mut w, mut d, mut l) = (0usize, 0usize, 0usize);
        for g in 0..games {
            let m = &self.state.models[g % self.state.models.len()];
            let a = m.agent();
            let mut rng = ChaCha8Rng::seed_from_u64(match_seed(seed, 3, 0, g));
            let mut n = 0;
            while let Some(owner) = tree.owner(n) {
                let kids = tree.children(n);
                n = if owner == Owner::Player(a) {
                    kids.clone().fold(kids.start, |b, c| if m.log_policy(c) > m.log_policy(b) { c } else { b })
                } else if owner == Owner::Env {
                    let probs: Vec<f64> = kids.clone().map(|c| tree.log_env_prob(c).exp()).collect();
                    sample_env(&probs, &kids.clone().collect::<Vec<_>>(), &mut rng)
                } else {
                    kids.start + rng.gen_range(0..kids.len())
                };
            }
            match tree.terminal(n) {
                Some(Terminal::Outcome(o)) => match o.sign_for(a) {
                    1 => w += 1,
                    0 => d += 1,
                    _ => l += 1,
                },
                _ => return None,
            }
        }
        let t = games as f64;
        Some(Rates { games, win: w as f64 / t, draw: d as f64 / t, loss: l as f64 / t })
    }

    fn step_budget_left(&self) -> bool {
        self.state.config.max_steps.map_or(true, |m| self.state.step < m)
    }

    pub fn finished(&self) -> bool {
        self.state.epoch as usize >= self.state.config.epochs || !self.step_budget_left()
    }

    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&Metrics)) -> Result<EpochReport, TrainError> {
        let k = self.state.config.trajectories_per_epoch;
        self.fill_buffer(k);
        let mut sum = 0.0;
        let mut n = 0;
        for _ in 0..self.state.config.steps_per_epoch {
            if !self.step_budget_left() {
                break;
            }
            let loss = self.train_step()?;
            sum += loss;
            n += 1;
            sink(&Metrics::Step { epoch: self.state.epoch, step: self.state.step, loss, log_z: None });
        }
        let seed = match_seed(self.state.config.seed, 7, self.state.epoch as usize, 0);
        let vs_uniform = self.rates_vs_uniform(self.state.config.eval_games, seed);
        self.state.epoch += 1;
        let metrics = Metrics::Epoch {
            epoch: self.state.epoch - 1,
            step: self.state.step,
            mean_loss: sum / n.max(1) as f64,
            vs_uniform,
            flow_mae: Some(self.flow_mae()),
            edge_mae: Some(self.edge_mae()),
        };
        sink(&metrics);
        let unbeaten = vs_uniform.is_some_and(|r| r.loss == 0.0);
        Ok(EpochReport { stop: self.state.config.stop_when_unbeaten && unbeaten, metrics })
    }

    pub fn run(&mut self, sink: &mut dyn FnMut(&Metrics)) -> Result<Vec<Metrics>, TrainError> {
        let mut out = Vec::new();
        while !self.finished() {
            let r = self.run_epoch(sink)?;
            out.push(r.metrics);
            if r.stop {
                break;
            }
        }
        Ok(out)
    }
}

/// Fraction of finished games `winner` took, for quick summaries.
pub fn win_fraction(outcomes: &[Outcome], player: u8) -> f64 {
    outcomes.iter().filter(|o| o.winner() == Some(player)).count() as f64 / outcomes.len().max(1) as f64
}
