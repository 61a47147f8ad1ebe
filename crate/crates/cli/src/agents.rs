//! Agent specs such as `uniform`, `perfect`, `search:3`, `exact_afn:10` or
//! `checkpoint:runs/ttt/checkpoint.json`, optionally prefixed by `name=`.

use std::path::Path;
use std::sync::Arc;

use afn_core::eval::{Agent, ExactAfnAgent, ModelAgent, PerfectAgent, SearchAgent, UniformAgent};
use afn_core::exact::PositionalAfn;
use afn_core::games::{Board, BoardGame};

use crate::checkpoint::Checkpoint;
use crate::CliError;

/// Largest position table the exact agent will build.
pub const EXACT_AFN_LIMIT: usize = 1 << 23;

#[derive(Debug, Clone, PartialEq)]
pub enum AgentKind {
    Uniform,
    Perfect,
    Search(u32),
    ExactAfn(f64),
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub name: String,
    pub kind: AgentKind,
}

impl AgentSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = text.trim();
        let (name, body) = match text.split_once('=') {
            Some((n, b)) if !n.contains(':') => (n.trim().to_string(), b.trim()),
            _ => (text.to_string(), text),
        };
        let bad = |m: &str| CliError::config("agents", &format!("{m} in agent spec {text:?}"));
        let (head, arg) = match body.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (body, None),
        };
        let kind = match (head, arg) {
            ("uniform", None) => AgentKind::Uniform,
            ("perfect", None) => AgentKind::Perfect,
            ("search", Some(d)) => AgentKind::Search(d.parse().map_err(|_| bad("bad search depth"))?),
            ("exact_afn", Some(l)) => AgentKind::ExactAfn(l.parse().map_err(|_| bad("bad lambda"))?),
            ("checkpoint", Some(p)) if !p.is_empty() => AgentKind::Checkpoint(p.to_string()),
            _ => return Err(bad("unknown agent")),
        };
        Ok(AgentSpec { name, kind })
    }

    /// Builds the agent for `game`; the checkpoint's game must match.
    pub fn build(&self, game: &BoardGame) -> Result<Box<dyn Agent<BoardGame>>, CliError> {
        Ok(match &self.kind {
            AgentKind::Uniform => Box::new(UniformAgent::named(&self.name)),
            AgentKind::Perfect => Box::new(Named::new(&self.name, PerfectAgent::new(game.clone()))),
            AgentKind::Search(d) => Box::new(Named::new(&self.name, SearchAgent::new(game.clone(), *d))),
            AgentKind::ExactAfn(l) => {
                let afn = PositionalAfn::solve(game, *l, Board::default(), EXACT_AFN_LIMIT)?;
                Box::new(ExactAfnAgent::new(&self.name, Arc::new(afn)))
            }
            AgentKind::Checkpoint(p) => {
                let c = Checkpoint::load(Path::new(p))?;
                if c.env.board_spec() != Some(*game.spec()) {
                    return Err(CliError::config("agents", &format!("checkpoint {p} was trained on another game")));
                }
                let model = c
                    .policy_model()
                    .ok_or_else(|| CliError::config("agents", &format!("checkpoint {p} holds no policy model")))?;
                Box::new(ModelAgent::greedy(&self.name, model))
            }
        })
    }
}

/// Renames an agent without changing how it plays.
struct Named<A> {
    name: String,
    inner: A,
}

impl<A> Named<A> {
    fn new(name: &str, inner: A) -> Self {
        Named { name: name.into(), inner }
    }
}

impl<A: Agent<BoardGame>> Agent<BoardGame> for Named<A> {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(
        &mut self,
        env: &BoardGame,
        s: &afn_core::games::BoardState,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<afn_core::env::Action, afn_core::eval::EvalError> {
        self.inner.act(env, s, rng)
    }

    fn policy(&mut self, env: &BoardGame, s: &afn_core::games::BoardState) -> Option<Vec<f64>> {
        self.inner.policy(env, s)
    }
}
