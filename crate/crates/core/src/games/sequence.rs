//! Autoregressive sequence generation where the environment may corrupt
//! each appended symbol.
//!
//! Even depths are agent states choosing a symbol. Each is followed by an
//! environment state that keeps the chosen symbol with probability
//! `1 - alpha + alpha / A` and substitutes each other symbol with
//! probability `alpha / A`. Terminals at depth `2L` score `f(x)^beta`, with
//! `f` a normalized position-weight-matrix score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMask, EnvError, Owner, Terminal, TreeEnv, MAX_ACTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEnvSpec {
    pub length: usize,
    pub alphabet: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Explicit `length x alphabet` weights; drawn from `seed` when absent.
    #[serde(default)]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

impl SequenceEnvSpec {
    pub fn new(length: usize, alphabet: usize, alpha: f64, beta: f64) -> Self {
        SequenceEnvSpec { length, alphabet, alpha, beta, weights: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEnv {
    spec: SequenceEnvSpec,
    weights: Vec<Vec<f64>>,
    norm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqState {
    pub history: Vec<u8>,
}

impl SeqState {
    /// Symbols realized by the environment so far.
    pub fn sequence(&self) -> Vec<u8> {
        self.history.iter().skip(1).step_by(2).copied().collect()
    }
}

pub fn make_sequence_env(spec: SequenceEnvSpec) -> Result<SequenceEnv, EnvError> {
    SequenceEnv::new(spec)
}

impl SequenceEnv {
    pub fn new(spec: SequenceEnvSpec) -> Result<Self, EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidSpec(m.to_string()));
        if spec.length == 0 || spec.alphabet == 0 || spec.alphabet > MAX_ACTIONS {
            return bad("sequence length and alphabet must be positive, alphabet at most 64");
        }
        if !(0.0..=1.0).contains(&spec.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(spec.beta > 0.0) {
            return bad("beta must be positive");
        }
        let weights = match &spec.weights {
            Some(w) => {
                if w.len() != spec.length || w.iter().any(|row| row.len() != spec.alphabet) {
                    return bad("weights must be a length x alphabet table");
                }
                if w.iter().flatten().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return bad("weights must be positive");
                }
                w.clone()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                (0..spec.length).map(|_| (0..spec.alphabet).map(|_| rng.gen_range(0.05..1.0)).collect()).collect()
            }
        };
        let norm = weights.iter().map(|row: &Vec<f64>| row.iter().cloned().fold(f64::MIN, f64::max)).sum();
        Ok(SequenceEnv { spec, weights, norm })
    }

    pub fn spec(&self) -> &SequenceEnvSpec {
        &self.spec
    }

    /// Base score in (0, 1].
    pub fn score(&self, seq: &[u8]) -> f64 {
        seq.iter().enumerate().map(|(i, &x)| self.weights[i][x as usize]).sum::<f64>() / self.norm
    }

    pub fn log_reward(&self, seq: &[u8]) -> f64 {
        self.spec.beta * self.score(seq).ln()
    }

    fn is_env_depth(depth: usize) -> bool {
        depth % 2 == 1
    }
}

impl TreeEnv for SequenceEnv {
    type State = SeqState;

    fn num_players(&self) -> usize {
        1
    }

    fn action_space_size(&self) -> usize {
        self.spec.alphabet
    }

    fn root(&self) -> SeqState {
        SeqState { history: Vec::new() }
    }

    fn history<'a>(&self, s: &'a SeqState) -> &'a [u8] {
        &s.history
    }

    fn legal_actions(&self, s: &SeqState) -> ActionMask {
        let d = s.history.len();
        let width = self.spec.alphabet;
        if d >= 2 * self.spec.length {
            ActionMask::empty(width)
        } else if Self::is_env_depth(d) && self.spec.alpha == 0.0 {
            let mut m = ActionMask::empty(width);
            m.insert(*s.history.last().unwrap() as usize);
            m
        } else {
            ActionMask::full(width)
        }
    }

    fn owner_of(&self, s: &SeqState) -> Option<Owner> {
        let d = s.history.len();
        if d >= 2 * self.spec.length {
            None
        } else if Self::is_env_depth(d) {
            Some(Owner::Env)
        } else {
            Some(Owner::Player(1))
        }
    }

    fn apply(&self, s: &SeqState, action: Action) -> SeqState {
        let mut history = s.history.clone();
        history.push(action as u8);
        SeqState { history }
    }

    fn transition_probs(&self, s: &SeqState) -> Vec<f64> {
        let (a, alpha) = (self.spec.alphabet, self.spec.alpha);
        if alpha == 0.0 {
            return vec![1.0];
        }
        let chosen = *s.history.last().unwrap() as usize;
        let other = alpha / a as f64;
        (0..a).map(|x| if x == chosen { 1.0 - alpha + other } else { other }).collect()
    }

    fn terminal(&self, s: &SeqState) -> Option<Terminal> {
        if s.history.len() >= 2 * self.spec.length {
            Some(Terminal::LogRewards(vec![self.log_reward(&s.sequence())]))
        } else {
            None
        }
    }

    fn features(&self, s: &SeqState) -> Vec<f64> {
        let a = self.spec.alphabet;
        let mut v = vec![0.0; 2 * self.spec.length * a];
        for (i, &x) in s.history.iter().enumerate() {
            v[i * a + x as usize] = 1.0;
        }
        v
    }

    fn feature_shape(&self) -> [usize; 3] {
        [1, 2 * self.spec.length, self.spec.alphabet]
    }
}
