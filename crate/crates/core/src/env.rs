//! Tree-structured environment contract shared by every game, plus
//! trajectory recording.
//!
//! States are identified by their full action history ([`StateKey`]), so the
//! reachable state graph of every environment is a tree even when the
//! underlying positions transpose.

use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Action = usize;

/// Maximum width of an action mask.
pub const MAX_ACTIONS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("state {0} is terminal")]
    Terminal(StateKey),
    #[error("state {0} is not terminal")]
    NotTerminal(StateKey),
    #[error("state {state} is owned by {owner}, not by the environment")]
    NotEnvState { state: StateKey, owner: Owner },
    #[error("action {action} is illegal at state {state}")]
    IllegalAction { state: StateKey, action: Action },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("malformed state key {0:?}")]
    BadKey(String),
}

/// Who moves at a nonterminal state. Players are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Player(u8),
    Env,
}

impl Owner {
    /// Zero-based player index, `None` for the environment.
    pub fn player_index(self) -> Option<usize> {
        match self {
            Owner::Player(p) => Some(p as usize - 1),
            Owner::Env => None,
        }
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Player(p) => write!(f, "player {p}"),
            Owner::Env => f.write_str("environment"),
        }
    }
}

// Players serialize as their number, the environment as the string "env".
impl Serialize for Owner {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Owner::Player(p) => s.serialize_u8(*p),
            Owner::Env => s.serialize_str("env"),
        }
    }
}

impl<'de> Deserialize<'de> for Owner {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(u8),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(0) => Err(D::Error::custom("players are numbered from 1")),
            Repr::Num(p) => Ok(Owner::Player(p)),
            Repr::Str(s) if s == "env" => Ok(Owner::Env),
            Repr::Str(s) => Err(D::Error::custom(format!("unknown owner {s:?}"))),
        }
    }
}

/// Full action history from the root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey(Vec<u8>);

impl StateKey {
    pub fn root() -> Self {
        StateKey(Vec::new())
    }

    pub fn from_history(history: &[u8]) -> Self {
        StateKey(history.to_vec())
    }

    pub fn history(&self) -> &[u8] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, action: Action) -> Self {
        let mut h = self.0.clone();
        h.push(action as u8);
        StateKey(h)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(StateKey(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Canonical byte encoding: a length byte followed by the actions.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() + 1);
        out.push(self.0.len() as u8);
        out.extend_from_slice(&self.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvError> {
        match bytes.split_first() {
            Some((&len, rest)) if rest.len() == len as usize => Ok(StateKey(rest.to_vec())),
            _ => Err(EnvError::BadKey(format!("{bytes:?}"))),
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str("]")
    }
}

impl FromStr for StateKey {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| EnvError::BadKey(s.to_string()))?;
        if inner.is_empty() {
            return Ok(StateKey::root());
        }
        inner
            .split('.')
            .map(|t| t.parse::<u8>().map_err(|_| EnvError::BadKey(s.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(StateKey)
    }
}

impl Serialize for StateKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StateKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Fixed-width bit-vector of legal actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ActionMask {
    bits: u64,
    width: u8,
}

impl ActionMask {
    pub fn empty(width: usize) -> Self {
        assert!(width <= MAX_ACTIONS, "action space wider than {MAX_ACTIONS}");
        ActionMask { bits: 0, width: width as u8 }
    }

    pub fn from_bits(bits: u64, width: usize) -> Self {
        let mut m = Self::empty(width);
        m.bits = bits & Self::full_bits(width);
        m
    }

    pub fn full(width: usize) -> Self {
        Self::from_bits(u64::MAX, width)
    }

    fn full_bits(width: usize) -> u64 {
        if width == 64 {
            u64::MAX
        } else {
            (1u64 << width) - 1
        }
    }

    pub fn insert(&mut self, a: Action) {
        debug_assert!(a < self.width as usize);
        self.bits |= 1 << a;
    }

    pub fn contains(&self, a: Action) -> bool {
        a < self.width as usize && self.bits >> a & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    /// Legal actions in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = Action> {
        let mut bits = self.bits;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let a = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(a)
            }
        })
    }

    /// Position of `a` among the legal actions.
    pub fn rank(&self, a: Action) -> Option<usize> {
        if self.contains(a) {
            Some((self.bits & ((1u64 << a) - 1)).count_ones() as usize)
        } else {
            None
        }
    }
}

impl Serialize for ActionMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<u8> = (0..self.width()).map(|a| self.contains(a) as u8).collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ActionMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<u8>::deserialize(d)?;
        if v.len() > MAX_ACTIONS {
            return Err(D::Error::custom("mask wider than 64 actions"));
        }
        let mut m = ActionMask::empty(v.len());
        for (a, b) in v.into_iter().enumerate() {
            match b {
                0 => {}
                1 => m.insert(a),
                _ => return Err(D::Error::custom("mask entries must be 0 or 1")),
            }
        }
        Ok(m)
    }
}

/// Result of a finished two-player game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    P1Win,
    P2Win,
    Draw,
}

impl Outcome {
    /// +1 for a win of `player`, -1 for a loss, 0 for a draw.
    pub fn sign_for(self, player: u8) -> i32 {
        match (self, player) {
            (Outcome::Draw, _) => 0,
            (Outcome::P1Win, 1) | (Outcome::P2Win, 2) => 1,
            _ => -1,
        }
    }

    pub fn winner(self) -> Option<u8> {
        match self {
            Outcome::P1Win => Some(1),
            Outcome::P2Win => Some(2),
            Outcome::Draw => None,
        }
    }
}

/// What a terminal state carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Terminal {
    /// Game result; rewards come from an outcome reward scheme.
    Outcome(Outcome),
    /// Direct per-player log-rewards.
    LogRewards(Vec<f64>),
}

/// A rooted-tree environment.
///
/// Implementations are immutable after construction. `legal_actions` is empty
/// exactly at terminal states, and `owner_of` is `None` exactly there.
pub trait TreeEnv: Send + Sync {
    type State: Clone + Send + Sync + fmt::Debug;

    fn num_players(&self) -> usize;

    fn action_space_size(&self) -> usize;

    fn root(&self) -> Self::State;

    fn history<'a>(&self, s: &'a Self::State) -> &'a [u8];

    fn legal_actions(&self, s: &Self::State) -> ActionMask;

    fn owner_of(&self, s: &Self::State) -> Option<Owner>;

    /// Successor of `s` under a legal action.
    fn apply(&self, s: &Self::State, action: Action) -> Self::State;

    /// Transition probabilities at an environment state, aligned with the
    /// ascending order of `legal_actions`.
    fn transition_probs(&self, s: &Self::State) -> Vec<f64> {
        let n = self.legal_actions(s).count();
        vec![1.0 / n as f64; n]
    }

    fn terminal(&self, s: &Self::State) -> Option<Terminal>;

    /// Key under which a tabular model stores parameters for `s`. Defaults
    /// to the history; games whose optimal policy is position-determined
    /// override it with a position encoding.
    fn table_key(&self, s: &Self::State) -> Vec<u8> {
        self.history(s).to_vec()
    }

    /// Input planes for neural models, laid out as `feature_shape`.
    fn features(&self, s: &Self::State) -> Vec<f64>;

    /// (channels, rows, cols) of `features`.
    fn feature_shape(&self) -> [usize; 3];
}

pub fn key<E: TreeEnv>(env: &E, s: &E::State) -> StateKey {
    StateKey::from_history(env.history(s))
}

pub fn is_terminal<E: TreeEnv>(env: &E, s: &E::State) -> bool {
    env.owner_of(s).is_none()
}

/// All legal children in ascending action order.
pub fn children<E: TreeEnv>(env: &E, s: &E::State) -> Result<Vec<(Action, E::State)>, EnvError> {
    let mask = env.legal_actions(s);
    if mask.is_empty() {
        return Err(EnvError::Terminal(key(env, s)));
    }
    Ok(mask.iter().map(|a| (a, env.apply(s, a))).collect())
}

pub fn owner<E: TreeEnv>(env: &E, s: &E::State) -> Result<Owner, EnvError> {
    env.owner_of(s).ok_or_else(|| EnvError::Terminal(key(env, s)))
}

/// Distribution over the children of an environment-owned state.
pub fn env_transition<E: TreeEnv>(env: &E, s: &E::State) -> Result<Vec<(Action, f64)>, EnvError> {
    match owner(env, s)? {
        Owner::Env => {
            let mask = env.legal_actions(s);
            Ok(mask.iter().zip(env.transition_probs(s)).collect())
        }
        o => Err(EnvError::NotEnvState { state: key(env, s), owner: o }),
    }
}

/// Applies `action` after checking that it is legal.
pub fn step<E: TreeEnv>(env: &E, s: &E::State, action: Action) -> Result<E::State, EnvError> {
    let mask = env.legal_actions(s);
    if mask.is_empty() {
        return Err(EnvError::Terminal(key(env, s)));
    }
    if !mask.contains(action) {
        return Err(EnvError::IllegalAction { state: key(env, s), action });
    }
    Ok(env.apply(s, action))
}

/// Rebuilds the state addressed by a history key.
pub fn replay<E: TreeEnv>(env: &E, k: &StateKey) -> Result<E::State, EnvError> {
    let mut s = env.root();
    for &a in k.history() {
        s = step(env, &s, a as Action)?;
    }
    Ok(s)
}

/// One recorded decision: `(state, mask, curr_player, action, done, log_reward)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateKey,
    pub mask: ActionMask,
    pub curr_player: Owner,
    pub action: Action,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_reward: Option<Vec<f64>>,
}

/// A complete (or in-progress) root-to-leaf episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.steps.last().is_some_and(|s| s.done)
    }

    /// Records the decision `action` taken at `s`.
    pub fn record<E: TreeEnv>(&mut self, env: &E, s: &E::State, action: Action) -> Result<E::State, EnvError> {
        let curr_player = owner(env, s)?;
        let next = step(env, s, action)?;
        self.steps.push(Step {
            state: key(env, s),
            mask: env.legal_actions(s),
            curr_player,
            action,
            done: is_terminal(env, &next),
            log_reward: None,
        });
        Ok(next)
    }

    /// Attaches per-player log-rewards to the final step.
    pub fn finish(&mut self, log_rewards: Vec<f64>) -> Result<(), EnvError> {
        match self.steps.last_mut() {
            Some(last) if last.done => {
                last.log_reward = Some(log_rewards);
                Ok(())
            }
            _ => Err(EnvError::InvalidTrajectory("trajectory has not reached a terminal state".into())),
        }
    }

    pub fn log_reward(&self) -> Option<&[f64]> {
        self.steps.last().and_then(|s| s.log_reward.as_deref())
    }

    /// History key of the terminal state.
    pub fn terminal_key(&self) -> Option<StateKey> {
        self.steps.last().map(|s| s.state.child(s.action))
    }

    /// Checks the structural invariants against `env`.
    pub fn validate<E: TreeEnv>(&self, env: &E) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidTrajectory(m));
        let mut s = env.root();
        for (i, st) in self.steps.iter().enumerate() {
            if st.state.history() != env.history(&s) {
                return bad(format!("step {i} state {} does not follow its predecessor", st.state));
            }
            if st.mask != env.legal_actions(&s) {
                return bad(format!("step {i} mask disagrees with the environment"));
            }
            if !st.mask.contains(st.action) {
                return bad(format!("step {i} action {} not in mask", st.action));
            }
            if Some(st.curr_player) != env.owner_of(&s) {
                return bad(format!("step {i} owner mismatch"));
            }
            s = env.apply(&s, st.action);
            let last = i + 1 == self.steps.len();
            if st.done != last || st.done != is_terminal(env, &s) {
                return bad(format!("step {i} done flag inconsistent"));
            }
            if st.log_reward.is_some() != st.done {
                return bad(format!("step {i} log_reward present off the final step"));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_key_round_trips() {
        let k = StateKey::from_history(&[4, 0, 8]);
        assert_eq!(k.to_string(), "[4.0.8]");
        assert_eq!("[4.0.8]".parse::<StateKey>().unwrap(), k);
        assert_eq!(StateKey::from_bytes(&k.to_bytes()).unwrap(), k);
        assert_eq!("[]".parse::<StateKey>().unwrap(), StateKey::root());
        assert!("4.0".parse::<StateKey>().is_err());
        assert!(StateKey::from_bytes(&[3, 1]).is_err());
    }

    #[test]
    fn mask_iterates_in_ascending_order() {
        let mut m = ActionMask::empty(9);
        for a in [8, 2, 5] {
            m.insert(a);
        }
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![2, 5, 8]);
        assert_eq!(m.rank(5), Some(1));
        assert_eq!(m.rank(3), None);
        assert_eq!(serde_json::to_string(&m).unwrap(), "[0,0,1,0,0,1,0,0,1]");
        assert_eq!(ActionMask::full(64).count(), 64);
    }

    #[test]
    fn owner_serializes_as_number_or_env() {
        assert_eq!(serde_json::to_string(&Owner::Player(2)).unwrap(), "2");
        assert_eq!(serde_json::to_string(&Owner::Env).unwrap(), "\"env\"");
        assert_eq!(serde_json::from_str::<Owner>("1").unwrap(), Owner::Player(1));
        assert!(serde_json::from_str::<Owner>("0").is_err());
    }

    #[test]
    fn step_uses_appendix_field_names() {
        let st = Step {
            state: StateKey::from_history(&[1]),
            mask: ActionMask::from_bits(0b101, 3),
            curr_player: Owner::Player(2),
            action: 2,
            done: true,
            log_reward: Some(vec![-1.0, 1.0]),
        };
        let v: serde_json::Value = serde_json::to_value(&st).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["action", "curr_player", "done", "log_reward", "mask", "state"]);
    }
}
