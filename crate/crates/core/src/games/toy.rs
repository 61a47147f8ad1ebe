//! Hand-built trees with explicit owners, environment transitions and
//! terminal payoffs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, ActionMask, EnvError, Outcome, Owner, Terminal, TreeEnv, MAX_ACTIONS};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNode {
    /// `None` for terminals.
    pub owner: Option<Owner>,
    pub children: Vec<usize>,
    /// Transition probabilities, only for environment-owned nodes.
    pub env_probs: Vec<f64>,
    pub terminal: Option<Terminal>,
}

impl ToyNode {
    pub fn agent(player: u8, children: Vec<usize>) -> Self {
        ToyNode { owner: Some(Owner::Player(player)), children, env_probs: Vec::new(), terminal: None }
    }

    pub fn env(children: Vec<usize>, probs: Vec<f64>) -> Self {
        ToyNode { owner: Some(Owner::Env), children, env_probs: probs, terminal: None }
    }

    pub fn reward(reward: f64) -> Self {
        ToyNode { owner: None, children: Vec::new(), env_probs: Vec::new(), terminal: Some(Terminal::LogRewards(vec![reward.ln()])) }
    }

    pub fn outcome(o: Outcome) -> Self {
        ToyNode { owner: None, children: Vec::new(), env_probs: Vec::new(), terminal: Some(Terminal::Outcome(o)) }
    }
}

/// An explicit tree; node 0 is the root. Actions index a node's child list.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStochasticTree {
    nodes: Vec<ToyNode>,
    num_players: usize,
    width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyState {
    pub node: usize,
    pub history: Vec<u8>,
}

impl ToyStochasticTree {
    pub fn new(nodes: Vec<ToyNode>, num_players: usize) -> Result<Self, EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            match n.owner {
                None => {
                    if !n.children.is_empty() {
                        return bad(format!("terminal node {i} has children"));
                    }
                    match &n.terminal {
                        Some(Terminal::LogRewards(r)) if r.len() != num_players => {
                            return bad(format!("node {i} has {} rewards for {num_players} players", r.len()))
                        }
                        Some(Terminal::LogRewards(r)) if r.iter().any(|x| !x.is_finite()) => {
                            return bad(format!("node {i} reward is not strictly positive and finite"))
                        }
                        Some(_) => {}
                        None => return bad(format!("terminal node {i} has no payoff")),
                    }
                }
                Some(o) => {
                    if n.children.is_empty() {
                        return bad(format!("nonterminal node {i} has no children"));
                    }
                    if n.children.len() > MAX_ACTIONS {
                        return bad(format!("node {i} has more than {MAX_ACTIONS} children"));
                    }
                    if let Owner::Player(p) = o {
                        if p == 0 || p as usize > num_players {
                            return bad(format!("node {i} owned by unknown player {p}"));
                        }
                    } else {
                        if n.env_probs.len() != n.children.len() {
                            return bad(format!("env node {i} probabilities do not match its children"));
                        }
                        if n.env_probs.iter().any(|&p| !(p > 0.0)) {
                            return bad(format!("env node {i} lacks full support"));
                        }
                        let total: f64 = n.env_probs.iter().sum();
                        if (total - 1.0).abs() > 1e-12 {
                            return bad(format!("env node {i} probabilities sum to {total}"));
                        }
                    }
                    for &c in &n.children {
                        if c == 0 || c >= nodes.len() || parents[c] != 0 {
                            return bad(format!("child {c} of node {i} is out of range or has two parents"));
                        }
                        parents[c] = i + 1;
                    }
                }
            }
        }
        if let Some(orphan) = (1..nodes.len()).find(|&i| parents[i] == 0) {
            return bad(format!("node {orphan} is unreachable"));
        }
        let width = nodes.iter().map(|n| n.children.len()).max().unwrap_or(0).max(1);
        Ok(ToyStochasticTree { nodes, num_players, width })
    }

    pub fn nodes(&self) -> &[ToyNode] {
        &self.nodes
    }

    pub fn node(&self, s: &ToyState) -> &ToyNode {
        &self.nodes[s.node]
    }
}

/// Agent root with two actions, each leading to an environment state with a
/// fair coin over two terminals with rewards 1, 2 (left) and 4, 8 (right).
pub fn make_fig1a_tree() -> ToyStochasticTree {
    fig1a_with_env_probs([0.5, 0.5], [0.5, 0.5])
}

/// The same shape with arbitrary coin biases. Zero-probability children are
/// pruned so the environment keeps full support.
pub fn fig1a_with_env_probs(left: [f64; 2], right: [f64; 2]) -> ToyStochasticTree {
    let mut nodes = vec![ToyNode::agent(1, vec![])];
    for (probs, rewards) in [(left, [1.0, 2.0]), (right, [4.0, 8.0])] {
        let env_id = nodes.len();
        nodes[0].children.push(env_id);
        nodes.push(ToyNode::env(vec![], vec![]));
        for (p, r) in probs.into_iter().zip(rewards) {
            if p > 0.0 {
                let leaf = nodes.len();
                nodes.push(ToyNode::reward(r));
                nodes[env_id].children.push(leaf);
                nodes[env_id].env_probs.push(p);
            }
        }
    }
    ToyStochasticTree::new(nodes, 1).expect("canonical instance is well formed")
}

/// Player 1 makes one move that ends the game.
pub fn single_move_game(outcomes: &[Outcome]) -> ToyStochasticTree {
    let mut nodes = vec![ToyNode::agent(1, (1..=outcomes.len()).collect())];
    nodes.extend(outcomes.iter().map(|&o| ToyNode::outcome(o)));
    ToyStochasticTree::new(nodes, 2).expect("single-move game is well formed")
}

/// Player 1 picks a row, player 2 a column; `outcomes[i][j]` ends the game.
pub fn two_by_two_game(outcomes: [[Outcome; 2]; 2]) -> ToyStochasticTree {
    let mut nodes = vec![ToyNode::agent(1, vec![1, 2])];
    nodes.push(ToyNode::agent(2, vec![3, 4]));
    nodes.push(ToyNode::agent(2, vec![5, 6]));
    for row in outcomes {
        nodes.extend(row.iter().map(|&o| ToyNode::outcome(o)));
    }
    ToyStochasticTree::new(nodes, 2).expect("2x2 game is well formed")
}

/// Random single-agent tree of the given depth. Owners alternate between
/// the agent (even depths) and the environment (odd depths) with the given
/// probability of an environment state; branching is 1..=max_branch.
pub fn random_toy_tree(seed: u64, depth: usize, max_branch: usize, env_fraction: f64) -> ToyStochasticTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![ToyNode::agent(1, vec![])];
    let mut frontier = vec![(0usize, 0usize)];
    while let Some((id, d)) = frontier.pop() {
        let leaf = d == depth || (d > 0 && rng.gen_bool(0.15));
        if leaf {
            nodes[id] = ToyNode::reward(rng.gen_range(0.1..10.0));
            continue;
        }
        let is_env = d > 0 && rng.gen_bool(env_fraction);
        let k = rng.gen_range(1..=max_branch);
        let kids: Vec<usize> = (0..k).map(|j| nodes.len() + j).collect();
        for &c in &kids {
            nodes.push(ToyNode::agent(1, vec![]));
            frontier.push((c, d + 1));
        }
        nodes[id] = if is_env {
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = w.iter().sum();
            let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
            // renormalize the last entry so the row sums to 1 to rounding
            let head: f64 = probs[..k - 1].iter().sum();
            probs[k - 1] = 1.0 - head;
            ToyNode::env(kids, probs)
        } else {
            ToyNode::agent(1, kids)
        };
    }
    ToyStochasticTree::new(nodes, 1).expect("random tree is well formed")
}

impl TreeEnv for ToyStochasticTree {
    type State = ToyState;

    fn num_players(&self) -> usize {
        self.num_players
    }

    fn action_space_size(&self) -> usize {
        self.width
    }

    fn root(&self) -> ToyState {
        ToyState { node: 0, history: Vec::new() }
    }

    fn history<'a>(&self, s: &'a ToyState) -> &'a [u8] {
        &s.history
    }

    fn legal_actions(&self, s: &ToyState) -> ActionMask {
        let n = self.nodes[s.node].children.len();
        ActionMask::from_bits(if n == 64 { u64::MAX } else { (1u64 << n) - 1 }, self.width)
    }

    fn owner_of(&self, s: &ToyState) -> Option<Owner> {
        self.nodes[s.node].owner
    }

    fn apply(&self, s: &ToyState, action: Action) -> ToyState {
        let mut history = s.history.clone();
        history.push(action as u8);
        ToyState { node: self.nodes[s.node].children[action], history }
    }

    fn transition_probs(&self, s: &ToyState) -> Vec<f64> {
        self.nodes[s.node].env_probs.clone()
    }

    fn terminal(&self, s: &ToyState) -> Option<Terminal> {
        self.nodes[s.node].terminal.clone()
    }

    fn features(&self, s: &ToyState) -> Vec<f64> {
        let mut v = vec![0.0; self.nodes.len()];
        v[s.node] = 1.0;
        v
    }

    fn feature_shape(&self) -> [usize; 3] {
        [1, 1, self.nodes.len()]
    }
}
