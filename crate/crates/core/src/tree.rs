//! Fully expanded history tree of an environment, stored as flat arrays in
//! breadth-first order so every child has a larger index than its parent
//! and siblings are contiguous.

use std::ops::Range;

use thiserror::Error;

use crate::env::{Action, EnvError, Owner, StateKey, Terminal, TreeEnv};

/// Exact solving refuses trees larger than this.
pub const DEFAULT_NODE_LIMIT: usize = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree exceeds the limit of {limit} nodes")]
    TooLarge { limit: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone)]
pub struct ExpandedTree {
    num_players: usize,
    action_space: usize,
    parent: Vec<u32>,
    action: Vec<u8>,
    first_child: Vec<u32>,
    num_children: Vec<u8>,
    owner: Vec<Option<Owner>>,
    // log P_env(node | parent) for children of environment states, else 0
    log_env_prob: Vec<f64>,
    depth: Vec<u16>,
    terminal: Vec<Option<Terminal>>,
}

const NO_PARENT: u32 = u32::MAX;

impl ExpandedTree {
    pub fn build<E: TreeEnv>(env: &E) -> Result<Self, TreeError> {
        Self::build_with_limit(env, DEFAULT_NODE_LIMIT)
    }

    pub fn build_with_limit<E: TreeEnv>(env: &E, limit: usize) -> Result<Self, TreeError> {
        Self::build_from(env, env.root(), limit)
    }

    /// Expands the subtree below `start`; node 0 is `start`.
    pub fn build_from<E: TreeEnv>(env: &E, start: E::State, limit: usize) -> Result<Self, TreeError> {
        let mut t = ExpandedTree {
            num_players: env.num_players(),
            action_space: env.action_space_size(),
            parent: vec![NO_PARENT],
            action: vec![0],
            first_child: Vec::new(),
            num_children: Vec::new(),
            owner: Vec::new(),
            log_env_prob: vec![0.0],
            depth: vec![0],
            terminal: Vec::new(),
        };
        // states waiting for expansion, in node order
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(start);
        let mut next_id = 0usize;
        while let Some(s) = queue.pop_front() {
            let id = next_id;
            next_id += 1;
            let owner = env.owner_of(&s);
            t.owner.push(owner);
            t.terminal.push(env.terminal(&s));
            let first = t.parent.len();
            t.first_child.push(first as u32);
            let Some(o) = owner else {
                t.num_children.push(0);
                continue;
            };
            let mask = env.legal_actions(&s);
            let probs = if o == Owner::Env { Some(env.transition_probs(&s)) } else { None };
            t.num_children.push(mask.count() as u8);
            if first + mask.count() > limit {
                return Err(TreeError::TooLarge { limit });
            }
            for (rank, a) in mask.iter().enumerate() {
                t.parent.push(id as u32);
                t.action.push(a as u8);
                t.depth.push(t.depth[id] + 1);
                t.log_env_prob.push(probs.as_ref().map_or(0.0, |p| p[rank].ln()));
                queue.push_back(env.apply(&s, a));
            }
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn num_players(&self) -> usize {
        self.num_players
    }

    pub fn action_space_size(&self) -> usize {
        self.action_space
    }

    pub fn children(&self, node: usize) -> Range<usize> {
        let f = self.first_child[node] as usize;
        f..f + self.num_children[node] as usize
    }

    pub fn num_children(&self, node: usize) -> usize {
        self.num_children[node] as usize
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        match self.parent[node] {
            NO_PARENT => None,
            p => Some(p as usize),
        }
    }

    /// Action leading into `node` from its parent.
    pub fn action(&self, node: usize) -> Action {
        self.action[node] as Action
    }

    pub fn owner(&self, node: usize) -> Option<Owner> {
        self.owner[node]
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.owner[node].is_none()
    }

    pub fn terminal(&self, node: usize) -> Option<&Terminal> {
        self.terminal[node].as_ref()
    }

    pub fn log_env_prob(&self, node: usize) -> f64 {
        self.log_env_prob[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node] as usize
    }

    pub fn has_env_states(&self) -> bool {
        self.owner.iter().any(|o| *o == Some(Owner::Env))
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&n| self.is_terminal(n))
    }

    /// History key relative to the expansion root.
    pub fn key(&self, mut node: usize) -> StateKey {
        let mut h = Vec::with_capacity(self.depth(node));
        while let Some(p) = self.parent(node) {
            h.push(self.action[node]);
            node = p;
        }
        h.reverse();
        StateKey::from_history(&h)
    }

    pub fn find(&self, key: &StateKey) -> Option<usize> {
        let mut node = 0;
        for &a in key.history() {
            node = self.children(node).find(|&c| self.action[c] == a)?;
        }
        Some(node)
    }

    /// Per player, the log of the product of child counts over the states on
    /// the path to each node (excluding the node) where that player moves.
    pub fn log_branch_factors(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.len()]; self.num_players];
        for node in 1..self.len() {
            let p = self.parent[node] as usize;
            for (i, row) in out.iter_mut().enumerate() {
                row[node] = row[p];
                if self.owner[p] == Some(Owner::Player(i as u8 + 1)) {
                    row[node] += (self.num_children[p] as f64).ln();
                }
            }
        }
        out
    }

    /// True when two players alternate, player 1 at the root.
    pub fn is_alternating(&self) -> bool {
        self.num_players == 2
            && (0..self.len()).all(|n| match self.owner[n] {
                None => true,
                Some(Owner::Player(p)) => p as usize == 1 + self.depth(n) % 2,
                Some(Owner::Env) => false,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{make_fig1a_tree, BoardGame, BoardGameSpec};

    #[test]
    fn fig1a_layout() {
        let t = ExpandedTree::build(&make_fig1a_tree()).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.children(0), 1..3);
        assert_eq!(t.children(1), 3..5);
        assert!((t.log_env_prob(3) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(t.key(5).to_string(), "[1.0]");
        assert_eq!(t.find(&t.key(6)), Some(6));
    }

    #[test]
    fn node_limit_is_enforced() {
        let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
        assert_eq!(ExpandedTree::build_with_limit(&g, 1000).unwrap_err(), TreeError::TooLarge { limit: 1000 });
    }

    #[test]
    fn tic_tac_toe_branch_factors_depend_on_ply() {
        let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
        let t = ExpandedTree::build(&g).unwrap();
        let lb = t.log_branch_factors();
        let n = t.find(&StateKey::from_history(&[0, 1, 2, 3, 4])).unwrap();
        assert!((lb[0][n] - (9.0f64 * 7.0 * 5.0).ln()).abs() < 1e-12);
        assert!((lb[1][n] - (8.0f64 * 6.0).ln()).abs() < 1e-12);
        assert!(t.is_alternating());
    }
}
