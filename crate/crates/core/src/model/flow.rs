//! Tabular flows and policies over the nodes of an expanded tree, trained
//! with the detailed-balance family of losses. Edge quantities are stored
//! at the child node; siblings are contiguous so each policy row is a slice.

use serde::{Deserialize, Serialize};

use super::{AdamConfig, ModelError};
use crate::env::Owner;
use crate::objectives::{agent_view_env_log_probs, FlowGrads, FlowParams};
use crate::tree::ExpandedTree;
use crate::util::logsumexp;

/// Elementwise Adam with per-element step counters, so untouched entries
/// are left alone.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SparseAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u32>,
}

impl SparseAdam {
    fn new(n: usize) -> Self {
        SparseAdam { m: vec![0.0; n], v: vec![0.0; n], t: vec![0; n] }
    }

    fn update(&mut self, cfg: &AdamConfig, lr: f64, x: &mut f64, i: usize, g: f64) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
        self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = self.m[i] / (1.0 - cfg.beta1.powi(t));
        let vh = self.v[i] / (1.0 - cfg.beta2.powi(t));
        *x -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// The parameter arrays of a [`TabularFlowModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowParam {
    LogFlow,
    Policy,
    Env,
    Q,
}

/// Sparse parameter gradients as `(node, gradient)` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    pub log_flow: Vec<(usize, f64)>,
    pub policy: Vec<(usize, f64)>,
    pub env: Vec<(usize, f64)>,
    pub q: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularFlowModel {
    agent: u8,
    pub log_flow: Vec<f64>,
    policy_logits: Vec<f64>,
    env_logits: Vec<f64>,
    q_logits: Vec<f64>,
    known_env: Vec<f64>,
    learn_env: bool,
    adam: AdamConfig,
    opt_flow: SparseAdam,
    opt_policy: SparseAdam,
    opt_env: SparseAdam,
    opt_q: SparseAdam,
    parent: Vec<u32>,
    first_child: Vec<u32>,
    num_children: Vec<u8>,
}

impl TabularFlowModel {
    /// Zero-initialized flows and uniform policies for `agent` on `tree`.
    /// With `learn_env`, transitions at non-agent states are modeled by
    /// learned logits instead of the known distribution.
    pub fn new(tree: &ExpandedTree, agent: u8, learn_env: bool, adam: AdamConfig) -> Self {
        let n = tree.len();
        TabularFlowModel {
            agent,
            log_flow: vec![0.0; n],
            policy_logits: vec![0.0; n],
            env_logits: vec![0.0; n],
            q_logits: vec![0.0; n],
            known_env: agent_view_env_log_probs(tree, agent),
            learn_env,
            adam,
            opt_flow: SparseAdam::new(n),
            opt_policy: SparseAdam::new(n),
            opt_env: SparseAdam::new(n),
            opt_q: SparseAdam::new(n),
            parent: (0..n).map(|i| tree.parent(i).map_or(u32::MAX, |p| p as u32)).collect(),
            first_child: (0..n).map(|i| tree.children(i).start as u32).collect(),
            num_children: (0..n).map(|i| tree.num_children(i) as u8).collect(),
        }
    }

    pub fn agent(&self) -> u8 {
        self.agent
    }

    fn siblings(&self, child: usize) -> std::ops::Range<usize> {
        let p = self.parent[child] as usize;
        let f = self.first_child[p] as usize;
        f..f + self.num_children[p] as usize
    }

    fn row_log_prob(logits: &[f64], range: std::ops::Range<usize>, child: usize) -> f64 {
        logits[child] - logsumexp(range.map(|k| logits[k]))
    }

    /// Sets flows and agent policy from log-values, e.g. an exact solution.
    pub fn set_from(&mut self, tree: &ExpandedTree, log_flow: &[f64], edge_log_prob: &[f64]) {
        self.log_flow.copy_from_slice(log_flow);
        for n in 1..tree.len() {
            if tree.owner(tree.parent(n).unwrap()) == Some(Owner::Player(self.agent)) {
                self.policy_logits[n] = edge_log_prob[n];
            }
        }
    }

    /// Agent policy over the children of `node`.
    pub fn policy(&self, tree: &ExpandedTree, node: usize) -> Vec<f64> {
        tree.children(node).map(|c| self.log_policy(c).exp()).collect()
    }

    /// Gradients with respect to this model's parameters, from gradients
    /// with respect to the log-quantities, in ascending index order.
    pub fn parameter_gradients(&self, grads: &FlowGrads) -> Result<ParamGrads, ModelError> {
        let check = |name: &str, m: &std::collections::HashMap<usize, f64>| {
            match m.iter().find(|(_, g)| !g.is_finite()) {
                Some((k, _)) => Err(ModelError::NonFinite(format!("{name}[{k}]"))),
                None => Ok(()),
            }
        };
        check("log_flow", &grads.log_flow)?;
        check("log_policy", &grads.log_policy)?;
        check("log_env", &grads.log_env)?;
        check("log_q", &grads.log_q)?;
        let mut log_flow: Vec<(usize, f64)> = grads.log_flow.iter().map(|(&k, &g)| (k, g)).collect();
        log_flow.sort_unstable_by_key(|x| x.0);
        Ok(ParamGrads {
            log_flow,
            policy: self.logit_grads(&self.policy_logits, &grads.log_policy),
            env: if self.learn_env { self.logit_grads(&self.env_logits, &grads.log_env) } else { Vec::new() },
            q: self.logit_grads(&self.q_logits, &grads.log_q),
        })
    }

    /// Raw parameter storage, indexed by node.
    pub fn params_mut(&mut self, which: FlowParam) -> &mut [f64] {
        match which {
            FlowParam::LogFlow => &mut self.log_flow,
            FlowParam::Policy => &mut self.policy_logits,
            FlowParam::Env => &mut self.env_logits,
            FlowParam::Q => &mut self.q_logits,
        }
    }

    /// Applies one Adam step from loss gradients with respect to the
    /// log-quantities, scaled by `scale`.
    pub fn apply(&mut self, grads: &FlowGrads, scale: f64) -> Result<(), ModelError> {
        let cfg = self.adam;
        let g = self.parameter_gradients(grads)?;
        for (k, x) in g.log_flow {
            self.opt_flow.update(&cfg, cfg.lr, &mut self.log_flow[k], k, x * scale);
        }
        for (k, x) in g.policy {
            self.opt_policy.update(&cfg, cfg.lr, &mut self.policy_logits[k], k, x * scale);
        }
        for (k, x) in g.env {
            self.opt_env.update(&cfg, cfg.lr, &mut self.env_logits[k], k, x * scale);
        }
        for (k, x) in g.q {
            self.opt_q.update(&cfg, cfg.lr, &mut self.q_logits[k], k, x * scale);
        }
        Ok(())
    }

    // chain rule through each sibling softmax, rows in ascending order
    fn logit_grads(&self, logits: &[f64], d: &std::collections::HashMap<usize, f64>) -> Vec<(usize, f64)> {
        let mut parents: Vec<u32> = d.keys().map(|&c| self.parent[c]).collect();
        parents.sort_unstable();
        parents.dedup();
        let mut out = Vec::new();
        for p in parents {
            let f = self.first_child[p as usize] as usize;
            let range = f..f + self.num_children[p as usize] as usize;
            let lse = logsumexp(range.clone().map(|k| logits[k]));
            let total: f64 = range.clone().map(|k| d.get(&k).copied().unwrap_or(0.0)).sum();
            for k in range {
                let g = d.get(&k).copied().unwrap_or(0.0) - (logits[k] - lse).exp() * total;
                out.push((k, g));
            }
        }
        out
    }
}

impl FlowParams for TabularFlowModel {
    fn log_flow(&self, node: usize) -> f64 {
        self.log_flow[node]
    }

    fn log_policy(&self, child: usize) -> f64 {
        Self::row_log_prob(&self.policy_logits, self.siblings(child), child)
    }

    fn log_env(&self, child: usize) -> f64 {
        if self.learn_env {
            Self::row_log_prob(&self.env_logits, self.siblings(child), child)
        } else {
            self.known_env[child]
        }
    }

    fn log_q(&self, child: usize) -> f64 {
        Self::row_log_prob(&self.q_logits, self.siblings(child), child)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{solve_eflow, tree_log_rewards};
    use crate::games::make_fig1a_tree;
    use crate::objectives::{all_edb_terms, edb_losses, RewardScheme};

    #[test]
    fn exact_solution_has_zero_edb_loss() {
        let tree = ExpandedTree::build(&make_fig1a_tree()).unwrap();
        let r = tree_log_rewards(&tree, RewardScheme::Direct).unwrap().remove(0);
        let t = solve_eflow(&tree, &r, 1).unwrap();
        let mut m = TabularFlowModel::new(&tree, 1, false, AdamConfig::default());
        m.set_from(&tree, t.log_flows(1), t.edge_log_probs());
        let mut g = FlowGrads::default();
        let l = edb_losses(&tree, 1, &m, &r, &all_edb_terms(&tree, 1), &mut g).unwrap();
        assert!(l.total <= 1e-18, "{}", l.total);
        assert!((m.policy(&tree, 0)[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn training_reaches_exact_flows() {
        let tree = ExpandedTree::build(&make_fig1a_tree()).unwrap();
        let r = tree_log_rewards(&tree, RewardScheme::Direct).unwrap().remove(0);
        let exact = solve_eflow(&tree, &r, 1).unwrap();
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut m = TabularFlowModel::new(&tree, 1, false, cfg);
        let terms = all_edb_terms(&tree, 1);
        let mut g = FlowGrads::default();
        for _ in 0..3000 {
            g.clear();
            edb_losses(&tree, 1, &m, &r, &terms, &mut g).unwrap();
            m.apply(&g, 1.0).unwrap();
        }
        for n in 0..tree.len() {
            assert!((m.log_flow[n] - exact.log_flow(1, n)).abs() < 1e-4, "node {n}");
        }
    }
}
