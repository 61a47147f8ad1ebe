//! Policy and flow parameterizations, the Adam optimizer and action
//! sampling.

pub mod flow;
pub mod neural;
pub mod tabular;
pub mod tape;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flow::{FlowParam, ParamGrads, TabularFlowModel};
pub use neural::{NeuralConfig, NeuralModel};
pub use tabular::TabularModel;

use crate::env::{ActionMask, EnvError, Owner, TreeEnv};
use crate::util::MASKED;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state belongs to {found}, not player {side}")]
    SideMismatch { side: u8, found: String },
    #[error("non-finite gradient at {0}")]
    NonFinite(String),
    #[error("cannot sample at a state with no legal actions")]
    NoLegalActions,
    #[error("input of width {got} does not match the model's {expected}")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What a policy sees of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    /// Lookup key for tabular models.
    pub key: Vec<u8>,
    /// Input planes for neural models; empty when not requested.
    pub features: Vec<f64>,
    pub mask: ActionMask,
    pub side: u8,
}

impl PolicyInput {
    /// Builds the input for `side` at `s`; errors if another owner moves there.
    pub fn new<E: TreeEnv>(env: &E, s: &E::State, side: u8, with_features: bool) -> Result<Self, ModelError> {
        match env.owner_of(s) {
            Some(Owner::Player(p)) if p == side => {}
            other => {
                return Err(ModelError::SideMismatch {
                    side,
                    found: other.map_or_else(|| "no one (terminal)".to_string(), |o| o.to_string()),
                })
            }
        }
        Ok(PolicyInput {
            key: env.table_key(s),
            features: if with_features { env.features(s) } else { Vec::new() },
            mask: env.legal_actions(s),
            side,
        })
    }
}

/// A trainable two-sided policy with a learnable `log Z`.
pub trait PolicyModel: Send + Sync {
    fn action_space_size(&self) -> usize;

    fn wants_features(&self) -> bool;

    /// Masked log-probabilities over the full action width; illegal entries
    /// hold [`MASKED`].
    fn log_probs(&self, input: &PolicyInput) -> Vec<f64>;

    fn log_z(&self) -> f64;

    /// Accumulates the gradient of the loss given its gradient with respect
    /// to the masked log-probabilities at `input`.
    fn accumulate(&mut self, input: &PolicyInput, d_log_probs: &[f64]);

    fn accumulate_log_z(&mut self, d: f64);

    /// Applies one Adam update from the accumulated gradients and clears them.
    fn step(&mut self) -> Result<(), ModelError>;

    fn log_probs_for<E: TreeEnv>(&self, env: &E, s: &E::State) -> Result<Vec<f64>, ModelError>
    where
        Self: Sized,
    {
        let side = match env.owner_of(s) {
            Some(Owner::Player(p)) => p,
            _ => return Err(ModelError::NoLegalActions),
        };
        Ok(self.log_probs(&PolicyInput::new(env, s, side, self.wants_features())?))
    }
}

/// Gradient of `Σ_a d[a] log p[a]` with respect to the logits of a masked
/// softmax with log-probabilities `log_p`.
pub fn log_softmax_backward(log_p: &[f64], d_log_p: &[f64], mask: &ActionMask) -> Vec<f64> {
    let total: f64 = mask.iter().map(|a| d_log_p[a]).sum();
    let mut g = vec![0.0; log_p.len()];
    for a in mask.iter() {
        g[a] = d_log_p[a] - log_p[a].exp() * total;
    }
    g
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_z")]
    pub lr_z: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_lr_z() -> f64 {
    5e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, lr_z: 5e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moments of a block of parameters sharing one step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One update of `params` from `grad` at learning rate `lr`.
    pub fn update(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// A scalar parameter with its own optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    pub value: f64,
    #[serde(skip)]
    pub grad: f64,
    pub adam: AdamState,
}

impl Scalar {
    pub fn new(value: f64) -> Self {
        Scalar { value, grad: 0.0, adam: AdamState::new(1) }
    }

    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, name: &str) -> Result<(), ModelError> {
        if !self.grad.is_finite() {
            return Err(ModelError::NonFinite(name.to_string()));
        }
        let g = [self.grad];
        let mut v = [self.value];
        self.adam.update(cfg, lr, &mut v, &g);
        self.value = v[0];
        self.grad = 0.0;
        Ok(())
    }
}

/// Draws an action from `softmax(log_probs / temperature)` over the legal
/// actions. Temperature 0 picks the most probable action, ties broken by
/// the lowest index.
pub fn sample_action<R: Rng>(
    log_probs: &[f64],
    mask: &ActionMask,
    temperature: f64,
    rng: &mut R,
) -> Result<usize, ModelError> {
    if mask.is_empty() {
        return Err(ModelError::NoLegalActions);
    }
    if temperature == 0.0 {
        let mut best = None;
        for a in mask.iter() {
            if best.map_or(true, |b: usize| log_probs[a] > log_probs[b]) {
                best = Some(a);
            }
        }
        return Ok(best.unwrap());
    }
    let m = mask.iter().map(|a| log_probs[a]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<(usize, f64)> = mask.iter().map(|a| (a, ((log_probs[a] - m) / temperature).exp())).collect();
    let total: f64 = w.iter().map(|x| x.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(a, x) in &w {
        if u < x {
            return Ok(a);
        }
        u -= x;
    }
    Ok(w.last().unwrap().0)
}

/// Probabilities of [`sample_action`].
pub fn tempered_probs(log_probs: &[f64], mask: &ActionMask, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; log_probs.len()];
    if temperature == 0.0 {
        if let Some(a) = mask.iter().reduce(|b, a| if log_probs[a] > log_probs[b] { a } else { b }) {
            out[a] = 1.0;
        }
        return out;
    }
    let m = mask.iter().map(|a| log_probs[a]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in mask.iter() {
        out[a] = ((log_probs[a] - m) / temperature).exp();
        total += out[a];
    }
    for a in mask.iter() {
        out[a] /= total;
    }
    out
}

/// Either kind of policy model, for checkpoints and dispatch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnyModel {
    Tabular(TabularModel),
    Neural(NeuralModel),
}

impl PolicyModel for AnyModel {
    fn action_space_size(&self) -> usize {
        match self {
            AnyModel::Tabular(m) => m.action_space_size(),
            AnyModel::Neural(m) => m.action_space_size(),
        }
    }
    fn wants_features(&self) -> bool {
        matches!(self, AnyModel::Neural(_))
    }
    fn log_probs(&self, input: &PolicyInput) -> Vec<f64> {
        match self {
            AnyModel::Tabular(m) => m.log_probs(input),
            AnyModel::Neural(m) => m.log_probs(input),
        }
    }
    fn log_z(&self) -> f64 {
        match self {
            AnyModel::Tabular(m) => m.log_z(),
            AnyModel::Neural(m) => m.log_z(),
        }
    }
    fn accumulate(&mut self, input: &PolicyInput, d: &[f64]) {
        match self {
            AnyModel::Tabular(m) => m.accumulate(input, d),
            AnyModel::Neural(m) => m.accumulate(input, d),
        }
    }
    fn accumulate_log_z(&mut self, d: f64) {
        match self {
            AnyModel::Tabular(m) => m.accumulate_log_z(d),
            AnyModel::Neural(m) => m.accumulate_log_z(d),
        }
    }
    fn step(&mut self) -> Result<(), ModelError> {
        match self {
            AnyModel::Tabular(m) => m.step(),
            AnyModel::Neural(m) => m.step(),
        }
    }
}

/// Masks everything outside `mask` with [`MASKED`] and normalizes.
pub(crate) fn normalize_masked(logits: &[f64], mask: &ActionMask) -> Vec<f64> {
    let mut out = logits.to_vec();
    crate::util::masked_log_softmax(&mut out, |a| mask.contains(a));
    debug_assert!(out.iter().enumerate().all(|(a, &x)| mask.contains(a) || x == MASKED));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mask = ActionMask::from_bits(0b1011, 4);
        let logits = [0.3, -1.2, 7.0, 0.8];
        let d = [0.5, 0.0, 0.0, -2.0];
        let f = |l: &[f64]| {
            let lp = normalize_masked(l, &mask);
            mask.iter().map(|a| d[a] * lp[a]).sum::<f64>()
        };
        let lp = normalize_masked(&logits, &mask);
        let g = log_softmax_backward(&lp, &d, &mask);
        for k in mask.iter() {
            let mut hi = logits;
            let mut lo = logits;
            hi[k] += 1e-5;
            lo[k] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-6), "{k}: {fd} vs {}", g[k]);
        }
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let mask = ActionMask::full(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_action(&[0.0, 1.0, 1.0], &mask, 0.0, &mut rng).unwrap(), 1);
        assert!(sample_action(&[0.0], &ActionMask::empty(1), 1.0, &mut rng).is_err());
    }

    #[test]
    fn tempered_probabilities() {
        let mask = ActionMask::full(2);
        let p = tempered_probs(&[0.0, 3f64.ln()], &mask, 1.0);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let cfg = AdamConfig::default();
        let mut x = Scalar::new(1.0);
        for _ in 0..5000 {
            x.grad = 2.0 * (x.value - 0.3);
            x.step(&cfg, 1e-3, "x").unwrap();
        }
        assert!((x.value - 0.3).abs() < 1e-6, "{}", x.value);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut x = Scalar::new(0.0);
        x.grad = f64::NAN;
        let e = x.step(&AdamConfig::default(), 0.1, "log_z").unwrap_err();
        assert!(e.to_string().contains("log_z"));
    }
}
