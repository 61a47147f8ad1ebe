//! One logit vector per table key, allocated on first update. Unseen states
//! have zero logits, hence a uniform policy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{log_softmax_backward, normalize_masked, AdamConfig, AdamState, ModelError, PolicyInput, PolicyModel, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    logits: Vec<f64>,
    adam: AdamState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TabularRepr", into = "TabularRepr")]
pub struct TabularModel {
    width: usize,
    rows: HashMap<Vec<u8>, Row>,
    log_z: Scalar,
    adam: AdamConfig,
    grads: HashMap<Vec<u8>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TabularRepr {
    width: usize,
    log_z: Scalar,
    adam: AdamConfig,
    rows: Vec<(String, Row)>,
}

fn hex(key: &[u8]) -> String {
    key.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len() / 2).map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).unwrap_or(0)).collect()
}

impl From<TabularModel> for TabularRepr {
    fn from(m: TabularModel) -> Self {
        let mut rows: Vec<(String, Row)> = m.rows.into_iter().map(|(k, r)| (hex(&k), r)).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        TabularRepr { width: m.width, log_z: m.log_z, adam: m.adam, rows }
    }
}

impl From<TabularRepr> for TabularModel {
    fn from(r: TabularRepr) -> Self {
        TabularModel {
            width: r.width,
            rows: r.rows.into_iter().map(|(k, v)| (unhex(&k), v)).collect(),
            log_z: r.log_z,
            adam: r.adam,
            grads: HashMap::new(),
        }
    }
}

impl TabularModel {
    pub fn new(width: usize, adam: AdamConfig) -> Self {
        TabularModel { width, rows: HashMap::new(), log_z: Scalar::new(0.0), adam, grads: HashMap::new() }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn logits(&self, key: &[u8]) -> Option<&[f64]> {
        self.rows.get(key).map(|r| r.logits.as_slice())
    }

    /// Overwrites the logits stored for `key`.
    pub fn set_logits(&mut self, key: &[u8], logits: Vec<f64>) {
        assert_eq!(logits.len(), self.width);
        let n = self.width;
        self.rows.entry(key.to_vec()).or_insert_with(|| Row { logits: vec![0.0; n], adam: AdamState::new(n) }).logits =
            logits;
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.log_z.value = v;
    }

    /// Accumulated gradient of the row for `key`, if any.
    pub fn grad(&self, key: &[u8]) -> Option<&[f64]> {
        self.grads.get(key).map(Vec::as_slice)
    }

    pub fn log_z_grad(&self) -> f64 {
        self.log_z.grad
    }

    pub fn adam_config(&self) -> &AdamConfig {
        &self.adam
    }
}

impl PolicyModel for TabularModel {
    fn action_space_size(&self) -> usize {
        self.width
    }

    fn wants_features(&self) -> bool {
        false
    }

    fn log_probs(&self, input: &PolicyInput) -> Vec<f64> {
        match self.rows.get(&input.key) {
            Some(r) => normalize_masked(&r.logits, &input.mask),
            None => normalize_masked(&vec![0.0; self.width], &input.mask),
        }
    }

    fn log_z(&self) -> f64 {
        self.log_z.value
    }

    fn accumulate(&mut self, input: &PolicyInput, d_log_probs: &[f64]) {
        let lp = self.log_probs(input);
        let g = log_softmax_backward(&lp, d_log_probs, &input.mask);
        let acc = self.grads.entry(input.key.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (a, x) in acc.iter_mut().zip(g) {
            *a += x;
        }
    }

    fn accumulate_log_z(&mut self, d: f64) {
        self.log_z.grad += d;
    }

    fn step(&mut self) -> Result<(), ModelError> {
        let cfg = self.adam;
        let mut grads: Vec<(Vec<u8>, Vec<f64>)> = self.grads.drain().collect();
        // fixed order keeps updates reproducible
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        for (key, g) in &grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(format!("rows[{}]", hex(key))));
            }
        }
        self.log_z.step(&cfg, cfg.lr_z, "log_z")?;
        let n = self.width;
        for (key, g) in grads {
            let row = self.rows.entry(key).or_insert_with(|| Row { logits: vec![0.0; n], adam: AdamState::new(n) });
            row.adam.update(&cfg, cfg.lr, &mut row.logits, &g);
        }
        Ok(())
    }
}
