//! Small residual convolutional network with one policy head per side.
//!
//! Layout: a 3x3 stem convolution, `blocks` residual blocks of two 3x3
//! convolutions each, leaky rectifiers, and a dense head per side over the
//! flattened feature map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{AdamConfig, AdamState, ModelError, PolicyInput, PolicyModel, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_filters() -> usize {
    16
}
fn default_blocks() -> usize {
    4
}
fn default_slope() -> f64 {
    0.01
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig { filters: default_filters(), blocks: default_blocks(), slope: default_slope(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralModel {
    config: NeuralConfig,
    /// `[channels, rows, cols]` of the input planes.
    shape: [usize; 3],
    width: usize,
    params: Vec<Vec<f64>>,
    adam_states: Vec<AdamState>,
    log_z: Scalar,
    adam: AdamConfig,
    #[serde(skip)]
    grads: Vec<Vec<f64>>,
}

impl NeuralModel {
    pub fn new(config: NeuralConfig, shape: [usize; 3], width: usize, adam: AdamConfig) -> Self {
        let [c, h, w] = shape;
        let f = config.filters;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = |n: usize, fan_in: usize, scale: f64| -> Vec<f64> {
            let a = scale * (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        let mut params = vec![init(f * c * 9, c * 9, 1.0), vec![0.0; f]];
        for _ in 0..config.blocks {
            params.push(init(f * f * 9, f * 9, 1.0));
            params.push(vec![0.0; f]);
            // the second convolution starts small so each block begins near identity
            params.push(init(f * f * 9, f * 9, 0.1));
            params.push(vec![0.0; f]);
        }
        for _ in 0..2 {
            params.push(init(width * f * h * w, f * h * w, 0.1));
            params.push(vec![0.0; width]);
        }
        let adam_states = params.iter().map(|p| AdamState::new(p.len())).collect();
        let grads = params.iter().map(|p| vec![0.0; p.len()]).collect();
        NeuralModel { config, shape, width, params, adam_states, log_z: Scalar::new(0.0), adam, grads }
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Vec::len).sum::<usize>() + 1
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn log_z_grad(&self) -> f64 {
        self.log_z.grad
    }

    /// Accumulated gradients, shaped like [`Self::params`].
    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    fn forward(&self, input: &PolicyInput) -> (Tape, Var) {
        let [c, h, w] = self.shape;
        assert_eq!(input.features.len(), c * h * w, "feature width");
        let slope = self.config.slope;
        let p = &self.params;
        let mut t = Tape::new();
        let x = t.input(input.features.clone());
        let stem = t.conv3x3(p, x, 0, 1, c, h, w);
        let mut cur = t.leaky_relu(stem, slope);
        let f = self.config.filters;
        for blk in 0..self.config.blocks {
            let base = 2 + 4 * blk;
            let a = t.conv3x3(p, cur, base, base + 1, f, h, w);
            let a = t.leaky_relu(a, slope);
            let b = t.conv3x3(p, a, base + 2, base + 3, f, h, w);
            let s = t.add(b, cur);
            cur = t.leaky_relu(s, slope);
        }
        let head = 2 + 4 * self.config.blocks + 2 * (input.side as usize - 1);
        let logits = t.dense(p, cur, head, head + 1);
        let out = t.log_softmax(logits, input.mask);
        (t, out)
    }

    fn ensure_grads(&mut self) {
        if self.grads.len() != self.params.len() {
            self.grads = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
    }
}

impl PolicyModel for NeuralModel {
    fn action_space_size(&self) -> usize {
        self.width
    }

    fn wants_features(&self) -> bool {
        true
    }

    fn log_probs(&self, input: &PolicyInput) -> Vec<f64> {
        let (t, out) = self.forward(input);
        t.value(out).to_vec()
    }

    fn log_z(&self) -> f64 {
        self.log_z.value
    }

    fn accumulate(&mut self, input: &PolicyInput, d_log_probs: &[f64]) {
        self.ensure_grads();
        let (t, out) = self.forward(input);
        let mut d = d_log_probs.to_vec();
        for (a, x) in d.iter_mut().enumerate() {
            if !input.mask.contains(a) {
                *x = 0.0;
            }
        }
        t.backward(&self.params, out, &d, &mut self.grads);
    }

    fn accumulate_log_z(&mut self, d: f64) {
        self.log_z.grad += d;
    }

    fn step(&mut self) -> Result<(), ModelError> {
        self.ensure_grads();
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite(format!("params[{i}][{k}]")));
            }
        }
        let cfg = self.adam;
        self.log_z.step(&cfg, cfg.lr_z, "log_z")?;
        for i in 0..self.params.len() {
            self.adam_states[i].update(&cfg, cfg.lr, &mut self.params[i], &self.grads[i]);
            self.grads[i].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ActionMask;

    fn input(side: u8) -> PolicyInput {
        let features = (0..27).map(|i| ((i * 7) % 3) as f64 - 1.0).collect();
        PolicyInput { key: vec![], features, mask: ActionMask::from_bits(0b1_0110_1101, 9), side }
    }

    #[test]
    fn masked_and_normalized() {
        let m = NeuralModel::new(NeuralConfig { filters: 4, blocks: 2, ..Default::default() }, [3, 3, 3], 9, AdamConfig::default());
        let lp = m.log_probs(&input(1));
        let s: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(lp[1].exp(), 0.0);
        assert_ne!(m.log_probs(&input(2)), lp);
    }

    #[test]
    fn json_round_trip_gives_identical_outputs() {
        let m = NeuralModel::new(NeuralConfig { filters: 3, blocks: 1, seed: 9, ..Default::default() }, [3, 3, 3], 9, AdamConfig::default());
        let back: NeuralModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.log_probs(&input(1)), m.log_probs(&input(1)));
    }
}
