//! Reverse-mode differentiation over the few layer types the neural model
//! uses. Values are flat `f64` vectors; images are laid out `[c][h][w]`.

use crate::env::ActionMask;

use super::normalize_masked;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// `y = W x + b`, `W` stored row-major `[out][in]`.
    Dense { x: Var, w: usize, b: usize },
    /// 3x3 convolution with zero padding; `W` is `[cout][cin][3][3]`.
    Conv { x: Var, w: usize, b: usize, cin: usize, h: usize, wd: usize },
    LeakyRelu { x: Var, slope: f64 },
    Add { a: Var, b: Var },
    LogSoftmax { x: Var, mask: ActionMask },
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, v: Vec<f64>, op: Op) -> Var {
        self.values.push(v);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn input(&mut self, x: Vec<f64>) -> Var {
        self.push(x, Op::Input)
    }

    pub fn dense(&mut self, params: &[Vec<f64>], x: Var, w: usize, b: usize) -> Var {
        let xv = &self.values[x.0];
        let bias = &params[b];
        let n_in = xv.len();
        assert_eq!(params[w].len(), n_in * bias.len(), "dense weight shape");
        let y = bias
            .iter()
            .enumerate()
            .map(|(o, &bo)| bo + params[w][o * n_in..(o + 1) * n_in].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn conv3x3(&mut self, params: &[Vec<f64>], x: Var, w: usize, b: usize, cin: usize, h: usize, wd: usize) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.len(), cin * h * wd, "conv input shape");
        let cout = params[b].len();
        let wt = &params[w];
        assert_eq!(wt.len(), cout * cin * 9, "conv weight shape");
        let mut y = vec![0.0; cout * h * wd];
        for co in 0..cout {
            for r in 0..h {
                for c in 0..wd {
                    let mut s = params[b][co];
                    for ci in 0..cin {
                        for dr in 0..3 {
                            let rr = r as isize + dr as isize - 1;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for dc in 0..3 {
                                let cc = c as isize + dc as isize - 1;
                                if cc < 0 || cc >= wd as isize {
                                    continue;
                                }
                                s += wt[((co * cin + ci) * 3 + dr) * 3 + dc]
                                    * xv[(ci * h + rr as usize) * wd + cc as usize];
                            }
                        }
                    }
                    y[(co * h + r) * wd + c] = s;
                }
            }
        }
        self.push(y, Op::Conv { x, w, b, cin, h, wd })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let y = self.values[x.0].iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        self.push(y, Op::LeakyRelu { x, slope })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.values[a.0].iter().zip(&self.values[b.0]).map(|(x, y)| x + y).collect();
        self.push(y, Op::Add { a, b })
    }

    pub fn log_softmax(&mut self, x: Var, mask: ActionMask) -> Var {
        let y = normalize_masked(&self.values[x.0], &mask);
        self.push(y, Op::LogSoftmax { x, mask })
    }

    /// Propagates `d_out` from `out` back to the parameters, adding into
    /// `grads` (shaped like `params`).
    pub fn backward(&self, params: &[Vec<f64>], out: Var, d_out: &[f64], grads: &mut [Vec<f64>]) {
        let mut d: Vec<Vec<f64>> = self.values.iter().map(|v| vec![0.0; v.len()]).collect();
        d[out.0].copy_from_slice(d_out);
        for i in (0..=out.0).rev() {
            let gy = std::mem::take(&mut d[i]);
            if gy.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.ops[i] {
                Op::Input => {}
                Op::Dense { x, w, b } => {
                    let xv = &self.values[x.0];
                    let n_in = xv.len();
                    for (o, &g) in gy.iter().enumerate() {
                        grads[*b][o] += g;
                        let row = &params[*w][o * n_in..(o + 1) * n_in];
                        for k in 0..n_in {
                            grads[*w][o * n_in + k] += g * xv[k];
                            d[x.0][k] += g * row[k];
                        }
                    }
                }
                Op::Conv { x, w, b, cin, h, wd } => {
                    let (cin, h, wd) = (*cin, *h, *wd);
                    let xv = &self.values[x.0];
                    let wt = &params[*w];
                    let cout = params[*b].len();
                    for co in 0..cout {
                        for r in 0..h {
                            for c in 0..wd {
                                let g = gy[(co * h + r) * wd + c];
                                if g == 0.0 {
                                    continue;
                                }
                                grads[*b][co] += g;
                                for ci in 0..cin {
                                    for dr in 0..3 {
                                        let rr = r as isize + dr as isize - 1;
                                        if rr < 0 || rr >= h as isize {
                                            continue;
                                        }
                                        for dc in 0..3 {
                                            let cc = c as isize + dc as isize - 1;
                                            if cc < 0 || cc >= wd as isize {
                                                continue;
                                            }
                                            let wi = ((co * cin + ci) * 3 + dr) * 3 + dc;
                                            let xi = (ci * h + rr as usize) * wd + cc as usize;
                                            grads[*w][wi] += g * xv[xi];
                                            d[x.0][xi] += g * wt[wi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.values[x.0];
                    for k in 0..gy.len() {
                        d[x.0][k] += if xv[k] > 0.0 { gy[k] } else { slope * gy[k] };
                    }
                }
                Op::Add { a, b } => {
                    for k in 0..gy.len() {
                        d[a.0][k] += gy[k];
                        d[b.0][k] += gy[k];
                    }
                }
                Op::LogSoftmax { x, mask } => {
                    let g = super::log_softmax_backward(&self.values[i], &gy, mask);
                    for k in 0..g.len() {
                        d[x.0][k] += g[k];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // loss = Σ c_k * logsoftmax(dense(lrelu(conv(x) + x')))_k
    fn run(params: &[Vec<f64>], x: &[f64], coef: &[f64], mask: ActionMask) -> (f64, Tape, Var) {
        let mut t = Tape::new();
        let xi = t.input(x.to_vec());
        let c = t.conv3x3(params, xi, 0, 1, 2, 2, 3);
        let c2 = t.conv3x3(params, c, 2, 3, 2, 2, 3);
        let s = t.add(c2, xi);
        let a = t.leaky_relu(s, 0.1);
        let y = t.dense(params, a, 4, 5);
        let lp = t.log_softmax(y, mask);
        let loss = mask.iter().map(|k| coef[k] * t.value(lp)[k]).sum();
        (loss, t, lp)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mask = ActionMask::from_bits(0b1101, 4);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let mut params = vec![g(2 * 2 * 9), g(2), g(2 * 2 * 9), g(2), g(4 * 12), g(4)];
            let x = g(12);
            let coef = g(4);
            let (_, tape, out) = run(&params, &x, &coef, mask);
            let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
            let mut d = vec![0.0; 4];
            for k in mask.iter() {
                d[k] = coef[k];
            }
            tape.backward(&params, out, &d, &mut grads);
            for pi in 0..params.len() {
                for k in 0..params[pi].len() {
                    let orig = params[pi][k];
                    params[pi][k] = orig + 1e-5;
                    let hi = run(&params, &x, &coef, mask).0;
                    params[pi][k] = orig - 1e-5;
                    let lo = run(&params, &x, &coef, mask).0;
                    params[pi][k] = orig;
                    let fd = (hi - lo) / 2e-5;
                    let an = grads[pi][k];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "p{pi}[{k}] {fd} vs {an}");
                }
            }
        }
    }
}
