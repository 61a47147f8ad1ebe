//! Central finite-difference checks of the analytic loss gradients, both
//! with respect to the raw log-quantities and through the tabular and
//! neural parameterizations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{Owner, Trajectory, TreeEnv};
use crate::exact::tree_log_rewards;
use crate::games::{random_toy_tree, BoardGame, BoardGameSpec};
use crate::model::{AdamConfig, AnyModel, FlowParam, NeuralConfig, NeuralModel, PolicyModel, TabularFlowModel,
    TabularModel};
use crate::objectives::{
    all_edb_terms, edb_losses, env_model_nll, naive_db_loss, stochgfn_db_loss, EdbTerm, FlowGrads, LossValue,
    RewardScheme, TableParams,
};
use crate::selfplay::{generate_trajectory, TbTrainer, TrainConfig, TrainError};
use crate::tree::ExpandedTree;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Disagreement between two step sizes that marks a non-smooth interval;
/// smooth coordinates agree to about `h^2`.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Worst disagreement between analytic and numeric derivatives of one
/// objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub objective: String,
    pub coordinates: usize,
    /// Coordinates dropped because a rectifier kink lies inside the
    /// difference interval.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero derivatives
/// from dividing roundoff by nothing.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

struct Tracker {
    objective: String,
    coordinates: usize,
    skipped: usize,
    worst: f64,
}

impl Tracker {
    fn new(objective: &str) -> Self {
        Tracker { objective: objective.into(), coordinates: 0, skipped: 0, worst: 0.0 }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.coordinates += 1;
        let e = rel_error(analytic, numeric);
        self.worst = if e.is_nan() { f64::INFINITY } else { self.worst.max(e) };
    }

    fn report(self) -> GradReport {
        GradReport {
            objective: self.objective,
            coordinates: self.coordinates,
            skipped_kinks: self.skipped,
            max_rel_error: self.worst,
        }
    }
}

fn central(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

// free log-quantities, one per node
struct Free {
    flow: Vec<f64>,
    policy: Vec<f64>,
    env: Vec<f64>,
    q: Vec<f64>,
}

impl Free {
    fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut v = || (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        Free { flow: v(), policy: v(), env: v(), q: v() }
    }

    fn params(&self) -> TableParams<'_> {
        TableParams { log_flow: &self.flow, log_policy: &self.policy, log_env: &self.env, log_q: Some(&self.q) }
    }
}

type FreeLoss<'a> = dyn Fn(&TableParams, &mut FlowGrads) -> LossValue + 'a;

fn check_free(name: &str, n: usize, rng: &mut ChaCha8Rng, h: f64, loss: &FreeLoss) -> GradReport {
    let mut x = Free::random(n, rng);
    let mut g = FlowGrads::default();
    loss(&x.params(), &mut g);
    let mut t = Tracker::new(name);
    let grads = [&g.log_flow, &g.log_policy, &g.log_env, &g.log_q];
    for (which, gmap) in grads.into_iter().enumerate() {
        for i in 0..n {
            let analytic = gmap.get(&i).copied().unwrap_or(0.0);
            let value = |x: &Free| loss(&x.params(), &mut FlowGrads::default()).total;
            let x0 = [&x.flow, &x.policy, &x.env, &x.q][which][i];
            let mut eval = |d: f64| {
                [&mut x.flow, &mut x.policy, &mut x.env, &mut x.q][which][i] = x0 + d;
                let v = value(&x);
                [&mut x.flow, &mut x.policy, &mut x.env, &mut x.q][which][i] = x0;
                v
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            t.add(analytic, numeric);
        }
    }
    t.report()
}

/// Checks EDB (every term family, including the sampled `Q` form), the
/// stochastic-GFlowNet and naive detailed-balance losses and the
/// environment-model likelihood on a random stochastic tree.
pub fn check_flow_objectives(seed: u64, h: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = ExpandedTree::build(&random_toy_tree(seed, 3, 3, 0.4)).expect("small tree");
    let r = tree_log_rewards(&tree, RewardScheme::Direct).expect("rewards").remove(0);
    let n = tree.len();
    let mut edb_terms = all_edb_terms(&tree, 1);
    for s in 0..n {
        if tree.owner(s) == Some(Owner::Env) {
            edb_terms.extend(tree.children(s).map(EdbTerm::EnvEdgeQ));
        }
    }
    let edges: Vec<usize> = (1..n).collect();
    let terminals: Vec<usize> = tree.terminals().collect();
    let env_children: Vec<usize> =
        (1..n).filter(|&c| tree.owner(tree.parent(c).unwrap()) == Some(Owner::Env)).collect();

    let edb = |p: &TableParams, g: &mut FlowGrads| edb_losses(&tree, 1, p, &r, &edb_terms, g).expect("edb");
    let stoch = |p: &TableParams, g: &mut FlowGrads| stochgfn_db_loss(&tree, p, &r, &edges, &terminals, g).expect("db");
    let naive = |p: &TableParams, g: &mut FlowGrads| naive_db_loss(&tree, p, &r, &edges, &terminals, g).expect("db");
    let nll = |p: &TableParams, g: &mut FlowGrads| env_model_nll(p, &env_children, g);
    vec![
        check_free("edb", n, &mut rng, h, &edb),
        check_free("stoch_gfn_db", n, &mut rng, h, &stoch),
        check_free("naive_db", n, &mut rng, h, &naive),
        check_free("env_model_nll", n, &mut rng, h, &nll),
        check_tabular_flow_model(&tree, &r, &edb_terms, &env_children, &mut rng, h),
    ]
}

/// EDB plus environment likelihood through the logits of a
/// [`TabularFlowModel`] with a learned environment.
fn check_tabular_flow_model(
    tree: &ExpandedTree,
    r: &[f64],
    terms: &[EdbTerm],
    env_children: &[usize],
    rng: &mut ChaCha8Rng,
    h: f64,
) -> GradReport {
    let mut m = TabularFlowModel::new(tree, 1, true, AdamConfig::default());
    let kinds = [FlowParam::LogFlow, FlowParam::Policy, FlowParam::Env, FlowParam::Q];
    for k in kinds {
        for x in m.params_mut(k) {
            *x = rng.gen_range(-1.5..1.5);
        }
    }
    let loss = |m: &TabularFlowModel, g: &mut FlowGrads| {
        let mut l = edb_losses(tree, 1, m, r, terms, g).expect("edb");
        l.merge(&env_model_nll(m, env_children, g));
        l.total
    };
    let mut g = FlowGrads::default();
    loss(&m, &mut g);
    let pg = m.parameter_gradients(&g).expect("finite");
    let mut t = Tracker::new("edb_tabular_flow_model");
    for (k, sparse) in kinds.into_iter().zip([&pg.log_flow, &pg.policy, &pg.env, &pg.q]) {
        for i in 0..tree.len() {
            let analytic = sparse.iter().find(|x| x.0 == i).map_or(0.0, |x| x.1);
            let x0 = m.params_mut(k)[i];
            let mut eval = |d: f64| {
                m.params_mut(k)[i] = x0 + d;
                let v = loss(&m, &mut FlowGrads::default());
                m.params_mut(k)[i] = x0;
                v
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            t.add(analytic, numeric);
        }
    }
    t.report()
}

fn tic_tac_toe_batch(seed: u64, n: usize, lambda: f64) -> Result<(BoardGame, Vec<Trajectory>), TrainError> {
    let g = BoardGame::new(BoardGameSpec::tic_tac_toe())?;
    let cfg = TrainConfig { lambda, ..Default::default() };
    let model = TabularModel::new(9, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..n).map(|_| generate_trajectory(&g, &model, &cfg, [true, true], &mut rng)).collect::<Result<_, _>>()?;
    Ok((g, batch))
}

/// Trajectory balance through a tabular policy: every logit of every
/// visited position, and `log Z`.
pub fn check_tb_tabular(seed: u64, h: f64) -> Result<GradReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ab);
    let (g, batch) = tic_tac_toe_batch(seed, 6, rng.gen_range(0.5..3.0))?;
    let mut model = TabularModel::new(9, AdamConfig::default());
    model.set_log_z(rng.gen_range(-1.0..1.0));
    let mut keys = Vec::new();
    for traj in &batch {
        let mut s = g.root();
        for st in &traj.steps {
            let key = g.table_key(&s);
            if !keys.contains(&key) {
                model.set_logits(&key, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
                keys.push(key);
            }
            s = g.apply(&s, st.action);
        }
    }
    let cfg = TrainConfig { batch_size: batch.len(), ..Default::default() };
    let loss = |m: &TabularModel| -> Result<f64, TrainError> {
        TbTrainer::new(&g, cfg.clone(), AnyModel::Tabular(m.clone()))?.batch_loss(&batch)
    };
    let mut tr = TbTrainer::new(&g, cfg.clone(), AnyModel::Tabular(model.clone()))?;
    tr.batch_loss(&batch)?;
    let AnyModel::Tabular(with_grads) = tr.model() else { unreachable!() };
    let mut t = Tracker::new("tb_tabular");
    let lz = model.log_z();
    let numeric = central(h, |d| {
        let mut m = model.clone();
        m.set_log_z(lz + d);
        loss(&m).unwrap_or(f64::NAN)
    });
    t.add(with_grads.log_z_grad(), numeric);
    for key in &keys {
        let base = model.logits(key).expect("row").to_vec();
        let analytic = with_grads.grad(key).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 9]);
        for a in 0..9 {
            let numeric = central(h, |d| {
                let mut row = base.clone();
                row[a] += d;
                let mut m = model.clone();
                m.set_logits(key, row);
                loss(&m).unwrap_or(f64::NAN)
            });
            t.add(analytic[a], numeric);
        }
    }
    Ok(t.report())
}

/// Trajectory balance through the residual convolutional network, on a
/// random sample of `coords` parameters. The loss is only piecewise smooth,
/// so a coordinate whose differences at `h` and `h / 2` disagree has a kink
/// within `h` and is replaced by a fresh sample.
pub fn check_tb_neural(seed: u64, h: f64, coords: usize) -> Result<GradReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let (g, batch) = tic_tac_toe_batch(seed, 3, 1.0)?;
    let nc = NeuralConfig { filters: 4, blocks: 2, slope: 0.01, seed };
    let mut model = NeuralModel::new(nc, g.feature_shape(), 9, AdamConfig::default());
    // zero biases put empty-board activations exactly on the rectifier kink
    for layer in model.params_mut() {
        for x in layer {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let cfg = TrainConfig { batch_size: batch.len(), ..Default::default() };
    let loss = |m: &NeuralModel| -> Result<f64, TrainError> {
        TbTrainer::new(&g, cfg.clone(), AnyModel::Neural(m.clone()))?.batch_loss(&batch)
    };
    let mut tr = TbTrainer::new(&g, cfg.clone(), AnyModel::Neural(model.clone()))?;
    tr.batch_loss(&batch)?;
    let AnyModel::Neural(with_grads) = tr.model() else { unreachable!() };
    let mut t = Tracker::new("tb_neural");
    let sizes: Vec<usize> = model.params().iter().map(Vec::len).collect();
    while t.coordinates < coords && t.skipped < 10 * coords {
        let layer = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[layer]);
        let x0 = model.params()[layer][i];
        let at = |d: f64| {
            let mut m = model.clone();
            m.params_mut()[layer][i] = x0 + d;
            loss(&m).unwrap_or(f64::NAN)
        };
        let numeric = central(h, at);
        if rel_error(numeric, central(h / 2.0, at)) > KINK_TOLERANCE {
            t.skipped += 1;
            continue;
        }
        t.add(with_grads.grads()[layer][i], numeric);
    }
    Ok(t.report())
}

/// Every check for one seed.
pub fn check_all(seed: u64) -> Result<Vec<GradReport>, TrainError> {
    let mut out = check_flow_objectives(seed, STEP);
    out.push(check_tb_tabular(seed, STEP)?);
    out.push(check_tb_neural(seed, STEP, 40)?);
    Ok(out)
}
