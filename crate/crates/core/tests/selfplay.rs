use afn_core::env::{replay, Outcome, TreeEnv};
use afn_core::exact::PositionalAfn;
use afn_core::games::*;
use afn_core::model::*;
use afn_core::selfplay::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tic_tac_toe() -> BoardGame {
    BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap()
}

fn tabular<E: TreeEnv>(env: &E, cfg: &TrainConfig) -> AnyModel {
    AnyModel::Tabular(TabularModel::new(env.action_space_size(), cfg.adam))
}

#[test]
fn uniform_first_player_wins_about_585_in_1000() {
    let g = tic_tac_toe();
    let cfg = TrainConfig::default();
    let model = tabular(&g, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let mut wins = 0;
    for _ in 0..n {
        let t = generate_trajectory(&g, &model, &cfg, [true, true], &mut rng).unwrap();
        let end = replay(&g, &t.terminal_key().unwrap()).unwrap();
        wins += usize::from(end.outcome == Some(Outcome::P1Win));
    }
    let rate = wins as f64 / n as f64;
    assert!((rate - 0.585).abs() <= 0.01, "{rate}");
}

#[test]
fn greedy_self_play_is_deterministic() {
    let g = tic_tac_toe();
    let cfg = TrainConfig { temperature: 0.0, ..Default::default() };
    let model = AnyModel::Neural(NeuralModel::new(
        NeuralConfig { seed: 3, ..Default::default() },
        g.feature_shape(),
        9,
        cfg.adam,
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let first = generate_trajectory(&g, &model, &cfg, [false, false], &mut rng).unwrap();
    for _ in 0..20 {
        assert_eq!(generate_trajectory(&g, &model, &cfg, [false, false], &mut rng).unwrap(), first);
    }
}

#[test]
fn single_move_trajectory() {
    let g = single_move_game(&[Outcome::P1Win, Outcome::P2Win]);
    let cfg = TrainConfig::default();
    let t = generate_trajectory(&g, &tabular(&g, &cfg), &cfg, [false, false], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(t.len(), 1);
    assert!(t.steps[0].done);
    assert_eq!(t.log_reward().unwrap().len(), 2);
    t.validate(&g).unwrap();
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        trajectories_per_epoch: 256,
        steps_per_epoch: 100,
        epochs: 20,
        buffer_capacity: 1024,
        temperature: 1.0,
        eval_games: 0,
        seed,
        adam: AdamConfig { lr: 0.05, lr_z: 0.05, ..Default::default() },
        ..Default::default()
    }
}

fn trained_log_z<E: TreeEnv>(env: &E, cfg: TrainConfig) -> f64 {
    let mut t = TbTrainer::new(env, cfg.clone(), tabular(env, &cfg)).unwrap();
    t.run(&mut |_| {}).unwrap();
    assert_eq!(t.state.step, 2000);
    t.model().log_z()
}

#[test]
fn tb_recovers_the_single_move_partition_function() {
    let g = single_move_game(&[Outcome::P1Win, Outcome::P2Win]);
    let want = (1f64.exp() + (-1f64).exp()) / 2.0;
    assert!((want - 1.5430806).abs() < 1e-7);
    let z = trained_log_z(&g, small_config(0));
    assert!((z - want.ln()).abs() <= 1e-3, "{z} vs {}", want.ln());
}

#[test]
fn uniform_behavior_reaches_the_same_optimum() {
    use Outcome::*;
    let g = two_by_two_game([[P1Win, Draw], [P2Win, P1Win]]);
    let on = trained_log_z(&g, small_config(4));
    let off = trained_log_z(&g, TrainConfig { uniform_behavior: true, ..small_config(5) });
    assert!((on - off).abs() <= 1e-3, "{on} vs {off}");
}

// Positions met by the greedy learner against a uniform opponent where an
// immediate win exists and the exact optimum prefers it by a clear margin.
#[test]
fn trained_policy_takes_clear_immediate_wins() {
    let g = tic_tac_toe();
    let cfg = TrainConfig {
        lambda: 10.0,
        batch_size: 512,
        trajectories_per_epoch: 2048,
        steps_per_epoch: 100,
        epochs: 30,
        eval_games: 0,
        uniform_side_fraction: 0.5,
        adam: AdamConfig { lr: 0.05, ..Default::default() },
        ..Default::default()
    };
    let mut t = TbTrainer::new(&g, cfg.clone(), tabular(&g, &cfg)).unwrap();
    t.run(&mut |_| {}).unwrap();
    let exact = PositionalAfn::solve(&g, 10.0, Board::default(), 10_000).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for game in 0..500 {
        let learner = 1 + (game % 2) as u8;
        let mut b = Board::default();
        while g.outcome(&b).is_none() {
            let moves: Vec<usize> = g.legal_moves(&b).iter().collect();
            if b.to_move() != learner {
                b = g.play(&b, moves[rng.gen_range(0..moves.len())]);
                continue;
            }
            let s = BoardState { board: b, history: vec![], outcome: None };
            let lp = t.model().log_probs_for(&g, &s).unwrap();
            let a = sample_action(&lp, &g.legal_actions(&s), 0.0, &mut rng).unwrap();
            let wins = |m: usize| g.outcome(&g.play(&b, m)).is_some_and(|o| o.winner() == Some(learner));
            let p = exact.policy(&g, &b).unwrap();
            let best = |w: bool| p.iter().filter(|x| wins(x.0) == w).map(|x| x.1).fold(0.0, f64::max);
            if best(true) > best(false) + 0.3 {
                assert!(wins(a), "{b:?}: chose {a}");
                checked += 1;
            }
            b = g.play(&b, a);
        }
    }
    assert!(checked >= 100, "{checked}");
}
