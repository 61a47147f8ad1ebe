use std::collections::HashSet;

use afn_core::env::*;
use afn_core::games::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Plays uniformly from the root, checking every visited state on the way.
fn rollout_checks<E: TreeEnv>(env: &E, rng: &mut ChaCha8Rng, alternating: bool) {
    let mut s = env.root();
    let mut traj = Trajectory::new();
    loop {
        let k = key(env, &s);
        // the key replays to the same state and its parent chain is the prefix chain
        assert_eq!(env.history(&replay(env, &k).unwrap()), k.history());
        let mut chain = vec![k.clone()];
        while let Some(p) = chain.last().unwrap().parent() {
            chain.push(p);
        }
        assert_eq!(chain.len(), k.depth() + 1);
        assert_eq!(chain.last().unwrap(), &StateKey::root());
        if alternating {
            if let Some(Owner::Player(p)) = env.owner_of(&s) {
                assert_eq!(p as usize - 1, k.depth() % 2);
            }
        }
        let Some(owner) = env.owner_of(&s) else { break };
        let mask = env.legal_actions(&s);
        let acts: Vec<Action> = mask.iter().collect();
        let a = if owner == Owner::Env {
            let p = env_transition(env, &s).unwrap();
            let total: f64 = p.iter().map(|x| x.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let mut u = rng.gen::<f64>();
            let mut pick = p.last().unwrap().0;
            for (a, q) in p {
                if u < q {
                    pick = a;
                    break;
                }
                u -= q;
            }
            pick
        } else {
            acts[rng.gen_range(0..acts.len())]
        };
        s = traj.record(env, &s, a).unwrap();
    }
    assert!(traj.steps.iter().all(|st| st.mask.contains(st.action)));
    assert!(traj.is_complete());
}

#[test]
fn rollouts_respect_tree_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ttt = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
    let c3 = BoardGame::new(BoardGameSpec::connect_k(4, 4, 3)).unwrap();
    let c4 = BoardGame::new(BoardGameSpec::connect_four()).unwrap();
    let seq = SequenceEnv::new(SequenceEnvSpec::new(4, 4, 0.5, 2.0)).unwrap();
    let fig = make_fig1a_tree();
    let toy = random_toy_tree(3, 5, 3, 0.5);
    for _ in 0..10_000 {
        rollout_checks(&ttt, &mut rng, true);
        rollout_checks(&c3, &mut rng, true);
        rollout_checks(&seq, &mut rng, false);
        rollout_checks(&fig, &mut rng, false);
        rollout_checks(&toy, &mut rng, false);
    }
    for _ in 0..1000 {
        rollout_checks(&c4, &mut rng, true);
    }
}

#[test]
fn child_and_owner_examples() {
    let ttt = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
    let root = ttt.root();
    assert_eq!(children(&ttt, &root).unwrap().len(), 9);
    assert_eq!(owner(&ttt, &root).unwrap(), Owner::Player(1));
    let next = step(&ttt, &root, 4).unwrap();
    assert_eq!(children(&ttt, &next).unwrap().len(), 8);
    assert_eq!(owner(&ttt, &next).unwrap(), Owner::Player(2));
    assert!(step(&ttt, &next, 4).is_err());

    let c4 = BoardGame::new(BoardGameSpec::connect_four()).unwrap();
    assert_eq!(children(&c4, &c4.root()).unwrap().len(), 7);

    let fig = make_fig1a_tree();
    let kids = children(&fig, &fig.root()).unwrap();
    assert_eq!(kids.len(), 2);
    assert_eq!(owner(&fig, &kids[0].1).unwrap(), Owner::Env);
    let p: Vec<f64> = env_transition(&fig, &kids[0].1).unwrap().iter().map(|x| x.1).collect();
    assert_eq!(p, [0.5, 0.5]);
    assert!(env_transition(&fig, &fig.root()).is_err());
}

#[test]
fn single_child_env_state_is_certain() {
    let nodes = vec![ToyNode::agent(1, vec![1]), ToyNode::env(vec![2], vec![1.0]), ToyNode::reward(2.0)];
    let t = ToyStochasticTree::new(nodes, 1).unwrap();
    let e = step(&t, &t.root(), 0).unwrap();
    assert_eq!(env_transition(&t, &e).unwrap(), [(0, 1.0)]);
}

#[test]
fn sequence_corruption_examples() {
    let seq = SequenceEnv::new(SequenceEnvSpec::new(3, 4, 0.5, 1.0)).unwrap();
    let e = step(&seq, &seq.root(), 2).unwrap();
    let p = env_transition(&seq, &e).unwrap();
    for (a, q) in p {
        assert!((q - if a == 2 { 0.625 } else { 0.125 }).abs() < 1e-15);
    }
    let det = SequenceEnv::new(SequenceEnvSpec::new(3, 4, 0.0, 1.0)).unwrap();
    let e = step(&det, &det.root(), 1).unwrap();
    assert_eq!(env_transition(&det, &e).unwrap(), [(1, 1.0)]);
    let full = SequenceEnv::new(SequenceEnvSpec::new(3, 4, 1.0, 1.0)).unwrap();
    let e = step(&full, &full.root(), 1).unwrap();
    assert!(env_transition(&full, &e).unwrap().iter().all(|x| (x.1 - 0.25).abs() < 1e-15));
}

// every line of `k` cells on the board, by naive scan
fn naive_has_line(spec: &BoardGameSpec, stones: u64) -> bool {
    let (r, c, k) = (spec.rows as i64, spec.cols as i64, spec.win_length as i64);
    let at = |y: i64, x: i64| y >= 0 && y < r && x >= 0 && x < c && stones >> (y * c + x) & 1 == 1;
    for y in 0..r {
        for x in 0..c {
            for (dy, dx) in [(0, 1), (1, 0), (1, 1), (1, -1)] {
                if (0..k).all(|i| at(y + i * dy, x + i * dx)) {
                    return true;
                }
            }
        }
    }
    false
}

fn enumerate_positions(spec: BoardGameSpec) -> usize {
    let g = BoardGame::new(spec).unwrap();
    let mut seen = HashSet::new();
    let mut stack = vec![Board::default()];
    while let Some(b) = stack.pop() {
        if !seen.insert(b) {
            continue;
        }
        let lines = [naive_has_line(&spec, b.stones[0]), naive_has_line(&spec, b.stones[1])];
        match g.outcome(&b) {
            None => {
                assert!(!lines[0] && !lines[1], "{b:?}");
                assert!(!g.legal_moves(&b).is_empty());
                stack.extend(g.legal_moves(&b).iter().map(|a| g.play(&b, a)));
            }
            Some(Outcome::P1Win) => assert!(lines[0] && !lines[1]),
            Some(Outcome::P2Win) => assert!(lines[1] && !lines[0]),
            Some(Outcome::Draw) => assert!(!lines[0] && !lines[1] && g.legal_moves(&b).is_empty()),
        }
    }
    seen.len()
}

#[test]
fn terminal_tags_match_naive_lines() {
    assert_eq!(enumerate_positions(BoardGameSpec::tic_tac_toe()), 5478);
    enumerate_positions(BoardGameSpec::connect_k(4, 4, 3));
    enumerate_positions(BoardGameSpec::connect_k(5, 4, 3));
    enumerate_positions(BoardGameSpec { rows: 3, cols: 4, win_length: 3, gravity: false });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn bitboard_lines_match_naive_scan(stones in any::<u64>(), rows in 3usize..7, cols in 3usize..7, k in 3usize..5) {
        let spec = BoardGameSpec { rows, cols, win_length: k.min(rows.max(cols)), gravity: false };
        let g = BoardGame::new(spec).unwrap();
        let bits = stones & ((1u64 << (rows * cols)) - 1);
        prop_assert_eq!(g.has_line(bits), naive_has_line(&spec, bits));
    }

    #[test]
    fn sequence_transitions_sum_to_one(alpha in 0.0f64..=1.0, a in 1usize..8, action in 0usize..8) {
        let env = SequenceEnv::new(SequenceEnvSpec::new(2, a, alpha, 1.0)).unwrap();
        let e = step(&env, &env.root(), action % a).unwrap();
        let total: f64 = env_transition(&env, &e).unwrap().iter().map(|x| x.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
