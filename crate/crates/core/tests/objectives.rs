use afn_core::env::{Outcome, Owner, Trajectory, TreeEnv};
use afn_core::exact::{solve_afn, solve_eflow, solve_gfn, tree_log_rewards};
use afn_core::games::*;
use afn_core::objectives::*;
use afn_core::tree::ExpandedTree;
use proptest::prelude::*;

fn play(g: &BoardGame, moves: &[usize]) -> (Trajectory, BoardState) {
    let mut t = Trajectory::new();
    let mut s = g.root();
    for &a in moves {
        s = t.record(g, &s, a).unwrap();
    }
    (t, s)
}

#[test]
fn branch_factors_along_tic_tac_toe_lines() {
    let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
    // X takes the top row at ply 5
    let (t, s) = play(&g, &[0, 3, 1, 4, 2]);
    assert_eq!(s.outcome, Some(Outcome::P1Win));
    assert!((branch_factor(&t, 1).unwrap().exp() - 315.0).abs() < 1e-9);
    assert!((branch_factor(&t, 2).unwrap().exp() - 48.0).abs() < 1e-9);
    let r = make_rewards(s.outcome, 2.0, &t).unwrap();
    assert!((r[0] - (2.0 - 315f64.ln())).abs() < 1e-12);
    // a full-board game
    let (t, s) = play(&g, &[0, 1, 2, 4, 3, 5, 7, 6, 8]);
    assert!(s.outcome.is_some());
    assert!((branch_factor(&t, 1).unwrap().exp() - 945.0).abs() < 1e-9);
    assert!((branch_factor(&t, 2).unwrap().exp() - 384.0).abs() < 1e-9);
}

#[test]
fn single_move_branching() {
    let g = single_move_game(&[Outcome::P1Win, Outcome::Draw, Outcome::Draw, Outcome::P2Win]);
    let mut t = Trajectory::new();
    t.record(&g, &g.root(), 2).unwrap();
    assert!((branch_factor(&t, 1).unwrap() - 4f64.ln()).abs() < 1e-15);
    assert_eq!(branch_factor(&t, 2).unwrap(), 0.0);
    let r = make_rewards(Some(Outcome::Draw), 3.0, &t).unwrap();
    assert!((r[0] + r[1] + 4f64.ln()).abs() < 1e-15);
    let r0 = make_rewards(Some(Outcome::P1Win), 0.0, &t).unwrap();
    assert!((r0[0] + 4f64.ln()).abs() < 1e-15 && r0[1] == 0.0);
}

#[test]
fn incomplete_trajectories_have_no_branch_factor() {
    let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
    let (t, _) = play(&g, &[4]);
    assert!(branch_factor(&t, 1).is_err());
}

fn single_terms(tree: &ExpandedTree) -> Vec<EdbTerm> {
    let mut out = all_edb_terms(tree, 1);
    for s in 0..tree.len() {
        if tree.owner(s) == Some(Owner::Env) {
            out.extend(tree.children(s).map(EdbTerm::EnvEdgeQ));
        }
    }
    out
}

fn q_at_optimum(tree: &ExpandedTree, log_flow: &[f64]) -> Vec<f64> {
    (0..tree.len())
        .map(|c| match tree.parent(c) {
            Some(s) if tree.owner(s) == Some(Owner::Env) => tree.log_env_prob(c) + log_flow[c] - log_flow[s],
            _ => 0.0,
        })
        .collect()
}

fn worst_term(tree: &ExpandedTree, p: &TableParams, r: &[f64], terms: &[EdbTerm]) -> f64 {
    terms
        .iter()
        .map(|t| edb_losses(tree, 1, p, r, std::slice::from_ref(t), &mut FlowGrads::default()).unwrap().total)
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn edb_is_zero_exactly_at_the_solution(seed in 0u64..100_000, depth in 1usize..5, env in 0.0f64..1.0, node in any::<usize>(), which in 0usize..2) {
        let tree = ExpandedTree::build(&random_toy_tree(seed, depth, 3, env)).unwrap();
        let r = tree_log_rewards(&tree, RewardScheme::Direct).unwrap().remove(0);
        let t = solve_eflow(&tree, &r, 1).unwrap();
        let mut flow = t.log_flows(1).to_vec();
        let mut policy = t.edge_log_probs().to_vec();
        let env_lp: Vec<f64> = (0..tree.len()).map(|n| tree.log_env_prob(n)).collect();
        let q = q_at_optimum(&tree, &flow);
        let terms = single_terms(&tree);
        let p = TableParams { log_flow: &flow, log_policy: &policy, log_env: &env_lp, log_q: Some(&q) };
        prop_assert!(edb_losses(&tree, 1, &p, &r, &terms, &mut FlowGrads::default()).unwrap().total <= 1e-18);

        // move one parameter by a factor e^0.1
        let agent_edges: Vec<usize> = (1..tree.len()).filter(|&c| tree.owner(tree.parent(c).unwrap()) == Some(Owner::Player(1))).collect();
        if which == 0 || agent_edges.is_empty() {
            flow[node % tree.len()] += 0.1;
        } else {
            policy[agent_edges[node % agent_edges.len()]] += 0.1;
        }
        let p = TableParams { log_flow: &flow, log_policy: &policy, log_env: &env_lp, log_q: Some(&q) };
        prop_assert!(worst_term(&tree, &p, &r, &terms) >= 0.009);
    }

    #[test]
    fn db_losses_vanish_without_environment(seed in 0u64..100_000, depth in 1usize..5) {
        let tree = ExpandedTree::build(&random_toy_tree(seed, depth, 3, 0.0)).unwrap();
        let r = tree_log_rewards(&tree, RewardScheme::Direct).unwrap().remove(0);
        let t = solve_gfn(&tree, &r).unwrap();
        let zeros = vec![0.0; tree.len()];
        let p = TableParams { log_flow: t.log_flows(1), log_policy: t.edge_log_probs(), log_env: &zeros, log_q: None };
        let edges: Vec<usize> = (1..tree.len()).collect();
        let leaves: Vec<usize> = tree.terminals().collect();
        let mut g = FlowGrads::default();
        prop_assert!(stochgfn_db_loss(&tree, &p, &r, &edges, &leaves, &mut g).unwrap().total <= 1e-18);
        prop_assert!(naive_db_loss(&tree, &p, &r, &edges, &leaves, &mut g).unwrap().total <= 1e-18);
    }

    #[test]
    fn tb_is_zero_on_every_trajectory_at_the_afn_optimum(lambda in 0.0f64..5.0, seed in any::<u64>(), dz in prop_oneof![Just(0.0), Just(0.1)]) {
        use rand::{Rng, SeedableRng};
        let g = BoardGame::new(BoardGameSpec { rows: 2, cols: 3, win_length: 2, gravity: true }).unwrap();
        let tree = ExpandedTree::build(&g).unwrap();
        let lr = tree_log_rewards(&tree, RewardScheme::BranchAdjusted { lambda }).unwrap();
        let t = solve_afn(&tree, &lr).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // walk a random path and score it with the exact policies
        let mut traj = Trajectory::new();
        let (mut s, mut node) = (g.root(), 0usize);
        let mut lps = Vec::new();
        while !tree.is_terminal(node) {
            let k = rng.gen_range(0..tree.num_children(node));
            let c = tree.children(node).nth(k).unwrap();
            lps.push(t.edge_log_prob(c));
            s = traj.record(&g, &s, tree.action(c)).unwrap();
            node = c;
        }
        traj.finish(make_rewards(s.outcome, lambda, &traj).unwrap()).unwrap();
        let l = tb_loss(&traj, t.log_flow(1, 0) + dz, &lps).unwrap();
        if dz == 0.0 {
            prop_assert!(l.term.loss <= 1e-18);
        } else {
            prop_assert!(l.term.loss >= 0.009);
        }
    }
}
