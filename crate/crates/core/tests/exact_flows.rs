use afn_core::env::Outcome;
use afn_core::exact::*;
use afn_core::games::*;
use afn_core::objectives::RewardScheme;
use afn_core::tree::ExpandedTree;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tic_tac_toe() -> ExpandedTree {
    ExpandedTree::build(&BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap()).unwrap()
}

fn direct(tree: &ExpandedTree) -> Vec<f64> {
    tree_log_rewards(tree, RewardScheme::Direct).unwrap().remove(0)
}

fn branch_adjusted(tree: &ExpandedTree, lambda: f64) -> Vec<Vec<f64>> {
    tree_log_rewards(tree, RewardScheme::BranchAdjusted { lambda }).unwrap()
}

#[test]
fn gfn_root_flow_counts_tic_tac_toe_games() {
    let tree = tic_tac_toe();
    assert_eq!(tree.terminals().count(), 255_168);
    // the same tree with a single agent owning every move and R = 1 at each leaf
    let nodes: Vec<ToyNode> = (0..tree.len())
        .map(|n| if tree.is_terminal(n) { ToyNode::reward(1.0) } else { ToyNode::agent(1, tree.children(n).collect()) })
        .collect();
    let single = ExpandedTree::build(&ToyStochasticTree::new(nodes, 1).unwrap()).unwrap();
    let t = solve_gfn(&single, &direct(&single)).unwrap();
    assert!((t.log_flow(1, 0).exp() - 255_168.0).abs() < 1e-6);
}

#[test]
fn tic_tac_toe_afn_satisfies_edb_at_both_lambdas() {
    let tree = tic_tac_toe();
    for lambda in [1.0, 10.0] {
        let r = branch_adjusted(&tree, lambda);
        let t = solve_afn(&tree, &r).unwrap();
        assert!(afn_edb_residual(&tree, &t, &r).max() <= 1e-10);
        assert!(check_product_flow(&tree, &t, &r) <= 1e-10);
        assert!(branch_product_residual(&tree, &t) <= 1e-10);
    }
}

#[test]
fn tb_constant_holds_for_exact_policies_only() {
    let tree = tic_tac_toe();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for lambda in [1.0, 10.0] {
        let t = solve_afn(&tree, &branch_adjusted(&tree, lambda)).unwrap();
        let c = tb_constant_check(&tree, t.edge_log_probs(), lambda, 1000, &mut rng).unwrap();
        assert!(c.max_deviation_from(t.log_flow(1, 0)) <= 1e-8, "{lambda}");
    }
    let uniform = uniform_edge_log_probs(&tree);
    let c = tb_constant_check(&tree, &uniform, 1.0, 1000, &mut rng).unwrap();
    assert!(c.max_deviation > 0.01);
}

#[test]
fn single_move_tb_constant() {
    let tree = ExpandedTree::build(&single_move_game(&[Outcome::P1Win, Outcome::P2Win])).unwrap();
    let t = solve_afn(&tree, &branch_adjusted(&tree, 1.0)).unwrap();
    let c = tb_constant_check(&tree, t.edge_log_probs(), 1.0, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let e = 1f64.exp();
    assert!((c.log_z.exp() - (e + 1.0 / e) / 2.0).abs() < 1e-12);
    assert!((t.policy(&tree, 0)[0] - e / (e + 1.0 / e)).abs() < 1e-12);
}

#[test]
fn two_by_two_product_is_inverse_branching() {
    use Outcome::*;
    let tree = ExpandedTree::build(&two_by_two_game([[P1Win, P2Win], [P2Win, P1Win]])).unwrap();
    let r = branch_adjusted(&tree, 1.0);
    let t = solve_afn(&tree, &r).unwrap();
    for leaf in tree.terminals() {
        assert!(((t.log_flow(1, leaf) + t.log_flow(2, leaf)).exp() - 0.25).abs() < 1e-12);
    }
}

#[test]
fn connect3_4x4_product_flow() {
    let g = BoardGame::new(BoardGameSpec::connect_k(4, 4, 3)).unwrap();
    let tree = ExpandedTree::build(&g).unwrap();
    let r = branch_adjusted(&tree, 1.0);
    let t = solve_afn(&tree, &r).unwrap();
    assert!(check_product_flow(&tree, &t, &r) <= 1e-10);
    assert!(branch_product_residual(&tree, &t) <= 1e-10);
}

#[test]
fn single_move_product_residual_is_rounding() {
    let tree = ExpandedTree::build(&single_move_game(&[Outcome::P1Win, Outcome::Draw])).unwrap();
    let r = branch_adjusted(&tree, 2.0);
    let t = solve_afn(&tree, &r).unwrap();
    assert!(check_product_flow(&tree, &t, &r) < 1e-14);
}

#[test]
fn fig1a_strategies() {
    let tree = ExpandedTree::build(&make_fig1a_tree()).unwrap();
    let s = enumerate_env_strategies(&tree, 100).unwrap();
    assert_eq!(s.len(), 4);
    for g in &s {
        assert_eq!(g.prob, 0.25);
        assert!(g.is_valid(&tree));
    }
    assert!(check_prop5(&tree, &direct(&tree), 100).unwrap() <= 1e-12);
}

#[test]
fn three_way_env_state_strategies() {
    let nodes = vec![
        ToyNode::agent(1, vec![1]),
        ToyNode::env(vec![2, 3, 4], vec![0.2, 0.3, 0.5]),
        ToyNode::reward(1.0),
        ToyNode::reward(2.0),
        ToyNode::reward(3.0),
    ];
    let tree = ExpandedTree::build(&ToyStochasticTree::new(nodes, 1).unwrap()).unwrap();
    let mut probs: Vec<f64> = enumerate_env_strategies(&tree, 10).unwrap().iter().map(|g| g.prob).collect();
    probs.sort_by(f64::total_cmp);
    assert_eq!(probs, [0.2, 0.3, 0.5]);
}

#[test]
fn deterministic_env_has_one_strategy_and_zero_residual() {
    let tree = ExpandedTree::build(&fig1a_with_env_probs([1.0, 0.0], [0.0, 1.0])).unwrap();
    let s = enumerate_env_strategies(&tree, 10).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].prob, 1.0);
    assert!(check_prop5(&tree, &direct(&tree), 10).unwrap() <= 1e-15);
    // D0: the flows reduce to a plain GFlowNet over the reachable leaves
    let t = solve_eflow(&tree, &direct(&tree), 1).unwrap();
    assert!((t.log_flow(1, 0).exp() - 9.0).abs() < 1e-12);
}

#[test]
fn prop5_on_random_trees() {
    for seed in 0..20 {
        let tree = ExpandedTree::build(&random_toy_tree(seed, 3, 3, 0.5)).unwrap();
        let r = check_prop5(&tree, &direct(&tree), DEFAULT_STRATEGY_LIMIT).unwrap();
        assert!(r <= 1e-10, "seed {seed}: {r}");
    }
}

#[test]
fn flow_as_expectation_on_small_games() {
    use Outcome::*;
    let games = [
        two_by_two_game([[P1Win, P2Win], [Draw, P1Win]]),
        two_by_two_game([[Draw, Draw], [P2Win, P1Win]]),
    ];
    for g in games {
        let tree = ExpandedTree::build(&g).unwrap();
        for lambda in [1.0, 3.0] {
            let t = solve_afn(&tree, &branch_adjusted(&tree, lambda)).unwrap();
            let nodes: Vec<usize> = (0..tree.len()).collect();
            for player in [1, 2] {
                assert!(check_flow_as_expectation(&tree, &t, lambda, player, &nodes, 1000).unwrap() <= 1e-12);
            }
        }
    }
}

#[test]
fn flow_as_expectation_on_tic_tac_toe_subtrees() {
    let tree = tic_tac_toe();
    let lambda = 2.0;
    let t = solve_afn(&tree, &branch_adjusted(&tree, lambda)).unwrap();
    let deep: Vec<usize> = (0..tree.len()).filter(|&n| tree.depth(n) == 4).step_by(97).collect();
    assert!(deep.len() > 10);
    for player in [1, 2] {
        let r = check_flow_as_expectation(&tree, &t, lambda, player, &deep, 100_000).unwrap();
        assert!(r <= 1e-10, "{r}");
    }
    // terminals are their own expectation
    let leaves: Vec<usize> = tree.terminals().take(50).collect();
    assert!(check_flow_as_expectation(&tree, &t, lambda, 1, &leaves, 1).unwrap() <= 1e-15);
}

#[test]
fn sequence_single_symbol_flows() {
    let spec = SequenceEnvSpec { weights: Some(vec![vec![0.5, 1.0]]), ..SequenceEnvSpec::new(1, 2, 0.5, 1.0) };
    let tree = ExpandedTree::build(&SequenceEnv::new(spec).unwrap()).unwrap();
    let t = solve_eflow(&tree, &direct(&tree), 1).unwrap();
    // child 2 of the root is the action choosing symbol 1
    let c = tree.children(0).nth(1).unwrap();
    assert!((t.log_flow(1, c).exp() - 0.875).abs() < 1e-12);
}

#[test]
fn child_order_does_not_change_solutions() {
    let tree = tic_tac_toe();
    let r = branch_adjusted(&tree, 10.0);
    let a = solve_afn_ordered(&tree, &r, ChildOrder::Forward).unwrap();
    let b = solve_afn_ordered(&tree, &r, ChildOrder::Reverse).unwrap();
    for p in [1, 2] {
        let worst = a.log_flows(p).iter().zip(b.log_flows(p)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12);
    }
}

#[test]
fn eflow_without_env_states_equals_gfn() {
    for seed in 0..50 {
        let tree = ExpandedTree::build(&random_toy_tree(seed, 4, 3, 0.0)).unwrap();
        let r = direct(&tree);
        let e = solve_eflow(&tree, &r, 1).unwrap();
        let g = solve_gfn(&tree, &r).unwrap();
        assert_eq!(e.log_flows(1), g.log_flows(1), "seed {seed}");
    }
}

#[test]
fn fig1a_stochastic_gfn_is_unsatisfiable() {
    let tree = ExpandedTree::build(&make_fig1a_tree()).unwrap();
    let r = direct(&tree);
    let [l, rgt] = [1, 2];
    let mut best = f64::INFINITY;
    for k in 0..1001 {
        let p = (k as f64 + 0.5) / 1001.0;
        let mut pol = vec![0.0; tree.len()];
        pol[l] = p.ln();
        pol[rgt] = (1.0 - p).ln();
        best = best.min(stochgfn_min_loss(&tree, &r, &pol).0);
    }
    // least-squares minimum at p = 0.2, computed independently
    assert!(best >= 0.2402, "{best}");
    assert!(stochgfn_loss_lower_bound(&tree, &r) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_trees_satisfy_edb(seed in 0u64..10_000, depth in 1usize..5, env in 0.0f64..1.0) {
        let tree = ExpandedTree::build(&random_toy_tree(seed, depth, 3, env)).unwrap();
        let r = direct(&tree);
        let t = solve_eflow(&tree, &r, 1).unwrap();
        let res = edb_residuals(&tree, t.log_flows(1), t.edge_log_probs(), 1, &r);
        prop_assert!(res.max() <= 1e-10);
        prop_assert_eq!(res.terminal, 0.0);
        let rev = solve_eflow_ordered(&tree, &r, 1, ChildOrder::Reverse).unwrap();
        for (a, b) in t.log_flows(1).iter().zip(rev.log_flows(1)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn perturbing_one_flow_breaks_the_product(lambda in 0.0f64..5.0, node in 0usize..64) {
        let g = BoardGame::new(BoardGameSpec { rows: 2, cols: 2, win_length: 2, gravity: false }).unwrap();
        let tree = ExpandedTree::build(&g).unwrap();
        let r = branch_adjusted(&tree, lambda);
        let mut t = solve_afn(&tree, &r).unwrap();
        prop_assert!(check_product_flow(&tree, &t, &r) <= 1e-10);
        t.perturb(1, node % tree.len(), 1.1f64.ln());
        prop_assert!(check_product_flow(&tree, &t, &r) >= 1.1f64.ln() - 1e-9);
    }
}
