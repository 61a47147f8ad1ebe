//! Perfect play for board games: negamax with alpha-beta pruning and a
//! transposition table keyed on the position, plus a depth-limited search
//! agent and move-quality classification.
//!
//! Scores are absolute in the ply at which the game ends: a win ending at
//! ply `e` scores `MAX - e` for the winner, so quicker wins and slower
//! losses score higher, and the score of a position does not depend on how
//! it was reached.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Outcome};
use crate::games::{Board, BoardGame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameValue {
    Win,
    Draw,
    Loss,
}

impl GameValue {
    pub fn sign(self) -> i32 {
        match self {
            GameValue::Win => 1,
            GameValue::Draw => 0,
            GameValue::Loss => -1,
        }
    }
}

/// Value of a position for the side to move, with the number of plies
/// until the game ends under optimal play.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveResult {
    pub value: GameValue,
    pub plies: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Solved {
    Solved(SolveResult),
    /// The node budget ran out before the value was proven.
    Unsolved { nodes: u64 },
}

impl Solved {
    pub fn result(self) -> Option<SolveResult> {
        match self {
            Solved::Solved(r) => Some(r),
            Solved::Unsolved { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Bound {
    Exact,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    score: i32,
    bound: Bound,
    best: u8,
}

#[derive(Debug, Clone)]
pub struct Solver {
    game: BoardGame,
    max: i32,
    table: HashMap<Board, Entry>,
    use_table: bool,
    budget: u64,
    nodes: u64,
    order: Vec<Action>,
}

impl Solver {
    pub fn new(game: BoardGame) -> Self {
        let spec = *game.spec();
        let width = spec.action_space_size();
        let mut order: Vec<Action> = (0..width).collect();
        // central moves first
        if spec.gravity {
            let mid = (spec.cols as f64 - 1.0) / 2.0;
            order.sort_by(|&a, &b| (a as f64 - mid).abs().partial_cmp(&(b as f64 - mid).abs()).unwrap().then(a.cmp(&b)));
        } else {
            let (mr, mc) = ((spec.rows as f64 - 1.0) / 2.0, (spec.cols as f64 - 1.0) / 2.0);
            let d = |a: usize| ((a / spec.cols) as f64 - mr).abs() + ((a % spec.cols) as f64 - mc).abs();
            order.sort_by(|&a, &b| d(a).partial_cmp(&d(b)).unwrap().then(a.cmp(&b)));
        }
        Solver { max: spec.cells() as i32 + 1, game, table: HashMap::new(), use_table: true, budget: u64::MAX, nodes: 0, order }
    }

    pub fn with_budget(mut self, nodes: u64) -> Self {
        self.budget = nodes;
        self
    }

    pub fn without_table(mut self) -> Self {
        self.use_table = false;
        self
    }

    pub fn game(&self) -> &BoardGame {
        &self.game
    }

    /// Nodes visited by the last call.
    pub fn nodes(&self) -> u64 {
        self.nodes
    }

    pub fn clear(&mut self) {
        self.table.clear();
    }

    fn to_result(&self, b: &Board, score: i32) -> SolveResult {
        let ply = b.ply() as i32;
        if score > 0 {
            SolveResult { value: GameValue::Win, plies: (self.max - score - ply) as u32 }
        } else if score < 0 {
            SolveResult { value: GameValue::Loss, plies: (self.max + score - ply) as u32 }
        } else {
            SolveResult { value: GameValue::Draw, plies: (self.game.spec().cells() - b.ply()) as u32 }
        }
    }

    /// Score of a finished position for the side to move.
    fn terminal_score(&self, b: &Board, o: Outcome) -> i32 {
        match o {
            Outcome::Draw => 0,
            // the previous mover made the line
            _ => -(self.max - b.ply() as i32),
        }
    }

    pub fn solve(&mut self, b: &Board) -> Solved {
        self.nodes = 0;
        match self.negamax(b, -self.max, self.max) {
            Some(s) => Solved::Solved(self.to_result(b, s)),
            None => Solved::Unsolved { nodes: self.nodes },
        }
    }

    /// Exact score of `b` for the side to move, or `None` over budget.
    pub fn score(&mut self, b: &Board) -> Option<i32> {
        self.nodes = 0;
        self.negamax(b, -self.max, self.max)
    }

    fn negamax(&mut self, b: &Board, mut alpha: i32, mut beta: i32) -> Option<i32> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return None;
        }
        if let Some(o) = self.game.outcome(b) {
            return Some(self.terminal_score(b, o));
        }
        let alpha0 = alpha;
        let mut first = None;
        if self.use_table {
            if let Some(e) = self.table.get(b) {
                match e.bound {
                    Bound::Exact => return Some(e.score),
                    Bound::Lower => alpha = alpha.max(e.score),
                    Bound::Upper => beta = beta.min(e.score),
                }
                if alpha >= beta {
                    return Some(e.score);
                }
                first = Some(e.best as Action);
            }
        }
        let legal = self.game.legal_moves(b);
        let moves: Vec<Action> =
            first.into_iter().chain(self.order.iter().copied().filter(|&a| legal.contains(a) && Some(a) != first)).collect();
        let mut best = i32::MIN;
        let mut best_move = moves[0];
        for a in moves {
            let child = self.game.play(b, a);
            let s = -self.negamax(&child, -beta, -alpha)?;
            if s > best {
                best = s;
                best_move = a;
            }
            alpha = alpha.max(s);
            if alpha >= beta {
                break;
            }
        }
        if self.use_table {
            let bound = if best <= alpha0 {
                Bound::Upper
            } else if best >= beta {
                Bound::Lower
            } else {
                Bound::Exact
            };
            self.table.insert(*b, Entry { score: best, bound, best: best_move as u8 });
        }
        Some(best)
    }

    /// Exact score of every legal move, from the mover's perspective.
    pub fn move_scores(&mut self, b: &Board) -> Option<Vec<(Action, i32)>> {
        let legal = self.game.legal_moves(b);
        let mut out = Vec::with_capacity(legal.count());
        for a in legal.iter() {
            let child = self.game.play(b, a);
            out.push((a, -self.score(&child)?));
        }
        Some(out)
    }

    /// Optimal moves in ascending order.
    pub fn optimal_moves(&mut self, b: &Board) -> Option<Vec<Action>> {
        let scores = self.move_scores(b)?;
        let best = scores.iter().map(|x| x.1).max()?;
        Some(scores.into_iter().filter(|x| x.1 == best).map(|x| x.0).collect())
    }

    /// Quality of `action` at `b`.
    pub fn classify(&mut self, b: &Board, action: Action) -> Option<MoveQuality> {
        let scores = self.move_scores(b)?;
        let best = scores.iter().map(|x| x.1).max()?;
        let s = scores.iter().find(|x| x.0 == action)?.1;
        Some(if s == best {
            MoveQuality::Optimal
        } else if s.signum() == best.signum() {
            MoveQuality::Inaccuracy
        } else {
            MoveQuality::Blunder
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveQuality {
    Optimal,
    Inaccuracy,
    Blunder,
}

/// Aggregate move-quality rates over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub positions: usize,
    pub optimal: usize,
    pub inaccuracy: usize,
    pub blunder: usize,
    pub unsolved: usize,
}

impl QualityReport {
    pub fn scored(&self) -> usize {
        self.optimal + self.inaccuracy + self.blunder
    }

    pub fn optimal_rate(&self) -> f64 {
        self.optimal as f64 / self.scored().max(1) as f64
    }

    pub fn inaccuracy_rate(&self) -> f64 {
        self.inaccuracy as f64 / self.scored().max(1) as f64
    }

    pub fn blunder_rate(&self) -> f64 {
        self.blunder as f64 / self.scored().max(1) as f64
    }
}

/// Scores the move `policy` picks at each corpus position.
pub fn classify_moves(solver: &mut Solver, corpus: &[Board], mut policy: impl FnMut(&Board) -> Action) -> QualityReport {
    let mut r = QualityReport { positions: corpus.len(), ..Default::default() };
    for b in corpus {
        match solver.classify(b, policy(b)) {
            Some(MoveQuality::Optimal) => r.optimal += 1,
            Some(MoveQuality::Inaccuracy) => r.inaccuracy += 1,
            Some(MoveQuality::Blunder) => r.blunder += 1,
            None => r.unsolved += 1,
        }
    }
    r
}

/// Expected move-quality fractions of a stochastic policy over the corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedQuality {
    pub positions: usize,
    pub scored: usize,
    pub optimal: f64,
    pub inaccuracy: f64,
    pub blunder: f64,
}

/// Like [`classify_moves`], weighting every move by its probability.
pub fn expected_quality(
    solver: &mut Solver,
    corpus: &[Board],
    mut policy: impl FnMut(&Board) -> Vec<(Action, f64)>,
) -> ExpectedQuality {
    let mut q = ExpectedQuality { positions: corpus.len(), ..Default::default() };
    for b in corpus {
        let probs = policy(b);
        let mut acc = [0.0; 3];
        let mut ok = true;
        for (a, p) in probs {
            match solver.classify(b, a) {
                Some(MoveQuality::Optimal) => acc[0] += p,
                Some(MoveQuality::Inaccuracy) => acc[1] += p,
                Some(MoveQuality::Blunder) => acc[2] += p,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            q.scored += 1;
            q.optimal += acc[0];
            q.inaccuracy += acc[1];
            q.blunder += acc[2];
        }
    }
    let n = q.scored.max(1) as f64;
    q.optimal /= n;
    q.inaccuracy /= n;
    q.blunder /= n;
    q
}

/// Expected optimal rate of a uniformly random mover on the corpus.
pub fn uniform_optimal_rate(solver: &mut Solver, corpus: &[Board]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for b in corpus {
        if let Some(opt) = solver.optimal_moves(b) {
            total += opt.len() as f64 / solver.game().legal_moves(b).count() as f64;
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Positions reached by `2..=10` uniformly random plies, skipping finished
/// positions and those with a single legal move.
pub fn random_corpus<R: Rng>(game: &BoardGame, size: usize, rng: &mut R) -> Vec<Board> {
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let plies = rng.gen_range(2..=10);
        let mut b = Board::default();
        let mut ok = true;
        for _ in 0..plies {
            let legal: Vec<Action> = game.legal_moves(&b).iter().collect();
            if legal.is_empty() {
                ok = false;
                break;
            }
            b = game.play(&b, legal[rng.gen_range(0..legal.len())]);
        }
        if ok && game.outcome(&b).is_none() && game.legal_moves(&b).count() > 1 {
            out.push(b);
        }
    }
    out
}

/// Plain minimax over every position reachable from `root`, without
/// pruning, ordering or scores; the reference the solver is checked against.
pub fn naive_minimax(game: &BoardGame, root: Board) -> HashMap<Board, SolveResult> {
    let mut memo: HashMap<Board, SolveResult> = HashMap::new();
    let mut stack = vec![(root, false)];
    while let Some((b, expanded)) = stack.pop() {
        if memo.contains_key(&b) {
            continue;
        }
        if let Some(o) = game.outcome(&b) {
            let value = if o == Outcome::Draw { GameValue::Draw } else { GameValue::Loss };
            memo.insert(b, SolveResult { value, plies: 0 });
            continue;
        }
        let kids: Vec<Board> = game.legal_moves(&b).iter().map(|a| game.play(&b, a)).collect();
        if !expanded {
            stack.push((b, true));
            stack.extend(kids.into_iter().filter(|k| !memo.contains_key(k)).map(|k| (k, false)));
            continue;
        }
        let mut best: Option<SolveResult> = None;
        for k in kids {
            let c = memo[&k];
            let mine = SolveResult {
                value: match c.value {
                    GameValue::Win => GameValue::Loss,
                    GameValue::Draw => GameValue::Draw,
                    GameValue::Loss => GameValue::Win,
                },
                plies: c.plies + 1,
            };
            best = Some(match best {
                None => mine,
                Some(cur) => better(cur, mine),
            });
        }
        memo.insert(b, best.expect("nonterminal positions have moves"));
    }
    memo
}

// quicker wins, then draws, then slower losses
fn better(a: SolveResult, b: SolveResult) -> SolveResult {
    let rank = |r: SolveResult| (r.value.sign(), if r.value == GameValue::Loss { r.plies as i64 } else { -(r.plies as i64) });
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

/// Move sequence of a board reached by play, as base-36 digits; boards
/// are stored in corpora this way.
pub fn moves_to_string(moves: &[Action]) -> String {
    moves.iter().map(|&a| std::char::from_digit(a as u32, 36).unwrap()).collect()
}

/// Depth-limited alpha-beta with a line-count heuristic at the horizon.
#[derive(Debug, Clone)]
pub struct TreeSearchAgent {
    game: BoardGame,
    depth: u32,
    lines: Vec<u64>,
}

const WIN: i64 = 1 << 40;

impl TreeSearchAgent {
    pub fn new(game: BoardGame, depth: u32) -> Self {
        assert!(depth >= 1, "search depth must be at least 1");
        let s = *game.spec();
        let mut lines = Vec::new();
        let k = s.win_length;
        let dirs: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
        for r in 0..s.rows as isize {
            for c in 0..s.cols as isize {
                for (i, &(dr, dc)) in dirs.iter().enumerate() {
                    if k == 1 && i > 0 {
                        continue;
                    }
                    let (er, ec) = (r + dr * (k as isize - 1), c + dc * (k as isize - 1));
                    if er < 0 || er >= s.rows as isize || ec < 0 || ec >= s.cols as isize {
                        continue;
                    }
                    let m = (0..k as isize).fold(0u64, |m, j| m | 1 << ((r + dr * j) * s.cols as isize + c + dc * j));
                    lines.push(m);
                }
            }
        }
        TreeSearchAgent { game, depth, lines }
    }

    /// Open-line score for the side to move: each line free of the opponent
    /// counts `4^stones`, minus the same for the opponent.
    pub fn heuristic(&self, b: &Board) -> i64 {
        let me = (b.to_move() - 1) as usize;
        let (mine, theirs) = (b.stones[me], b.stones[1 - me]);
        let mut h = 0i64;
        for &l in &self.lines {
            if l & theirs == 0 {
                h += 4i64.pow((l & mine).count_ones());
            }
            if l & mine == 0 {
                h -= 4i64.pow((l & theirs).count_ones());
            }
        }
        h
    }

    fn search(&self, b: &Board, depth: u32, mut alpha: i64, beta: i64) -> i64 {
        if let Some(o) = self.game.outcome(b) {
            let max = self.game.spec().cells() as i64 + 1;
            return match o {
                Outcome::Draw => 0,
                _ => -(WIN + max - b.ply() as i64),
            };
        }
        if depth == 0 {
            return self.heuristic(b);
        }
        let mut best = i64::MIN;
        for a in self.game.legal_moves(b).iter() {
            let s = -self.search(&self.game.play(b, a), depth - 1, -beta, -alpha);
            best = best.max(s);
            alpha = alpha.max(s);
            if alpha >= beta {
                break;
            }
        }
        best
    }

    /// Best move; ties go to the lowest action index.
    pub fn choose(&self, b: &Board) -> Option<Action> {
        let mut best: Option<(Action, i64)> = None;
        for a in self.game.legal_moves(b).iter() {
            let alpha = best.map_or(i64::MIN + 1, |x| x.1);
            let s = -self.search(&self.game.play(b, a), self.depth - 1, i64::MIN + 1, -alpha);
            if best.map_or(true, |x| s > x.1) {
                best = Some((a, s));
            }
        }
        best.map(|x| x.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::BoardGameSpec;

    #[test]
    fn empty_tic_tac_toe_is_a_draw() {
        let mut s = Solver::new(BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap());
        assert_eq!(s.solve(&Board::default()), Solved::Solved(SolveResult { value: GameValue::Draw, plies: 9 }));
    }

    #[test]
    fn immediate_win() {
        let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
        let b = g.board_from_moves("0314").unwrap();
        let mut s = Solver::new(g);
        assert_eq!(s.solve(&b).result().unwrap(), SolveResult { value: GameValue::Win, plies: 1 });
        assert_eq!(s.optimal_moves(&b).unwrap(), vec![2]);
        assert_eq!(s.classify(&b, 2), Some(MoveQuality::Optimal));
    }

    #[test]
    fn slower_win_is_an_inaccuracy_and_dropping_it_a_blunder() {
        // X: 0, 4; O: 1, 3 -> X to move wins now with 8, or later via 6 (fork)
        let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
        let b = g.board_from_moves("0143").unwrap();
        let mut s = Solver::new(g);
        let scores = s.move_scores(&b).unwrap();
        assert_eq!(s.classify(&b, 8), Some(MoveQuality::Optimal));
        let slower = scores.iter().find(|x| x.1 > 0 && x.0 != 8).unwrap().0;
        assert_eq!(s.classify(&b, slower), Some(MoveQuality::Inaccuracy));
        let bad = scores.iter().find(|x| x.1 <= 0).unwrap().0;
        assert_eq!(s.classify(&b, bad), Some(MoveQuality::Blunder));
    }

    #[test]
    fn budget_yields_unsolved() {
        let mut s = Solver::new(BoardGame::new(BoardGameSpec::connect_four()).unwrap()).with_budget(1000);
        assert!(matches!(s.solve(&Board::default()), Solved::Unsolved { .. }));
    }

    #[test]
    fn search_agent_takes_immediate_win() {
        let g = BoardGame::new(BoardGameSpec::tic_tac_toe()).unwrap();
        let b = g.board_from_moves("0314").unwrap();
        assert_eq!(TreeSearchAgent::new(g, 1).choose(&b), Some(2));
    }
}
