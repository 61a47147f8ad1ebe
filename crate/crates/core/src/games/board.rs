//! Tic-tac-toe style and connect-k style board games on bitboards.
//!
//! Cell `r * cols + c` holds row `r`, column `c`; with gravity, row 0 is the
//! bottom row. Each player owns one `u64` of stones.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionMask, EnvError, Outcome, Owner, Terminal, TreeEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardGameSpec {
    pub rows: usize,
    pub cols: usize,
    pub win_length: usize,
    /// `true` for connect-k (drop into a column), `false` for free placement.
    pub gravity: bool,
}

impl BoardGameSpec {
    pub const fn tic_tac_toe() -> Self {
        BoardGameSpec { rows: 3, cols: 3, win_length: 3, gravity: false }
    }

    pub const fn connect_four() -> Self {
        BoardGameSpec { rows: 6, cols: 7, win_length: 4, gravity: true }
    }

    pub const fn connect_k(rows: usize, cols: usize, k: usize) -> Self {
        BoardGameSpec { rows, cols, win_length: k, gravity: true }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn action_space_size(&self) -> usize {
        if self.gravity {
            self.cols
        } else {
            self.cells()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |m: &str| Err(EnvError::InvalidSpec(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return err("board needs at least one row and one column");
        }
        if self.cells() > 64 {
            return err("rows * cols must be at most 64");
        }
        if self.win_length == 0 || self.win_length > self.rows.max(self.cols) {
            return err("win length must be between 1 and max(rows, cols)");
        }
        Ok(())
    }
}

/// A position: the stones of each player. Side to move follows from the
/// stone count since player 1 moves first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Board {
    pub stones: [u64; 2],
}

impl Board {
    pub fn occupied(&self) -> u64 {
        self.stones[0] | self.stones[1]
    }

    pub fn ply(&self) -> usize {
        self.occupied().count_ones() as usize
    }

    /// 1 or 2.
    pub fn to_move(&self) -> u8 {
        1 + (self.ply() % 2) as u8
    }

    pub fn key_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(16);
        v.extend_from_slice(&self.stones[0].to_le_bytes());
        v.extend_from_slice(&self.stones[1].to_le_bytes());
        v
    }
}

#[derive(Debug, Clone)]
pub struct BoardGame {
    spec: BoardGameSpec,
    full: u64,
    // per direction: shift amount and the cells where a line of k can start
    shifts: [usize; 4],
    starts: [u64; 4],
    columns: Vec<u64>,
}

pub fn make_board_game(spec: BoardGameSpec) -> Result<BoardGame, EnvError> {
    BoardGame::new(spec)
}

impl BoardGame {
    pub fn new(spec: BoardGameSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let (rows, cols, k) = (spec.rows, spec.cols, spec.win_length);
        let cell = |r: usize, c: usize| 1u64 << (r * cols + c);
        let mut starts = [0u64; 4];
        for r in 0..rows {
            for c in 0..cols {
                if c + k <= cols {
                    starts[0] |= cell(r, c);
                }
                if r + k <= rows {
                    starts[1] |= cell(r, c);
                    if c + k <= cols {
                        starts[2] |= cell(r, c);
                    }
                    if c + 1 >= k {
                        starts[3] |= cell(r, c);
                    }
                }
            }
        }
        // a single cell is a line in every direction; keep one copy
        if k == 1 {
            starts = [starts[0], 0, 0, 0];
        }
        let columns = (0..cols).map(|c| (0..rows).fold(0, |m, r| m | cell(r, c))).collect();
        let full = if spec.cells() == 64 { u64::MAX } else { (1u64 << spec.cells()) - 1 };
        Ok(BoardGame { spec, full, shifts: [1, cols, cols + 1, cols.wrapping_sub(1)], starts, columns })
    }

    pub fn spec(&self) -> &BoardGameSpec {
        &self.spec
    }

    /// Does `bits` contain k stones in a row? Shift-and-AND per direction.
    pub fn has_line(&self, bits: u64) -> bool {
        let k = self.spec.win_length;
        for d in 0..4 {
            let mut acc = bits & self.starts[d];
            let mut j = 1;
            while acc != 0 && j < k {
                acc &= bits >> (j * self.shifts[d]);
                j += 1;
            }
            if acc != 0 {
                return true;
            }
        }
        false
    }

    pub fn outcome(&self, b: &Board) -> Option<Outcome> {
        if self.has_line(b.stones[0]) {
            Some(Outcome::P1Win)
        } else if self.has_line(b.stones[1]) {
            Some(Outcome::P2Win)
        } else if b.occupied() == self.full {
            Some(Outcome::Draw)
        } else {
            None
        }
    }

    /// Legal moves ignoring whether the game is already decided.
    pub fn open_moves(&self, b: &Board) -> ActionMask {
        let occ = b.occupied();
        let width = self.spec.action_space_size();
        if self.spec.gravity {
            let mut m = ActionMask::empty(width);
            for (c, &col) in self.columns.iter().enumerate() {
                if occ & col != col {
                    m.insert(c);
                }
            }
            m
        } else {
            ActionMask::from_bits(!occ & self.full, width)
        }
    }

    pub fn legal_moves(&self, b: &Board) -> ActionMask {
        if self.outcome(b).is_some() {
            ActionMask::empty(self.spec.action_space_size())
        } else {
            self.open_moves(b)
        }
    }

    /// Cell a move occupies.
    pub fn target_cell(&self, b: &Board, action: Action) -> usize {
        if self.spec.gravity {
            let h = (b.occupied() & self.columns[action]).count_ones() as usize;
            h * self.spec.cols + action
        } else {
            action
        }
    }

    /// Places a stone for the side to move. The move must be open.
    pub fn play(&self, b: &Board, action: Action) -> Board {
        let cell = self.target_cell(b, action);
        debug_assert!(b.occupied() >> cell & 1 == 0, "cell {cell} occupied");
        let mut next = *b;
        next.stones[(b.to_move() - 1) as usize] |= 1 << cell;
        next
    }

    /// Mirror image across the vertical axis.
    pub fn mirror(&self, b: &Board) -> Board {
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        let flip = |bits: u64| {
            let mut out = 0;
            for r in 0..rows {
                for c in 0..cols {
                    if bits >> (r * cols + c) & 1 == 1 {
                        out |= 1 << (r * cols + cols - 1 - c);
                    }
                }
            }
            out
        };
        Board { stones: [flip(b.stones[0]), flip(b.stones[1])] }
    }

    pub fn mirror_action(&self, action: Action) -> Action {
        let cols = self.spec.cols;
        if self.spec.gravity {
            cols - 1 - action
        } else {
            let (r, c) = (action / cols, action % cols);
            r * cols + cols - 1 - c
        }
    }

    /// Plays a move-sequence string (one base-36 digit per move).
    pub fn board_from_moves(&self, moves: &str) -> Result<Board, EnvError> {
        let mut b = Board::default();
        for ch in moves.chars() {
            let a = ch
                .to_digit(36)
                .ok_or_else(|| EnvError::InvalidSpec(format!("bad move character {ch:?}")))?
                as Action;
            if !self.legal_moves(&b).contains(a) {
                return Err(EnvError::IllegalAction { state: crate::env::StateKey::root(), action: a });
            }
            b = self.play(&b, a);
        }
        Ok(b)
    }

    pub fn render(&self, b: &Board) -> String {
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        let mut out = String::new();
        let row_order: Vec<usize> = if self.spec.gravity { (0..rows).rev().collect() } else { (0..rows).collect() };
        for r in row_order {
            for c in 0..cols {
                let i = r * cols + c;
                out.push(match (b.stones[0] >> i & 1, b.stones[1] >> i & 1) {
                    (1, _) => 'X',
                    (_, 1) => 'O',
                    _ => '.',
                });
            }
            out.push('\n');
        }
        out
    }
}

/// Environment state: a position plus the history that reached it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoardState {
    pub board: Board,
    pub history: Vec<u8>,
    pub outcome: Option<Outcome>,
}

impl fmt::Display for BoardState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} after {:?}", self.board.stones, self.history)
    }
}

impl TreeEnv for BoardGame {
    type State = BoardState;

    fn num_players(&self) -> usize {
        2
    }

    fn action_space_size(&self) -> usize {
        self.spec.action_space_size()
    }

    fn root(&self) -> BoardState {
        BoardState { board: Board::default(), history: Vec::new(), outcome: None }
    }

    fn history<'a>(&self, s: &'a BoardState) -> &'a [u8] {
        &s.history
    }

    fn legal_actions(&self, s: &BoardState) -> ActionMask {
        if s.outcome.is_some() {
            ActionMask::empty(self.action_space_size())
        } else {
            self.open_moves(&s.board)
        }
    }

    fn owner_of(&self, s: &BoardState) -> Option<Owner> {
        match s.outcome {
            Some(_) => None,
            None => Some(Owner::Player(s.board.to_move())),
        }
    }

    fn apply(&self, s: &BoardState, action: Action) -> BoardState {
        let mover = s.board.to_move();
        let board = self.play(&s.board, action);
        let outcome = if self.has_line(board.stones[(mover - 1) as usize]) {
            Some(if mover == 1 { Outcome::P1Win } else { Outcome::P2Win })
        } else if board.occupied() == self.full {
            Some(Outcome::Draw)
        } else {
            None
        };
        let mut history = Vec::with_capacity(s.history.len() + 1);
        history.extend_from_slice(&s.history);
        history.push(action as u8);
        BoardState { board, history, outcome }
    }

    fn terminal(&self, s: &BoardState) -> Option<Terminal> {
        s.outcome.map(Terminal::Outcome)
    }

    fn table_key(&self, s: &BoardState) -> Vec<u8> {
        s.board.key_bytes()
    }

    fn features(&self, s: &BoardState) -> Vec<f64> {
        let n = self.spec.cells();
        let me = (s.board.to_move() - 1) as usize;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            out[i] = (s.board.stones[me] >> i & 1) as f64;
            out[n + i] = (s.board.stones[1 - me] >> i & 1) as f64;
            out[2 * n + i] = if me == 0 { 1.0 } else { 0.0 };
        }
        out
    }

    fn feature_shape(&self) -> [usize; 3] {
        [3, self.spec.rows, self.spec.cols]
    }
}
