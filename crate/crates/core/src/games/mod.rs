//! Concrete environments.

pub mod board;
pub mod sequence;
pub mod toy;

pub use board::{make_board_game, Board, BoardGame, BoardGameSpec, BoardState};
pub use sequence::{make_sequence_env, SeqState, SequenceEnv, SequenceEnvSpec};
pub use toy::{
    fig1a_with_env_probs, make_fig1a_tree, random_toy_tree, single_move_game, two_by_two_game, ToyNode,
    ToyState, ToyStochasticTree,
};
