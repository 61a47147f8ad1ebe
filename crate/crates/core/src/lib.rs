//! Expected and adversarial flow networks on tree-structured environments.
//!
//! The crate covers environments ([`env`], [`games`]), exact flows
//! ([`exact`]), training losses ([`objectives`]), parameterized policies
//! ([`model`]), self-play training ([`selfplay`]), perfect game solving
//! ([`solver`]) and evaluation ([`eval`]).

pub mod env;
pub mod eval;
pub mod exact;
pub mod games;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod selfplay;
pub mod solver;
pub mod tree;
pub mod util;
