//! Terminal rewards: outcome rewards for games, optionally divided by the
//! branching-factor product along the trajectory.

use serde::{Deserialize, Serialize};

use crate::env::{Outcome, Owner, Terminal, Trajectory};
use crate::objectives::ObjectiveError;

/// Outcome reward `e^λ` for a win, 1 for a draw, `e^-λ` for a loss, kept as
/// log-rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReward {
    pub lambda: f64,
}

impl OutcomeReward {
    pub fn log_reward(&self, outcome: Outcome, player: u8) -> f64 {
        self.lambda * outcome.sign_for(player) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardScheme {
    /// Use the log-rewards stored at terminal states.
    Direct,
    /// Raw outcome rewards.
    Naive { lambda: f64 },
    /// Outcome rewards divided by the player's branching-factor product.
    BranchAdjusted { lambda: f64 },
}

impl RewardScheme {
    /// Per-player log-rewards of a terminal, given the per-player log
    /// branching factors of the path that reached it.
    pub fn log_rewards(&self, terminal: &Terminal, log_branch: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        match (self, terminal) {
            (RewardScheme::Direct, Terminal::LogRewards(r)) => {
                if r.iter().all(|x| x.is_finite()) {
                    Ok(r.clone())
                } else {
                    Err(ObjectiveError::NonPositiveReward)
                }
            }
            (RewardScheme::Direct, Terminal::Outcome(_)) => {
                Err(ObjectiveError::Reward("game outcomes need an outcome reward scheme".into()))
            }
            (RewardScheme::Naive { lambda } | RewardScheme::BranchAdjusted { lambda }, Terminal::Outcome(o)) => {
                if log_branch.len() != 2 {
                    return Err(ObjectiveError::Reward("outcome rewards are defined for two players".into()));
                }
                let base = OutcomeReward { lambda: *lambda };
                let adjust = matches!(self, RewardScheme::BranchAdjusted { .. });
                Ok((0..2)
                    .map(|i| base.log_reward(*o, i as u8 + 1) - if adjust { log_branch[i] } else { 0.0 })
                    .collect())
            }
            (_, Terminal::LogRewards(_)) => Err(ObjectiveError::Reward("terminal carries no game outcome".into())),
        }
    }
}

/// Log of `B_i(x)`: product of child counts at the states where `player`
/// moved, read from the recorded masks.
pub fn branch_factor(traj: &Trajectory, player: u8) -> Result<f64, ObjectiveError> {
    if !traj.is_complete() {
        return Err(ObjectiveError::IncompleteTrajectory);
    }
    Ok(traj
        .steps
        .iter()
        .filter(|s| s.curr_player == Owner::Player(player))
        .map(|s| (s.mask.count() as f64).ln())
        .sum())
}

/// Per-player log branching factors of a complete trajectory.
pub fn trajectory_log_branch(traj: &Trajectory, num_players: usize) -> Result<Vec<f64>, ObjectiveError> {
    (1..=num_players as u8).map(|p| branch_factor(traj, p)).collect()
}

/// Branch-adjusted log-rewards `log R°_i - log B_i` for a finished game.
pub fn make_rewards(outcome: Option<Outcome>, lambda: f64, traj: &Trajectory) -> Result<Vec<f64>, ObjectiveError> {
    let o = outcome.ok_or_else(|| ObjectiveError::Reward("unknown outcome".into()))?;
    let lb = trajectory_log_branch(traj, 2)?;
    RewardScheme::BranchAdjusted { lambda }.log_rewards(&Terminal::Outcome(o), &lb)
}
