//! Shaped reward, kept as separately logged components.

use serde::{Deserialize, Serialize};

use super::Action;

pub const GOAL_REWARD: f64 = 10.0;
pub const FAILURE_PENALTY: f64 = -2.0;
pub const STEP_PENALTY: f64 = -0.01;
pub const OPPOSITE_TURN_PENALTY: f64 = -0.05;
pub const DISTANCE_GAIN: f64 = 0.5;
pub const FIRST_SIGHT_BONUS: f64 = 0.1;
pub const EXPLORE_FORWARD_BONUS: f64 = 0.01;
pub const EXPLORE_TURN_BONUS: f64 = 0.005;

/// What happened during one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Events {
    pub action: Action,
    pub last_action: Option<Action>,
    pub reached_goal: bool,
    pub wrong_goal: bool,
    pub collision: bool,
    /// Goal visible after the step.
    pub goal_in_view: bool,
    /// Goal visible for the first time this episode.
    pub first_sight: bool,
    pub d_prev: f64,
    pub d_curr: f64,
}

/// One entry per reward row; rows that do not apply are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub goal: f64,
    pub failure: f64,
    pub step: f64,
    pub opposite_turn: f64,
    pub distance: f64,
    pub first_sight: f64,
    pub explore: f64,
}

impl RewardParts {
    /// Sum in row order; every emitted reward is produced here.
    pub fn total(&self) -> f64 {
        self.goal + self.failure + self.step + self.opposite_turn + self.distance + self.first_sight + self.explore
    }
}

pub fn reward_fn(ev: &Events) -> RewardParts {
    let mut r = RewardParts {
        step: STEP_PENALTY,
        distance: DISTANCE_GAIN * (ev.d_prev - ev.d_curr),
        ..RewardParts::default()
    };
    if ev.reached_goal {
        r.goal = GOAL_REWARD;
    }
    if ev.wrong_goal || ev.collision {
        r.failure = FAILURE_PENALTY;
    }
    if ev.last_action.is_some_and(|l| ev.action.opposite(l)) {
        r.opposite_turn = OPPOSITE_TURN_PENALTY;
    }
    if ev.first_sight {
        r.first_sight = FIRST_SIGHT_BONUS;
    }
    if !ev.goal_in_view {
        r.explore = if ev.action.is_turn() { EXPLORE_TURN_BONUS } else { EXPLORE_FORWARD_BONUS };
    }
    r
}
