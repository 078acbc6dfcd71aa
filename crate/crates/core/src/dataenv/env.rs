use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::maze::MazeLayout;
use crate::rng::{normal, Rng};
use crate::{Error, Result};

/// Two reward zones reached along opposite corridors from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachLayout {
    pub high_zone: [f64; 2],
    pub low_zone: [f64; 2],
    pub zone_radius: f64,
    pub high_rate: f64,
    pub low_rate: f64,
    /// Std of the Gaussian jitter on the start position.
    pub start_jitter: f64,
}

impl Default for ReachLayout {
    fn default() -> Self {
        ReachLayout {
            high_zone: [1.0, 0.0],
            low_zone: [-1.0, 0.0],
            zone_radius: 0.25,
            high_rate: 10.0,
            low_rate: 1.0,
            start_jitter: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    BimodalReach(ReachLayout),
    PointmassMaze(MazeLayout),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub horizon: usize,
    /// Position change per unit action per step.
    pub step_size: f64,
    pub process_noise: f64,
    pub dynamics: Dynamics,
}

impl EnvSpec {
    pub fn bimodal_reach() -> Self {
        EnvSpec {
            state_dim: 2,
            action_dim: 2,
            action_bound: 1.0,
            horizon: 32,
            step_size: 0.1,
            process_noise: 0.0,
            dynamics: Dynamics::BimodalReach(ReachLayout::default()),
        }
    }

    /// Maze sized for a planning horizon of 32, 64 or 96 steps.
    pub fn pointmass_maze(horizon: usize) -> Result<Self> {
        let side = match horizon {
            32 => 3,
            64 => 4,
            96 => 5,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "maze horizons are 32, 64 or 96, got {horizon}"
                )))
            }
        };
        Ok(EnvSpec {
            state_dim: 2,
            action_dim: 2,
            action_bound: 1.0,
            horizon,
            step_size: 0.5,
            process_noise: 0.0,
            dynamics: Dynamics::PointmassMaze(MazeLayout::new(side, side, 7 + side as u64)),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.action_bound.is_finite() && self.action_bound > 0.0) {
            errs.push("action_bound must be finite and positive".to_string());
        }
        if self.horizon == 0 {
            errs.push("horizon must be positive".to_string());
        }
        if self.state_dim != 2 || self.action_dim != 2 {
            errs.push("point-mass environments are 2D".to_string());
        }
        if !(self.step_size > 0.0) {
            errs.push("step_size must be positive".to_string());
        }
        if self.process_noise < 0.0 {
            errs.push("process_noise must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn goal(&self) -> Option<[f64; 2]> {
        match &self.dynamics {
            Dynamics::BimodalReach(_) => None,
            Dynamics::PointmassMaze(m) => Some(m.goal_position()),
        }
    }

    pub fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::BimodalReach(l) => {
                vec![l.start_jitter * normal(rng), l.start_jitter * normal(rng)]
            }
            Dynamics::PointmassMaze(m) => m.random_start(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The action was outside the bounds and got clamped.
    pub clamped: bool,
}

/// Advances one step. `t` is the index of the step being taken (0-based);
/// the episode ends after step `horizon - 1`, or on reaching a maze goal.
pub fn env_step(
    spec: &EnvSpec,
    state: &[f64],
    action: &[f64],
    t: usize,
    rng: &mut Rng,
) -> Transition {
    let b = spec.action_bound;
    let clamped = action.iter().any(|a| a.abs() > b || !a.is_finite());
    let a: Vec<f64> = action
        .iter()
        .map(|&v| if v.is_finite() { v.clamp(-b, b) } else { 0.0 })
        .collect();
    let mut next: Vec<f64> = state
        .iter()
        .zip(&a)
        .map(|(s, u)| s + spec.step_size * u)
        .collect();
    if spec.process_noise > 0.0 {
        for v in &mut next {
            *v += spec.process_noise * normal(rng);
        }
    }
    let last = t + 1 >= spec.horizon;
    match &spec.dynamics {
        Dynamics::BimodalReach(l) => {
            let reward = reach_reward(l, &next);
            Transition {
                next_state: next,
                reward,
                done: last,
                clamped,
            }
        }
        Dynamics::PointmassMaze(m) => {
            let next = m.resolve_motion(state, &next);
            let reward = m.goal_reward(&next);
            Transition {
                done: last || reward > 0.0,
                next_state: next,
                reward,
                clamped,
            }
        }
    }
}

pub(crate) fn reach_reward(l: &ReachLayout, s: &[f64]) -> f64 {
    let d = |z: &[f64; 2]| ((s[0] - z[0]).powi(2) + (s[1] - z[1]).powi(2)).sqrt();
    if d(&l.high_zone) <= l.zone_radius {
        l.high_rate
    } else if d(&l.low_zone) <= l.zone_radius {
        l.low_rate
    } else {
        0.0
    }
}

/// Scripted data-collection behaviors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Expert,
    Medium,
    Random,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Expert => "expert",
            Behavior::Medium => "medium",
            Behavior::Random => "random",
        }
    }
}

/// Proportional-controller gain used by the scripted behaviors.
const GAIN: f64 = 10.0;

/// Std of the Gaussian action noise of the scripted behaviors.
pub const BEHAVIOR_NOISE: f64 = 0.1;

fn steer(spec: &EnvSpec, from: &[f64], target: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = from
        .iter()
        .zip(target)
        .map(|(s, g)| GAIN * (g - s) * 0.1 / spec.step_size)
        .collect();
    // cap the speed, keep the heading
    let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
    let scale = if n > spec.action_bound {
        spec.action_bound / n
    } else {
        1.0
    };
    raw.iter()
        .map(|v| (v * scale + noise * normal(rng)).clamp(-spec.action_bound, spec.action_bound))
        .collect()
}

/// Action of a scripted behavior at `state`. Maze behaviors navigate to
/// `target` (the environment goal when `None`); the reach task ignores it.
pub fn behavior_action(
    spec: &EnvSpec,
    behavior: Behavior,
    state: &[f64],
    target: Option<&[f64]>,
    rng: &mut Rng,
) -> Vec<f64> {
    if behavior == Behavior::Random {
        return (0..spec.action_dim)
            .map(|_| rng.random_range(-spec.action_bound..spec.action_bound))
            .collect();
    }
    match &spec.dynamics {
        Dynamics::BimodalReach(l) => {
            let z = if behavior == Behavior::Expert {
                l.high_zone
            } else {
                l.low_zone
            };
            steer(spec, state, &z, BEHAVIOR_NOISE, rng)
        }
        Dynamics::PointmassMaze(m) => {
            let noise = if behavior == Behavior::Expert {
                BEHAVIOR_NOISE
            } else {
                3.0 * BEHAVIOR_NOISE
            };
            let goal = m.goal_position();
            let waypoint = m.next_waypoint(state, target.unwrap_or(&goal));
            steer(spec, state, &waypoint, noise, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_action_keeps_state() {
        let spec = EnvSpec::bimodal_reach();
        let tr = env_step(&spec, &[0.3, -0.2], &[0.0, 0.0], 0, &mut rng::seeded(0));
        assert_eq!(tr.next_state, vec![0.3, -0.2]);
        assert!(!tr.done);
        assert!(!tr.clamped);
    }

    #[test]
    fn done_exactly_at_horizon() {
        let spec = EnvSpec::bimodal_reach();
        let mut r = rng::seeded(0);
        assert!(!env_step(&spec, &[0.0, 0.0], &[0.0, 0.0], 30, &mut r).done);
        assert!(env_step(&spec, &[0.0, 0.0], &[0.0, 0.0], 31, &mut r).done);
    }

    #[test]
    fn out_of_bounds_action_is_clamped() {
        let spec = EnvSpec::bimodal_reach();
        let tr = env_step(&spec, &[0.0, 0.0], &[5.0, -0.5], 0, &mut rng::seeded(0));
        assert!(tr.clamped);
        assert!((tr.next_state[0] - 0.1).abs() < 1e-15);
    }

    /// Straight-line full-speed policy toward a zone: the agent enters the
    /// zone after ceil((d - r) / step) steps and collects `rate` on every
    /// step from then on.
    fn straight_line_return(zone: [f64; 2]) -> f64 {
        let spec = EnvSpec::bimodal_reach();
        let mut r = rng::seeded(0);
        let mut s = vec![0.0, 0.0];
        let mut total = 0.0;
        for t in 0..spec.horizon {
            let dx = zone[0] - s[0];
            let a = [dx.signum() * (dx.abs() / 0.1).min(1.0), 0.0];
            let tr = env_step(&spec, &s, &a, t, &mut r);
            total += tr.reward;
            s = tr.next_state;
        }
        total
    }

    #[test]
    fn corridor_returns_match_closed_form() {
        // distance 1, radius 0.25, speed 0.1: the zone is entered on the
        // 8th step, leaving 32 - 8 + 1 rewarded steps
        let entered = ((1.0f64 - 0.25) / 0.1).ceil() as usize;
        assert_eq!(32 - entered + 1, 25);
        assert!((straight_line_return([1.0, 0.0]) - 250.0).abs() < 1e-9);
        assert!((straight_line_return([-1.0, 0.0]) - 25.0).abs() < 1e-9);
    }
}
