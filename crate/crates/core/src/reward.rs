//! Return-to-go reward model, trained apart from the teacher and the student.

use serde::{Deserialize, Serialize};

use crate::dataenv::{history, Dataset, EpisodeRecord, NormStats};
use crate::ndgrad::{fit_mse, Activation, FitConfig, Mat, NetworkParams, NodeId, Tape, Topology};
use crate::rng::Rng;
use crate::{Error, Result};

/// A differentiable score of clean, normalized samples. Implementations add
/// a `rows x 1` node to the tape without training any parameters.
pub trait TapeReward {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId>;
}

/// Discounted suffix sums `rtg_n = r_n + gamma * rtg_{n+1}`.
pub fn returns_to_go(episode: &EpisodeRecord, gamma: f64) -> Result<Vec<f64>> {
    rtg_of(&episode.rewards, gamma)
}

fn rtg_of(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument(
            "returns-to-go of an empty episode".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "discount {gamma} outside [0, 1]"
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// 1 inside the closed ball of `radius` around `goal`, else 0.
pub fn sparse_goal_reward(state: &[f64], goal: &[f64], radius: f64) -> f64 {
    let d2: f64 = state.iter().zip(goal).map(|(s, g)| (s - g) * (s - g)).sum();
    if d2.sqrt() <= radius {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub gamma: f64,
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    pub holdout: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 0.99,
            hidden: vec![64, 64],
            fit: FitConfig {
                steps: 3000,
                ..FitConfig::default()
            },
            holdout: 0.1,
        }
    }
}

/// `R_psi(s_hist, a)`: standardized return-to-go of taking `a` after the
/// state history `s_hist`. Inputs are in the same normalized space as the
/// teacher's conditions and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub params: NetworkParams,
    pub h: usize,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
    pub rtg_mean: f64,
    pub rtg_std: f64,
}

impl RewardModel {
    pub fn action_dim(&self) -> usize {
        self.action_stats.dim()
    }

    /// Standardized prediction from normalized histories and first actions.
    pub fn predict_normalized(&self, condition: &Mat, actions: &Mat) -> Result<Vec<f64>> {
        let input = Mat::hcat(&[condition, actions])?;
        Ok(self
            .params
            .forward(&input, &Mat::zeros(input.rows(), 0))?
            .into_vec())
    }

    /// Return-to-go in reward units from raw states and action.
    pub fn predict(&self, hist: &[Vec<f64>], action: &[f64]) -> Result<f64> {
        let cond = Mat::row_vector(self.state_stats.tile(self.h).normalize(&hist.concat()));
        let act = Mat::row_vector(self.action_stats.normalize(action));
        let z = self.predict_normalized(&cond, &act)?[0];
        Ok(z * self.rtg_std.max(crate::dataenv::STD_FLOOR) + self.rtg_mean)
    }
}

impl TapeReward for RewardModel {
    /// Scores the first action of each normalized window.
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        let src = tape.register(&self.params, false);
        let first = tape.slice(x0, 0, self.action_dim())?;
        let cond = tape.constant(condition.clone());
        let input = tape.concat(&[cond, first])?;
        let none = tape.constant(Mat::zeros(condition.rows(), 0));
        tape.mlp(src, input, none)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub gamma: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
    /// Held-out squared error in return units.
    pub heldout_mse: f64,
}

fn reward_samples(
    episodes: &[EpisodeRecord],
    h: usize,
    gamma: f64,
    cond_stats: &NormStats,
    action_stats: &NormStats,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for e in episodes {
        let rtg = returns_to_go(e, gamma)?;
        for n in 0..e.len() {
            let (hist, _) = history(&e.states, n, h);
            let mut row = cond_stats.normalize(&hist.concat());
            row.extend(action_stats.normalize(&e.actions[n]));
            x.push(row);
            y.push(rtg[n]);
        }
    }
    Ok((x, y))
}

/// Regresses discounted returns-to-go on `(state history, action)`. The
/// trailing `holdout` fraction of episodes is kept for the reported MSE.
pub fn train_reward(
    ds: &Dataset,
    h: usize,
    cfg: &RewardConfig,
    rng: &mut Rng,
) -> Result<(RewardModel, RewardSummary)> {
    if h == 0 {
        return Err(Error::InvalidArgument(
            "history length must be positive".into(),
        ));
    }
    let n_ep = ds.episodes.len();
    if n_ep == 0 {
        return Err(Error::Dataset(
            "no episodes to fit a reward model on".into(),
        ));
    }
    let n_test = ((n_ep as f64 * cfg.holdout).round() as usize).min(n_ep - 1);
    let (train_eps, test_eps) = ds.episodes.split_at(n_ep - n_test);
    let state_stats = ds.header.state_stats.clone();
    let action_stats = ds.header.action_stats.clone();
    let cond_stats = state_stats.tile(h);
    let (x, y) = reward_samples(train_eps, h, cfg.gamma, &cond_stats, &action_stats)?;
    let ystats = NormStats::from_rows(y.iter().map(std::slice::from_ref), 1);
    let (rtg_mean, rtg_std) = (ystats.mean[0], ystats.std[0]);
    let width = cond_stats.dim() + action_stats.dim();
    let xm = Mat::from_rows(&x, width)?;
    let ym = Mat::from_vec(y.len(), 1, ystats.normalize(&y))?;
    let topo = Topology::new(width, 0, cfg.hidden.clone(), 1, Activation::Mish);
    let mut params = NetworkParams::init(topo, rng);
    fit_mse(&mut params, &xm, &ym, &cfg.fit, rng)?;
    let model = RewardModel {
        params,
        h,
        state_stats,
        action_stats,
        rtg_mean,
        rtg_std,
    };
    let (tx, ty) = reward_samples(test_eps, h, cfg.gamma, &cond_stats, &model.action_stats)?;
    let heldout_mse = if tx.is_empty() {
        0.0
    } else {
        let pred = model
            .params
            .forward(&Mat::from_rows(&tx, width)?, &Mat::zeros(tx.len(), 0))?;
        let pred = ystats.denormalize(pred.data());
        pred.iter()
            .zip(&ty)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / ty.len() as f64
    };
    Ok((
        model,
        RewardSummary {
            gamma: cfg.gamma,
            train_samples: x.len(),
            heldout_samples: tx.len(),
            heldout_mse,
        },
    ))
}

/// Differentiable stand-in for [`sparse_goal_reward`] on a normalized state
/// plan: the mean over plan states of `sigmoid((radius - dist) / temperature)`,
/// with the goal read from columns `[d, 2d)` of the normalized condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedGoalReward {
    pub state_stats: NormStats,
    pub plan_len: usize,
    pub radius: f64,
    pub temperature: f64,
}

/// Keeps the distance differentiable at zero.
const DIST_SMOOTHING: f64 = 1e-3;

impl SmoothedGoalReward {
    /// Smoothed reward of one raw state.
    pub fn state_value(&self, state: &[f64], goal: &[f64]) -> f64 {
        let d2: f64 = state.iter().zip(goal).map(|(s, g)| (s - g) * (s - g)).sum();
        let dist = (d2 + DIST_SMOOTHING * DIST_SMOOTHING).sqrt() - DIST_SMOOTHING;
        let z = (self.radius - dist) / self.temperature;
        1.0 / (1.0 + (-z).exp())
    }

    /// Eager value of a raw plan, for checking the taped form.
    pub fn value(&self, plan: &[Vec<f64>], goal: &[f64]) -> f64 {
        plan.iter().map(|s| self.state_value(s, goal)).sum::<f64>() / plan.len() as f64
    }
}

impl TapeReward for SmoothedGoalReward {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        let d = self.state_stats.dim();
        let rows = condition.rows();
        let goal = tape.constant(condition.slice_cols(d, d));
        let scales: Vec<f64> = self
            .state_stats
            .std
            .iter()
            .map(|s| s.max(crate::dataenv::STD_FLOOR))
            .collect();
        let zero = tape.constant(Mat::zeros(rows, d));
        let offset = tape.constant(Mat::filled(rows, 1, self.radius / self.temperature));
        let mut total = None;
        for k in 0..self.plan_len {
            let state = tape.slice(x0, k * d, d)?;
            let diff = tape.sub(state, goal)?;
            let raw = tape.col_scale(diff, &scales)?;
            let dist = tape.pseudo_huber(raw, zero, DIST_SMOOTHING)?;
            let z = tape.scale(dist, -1.0 / self.temperature);
            let z = tape.add(z, offset)?;
            let r = tape.activation(z, Activation::Sigmoid);
            total = Some(match total {
                None => r,
                Some(t) => tape.add(t, r)?,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidArgument("empty plan".into()))?;
        Ok(tape.scale(total, 1.0 / self.plan_len as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rtg_recursions() {
        assert_eq!(rtg_of(&[1.0, 1.0, 1.0], 0.0).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(rtg_of(&[1.0, 1.0, 1.0], 1.0).unwrap(), vec![3.0, 2.0, 1.0]);
        assert_eq!(rtg_of(&[2.0, 0.0, 5.0], 0.5).unwrap(), vec![3.25, 2.5, 5.0]);
        assert!(rtg_of(&[], 0.5).is_err());
        assert!(rtg_of(&[1.0], 1.5).is_err());
    }

    #[test]
    fn goal_ball_is_closed() {
        assert_eq!(sparse_goal_reward(&[1.0, 1.0], &[1.0, 1.0], 0.5), 1.0);
        assert_eq!(sparse_goal_reward(&[9.0, 1.0], &[1.0, 1.0], 0.5), 0.0);
        assert_eq!(sparse_goal_reward(&[1.5, 1.0], &[1.0, 1.0], 0.5), 1.0);
    }

    #[test]
    fn smoothed_goal_reward_tape_matches_eager() {
        let r = SmoothedGoalReward {
            state_stats: NormStats {
                mean: vec![2.0, 1.0],
                std: vec![1.5, 0.5],
            },
            plan_len: 2,
            radius: 0.5,
            temperature: 0.1,
        };
        let start = [0.0, 0.0];
        let goal = [2.5, 1.2];
        let plan = [[1.0, 1.0], [2.2, 1.4]];
        let cond = Mat::row_vector(r.state_stats.tile(2).normalize(&[start, goal].concat()));
        let x = Mat::row_vector(r.state_stats.normalize(&plan.concat()));
        let mut tape = Tape::new();
        let xi = tape.input(x);
        let v = r.reward_node(&mut tape, &cond, xi).unwrap();
        let eager = r.value(&[plan[0].to_vec(), plan[1].to_vec()], &goal);
        assert!((tape.value(v).data()[0] - eager).abs() < 1e-12);
    }
}
