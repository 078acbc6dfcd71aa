use rand::Rng as _;

use super::dataset::{Dataset, NormStats};
use crate::ndgrad::Mat;
use crate::rng::Rng;
use crate::{Error, Result};

/// A training window: `h` past states up to the anchor and the `c` actions
/// taken from the anchor on.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanWindow {
    pub state_history: Vec<Vec<f64>>,
    pub action_horizon: Vec<Vec<f64>>,
    pub anchor: usize,
    pub episode: usize,
    /// The history reaches before the episode start and repeats its first state.
    pub padded: bool,
}

/// Denoising targets `x` with their conditions, both normalized, one sample
/// per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub x: Mat,
    pub cond: Mat,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn batch(&self, n: usize, rng: &mut Rng) -> (Mat, Mat) {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        (self.x.select_rows(&idx), self.cond.select_rows(&idx))
    }
}

#[derive(Clone, Debug)]
pub struct WindowSet {
    pub h: usize,
    pub c: usize,
    pub windows: Vec<PlanWindow>,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
}

impl WindowSet {
    pub fn cond_stats(&self) -> NormStats {
        self.state_stats.tile(self.h)
    }

    pub fn target_stats(&self) -> NormStats {
        self.action_stats.tile(self.c)
    }

    pub fn samples(&self) -> Result<SampleSet> {
        let (cs, ts) = (self.cond_stats(), self.target_stats());
        let x: Vec<Vec<f64>> = self
            .windows
            .iter()
            .map(|w| ts.normalize(&w.action_horizon.concat()))
            .collect();
        let cond: Vec<Vec<f64>> = self
            .windows
            .iter()
            .map(|w| cs.normalize(&w.state_history.concat()))
            .collect();
        Ok(SampleSet {
            x: Mat::from_rows(&x, ts.dim())?,
            cond: Mat::from_rows(&cond, cs.dim())?,
        })
    }
}

/// Stacked history `s_{n-h+1..=n}`, repeating `states[0]` before the start.
pub fn history(states: &[Vec<f64>], n: usize, h: usize) -> (Vec<Vec<f64>>, bool) {
    let padded = n + 1 < h;
    let hist = (0..h)
        .map(|k| {
            let back = h - 1 - k;
            states[n.saturating_sub(back)].clone()
        })
        .collect();
    (hist, padded)
}

/// Every window with a full action horizon inside its episode.
pub fn window_dataset(ds: &Dataset, h: usize, c: usize) -> Result<WindowSet> {
    if h == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "window sizes must be positive, got h={h}, c={c}"
        )));
    }
    let shortest = ds.episodes.iter().map(|e| e.len()).min().unwrap_or(0);
    if c > shortest {
        return Err(Error::InvalidArgument(format!(
            "action horizon {c} exceeds the shortest episode ({shortest} steps)"
        )));
    }
    let mut windows = Vec::new();
    for (ei, e) in ds.episodes.iter().enumerate() {
        for n in 0..=e.len() - c {
            let (state_history, padded) = history(&e.states, n, h);
            windows.push(PlanWindow {
                state_history,
                action_horizon: e.actions[n..n + c].to_vec(),
                anchor: n,
                episode: ei,
                padded,
            });
        }
    }
    Ok(WindowSet {
        h,
        c,
        windows,
        state_stats: ds.header.state_stats.clone(),
        action_stats: ds.header.action_stats.clone(),
    })
}

/// Whole-episode state plans for open-loop planning. The target is
/// `s_1..s_{L-1}`; the condition is the start state and the goal.
#[derive(Clone, Debug)]
pub struct StatePlanSet {
    pub samples: SampleSet,
    pub plan_len: usize,
    pub state_stats: NormStats,
}

impl StatePlanSet {
    pub fn condition(&self, start: &[f64], goal: &[f64]) -> Vec<f64> {
        self.state_stats.tile(2).normalize(&[start, goal].concat())
    }

    /// Plan row back to raw states.
    pub fn decode(&self, row: &[f64]) -> Vec<Vec<f64>> {
        let d = self.state_stats.dim();
        self.state_stats
            .denormalize(row)
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn state_plans(ds: &Dataset) -> Result<StatePlanSet> {
    let len = ds.env().horizon;
    let d = ds.env().state_dim;
    let stats = ds.header.state_stats.clone();
    let mut x = Vec::new();
    let mut cond = Vec::new();
    for (i, e) in ds.episodes.iter().enumerate() {
        let goal = e
            .goal
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("episode {i} has no goal")))?;
        if e.len() != len {
            return Err(Error::Dataset(format!(
                "episode {i} has {} steps, plans need the full horizon {len}",
                e.len()
            )));
        }
        x.push(stats.normalize(&e.states[1..].concat()));
        cond.push(
            stats
                .tile(2)
                .normalize(&[e.states[0].as_slice(), goal].concat()),
        );
    }
    Ok(StatePlanSet {
        samples: SampleSet {
            x: Mat::from_rows(&x, (len - 1) * d)?,
            cond: Mat::from_rows(&cond, 2 * d)?,
        },
        plan_len: len - 1,
        state_stats: stats,
    })
}
