use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, NormStats};
use crate::ndgrad::{fit_mse, Activation, FitConfig, Mat, NetworkParams, Topology};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReverseDynamicsConfig {
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    /// Fraction of transitions held out for the reported MSE.
    pub holdout: f64,
}

impl Default for ReverseDynamicsConfig {
    fn default() -> Self {
        ReverseDynamicsConfig {
            hidden: vec![64, 64],
            fit: FitConfig {
                steps: 3000,
                ..FitConfig::default()
            },
            holdout: 0.1,
        }
    }
}

/// Regressor `(s_n, s_{n+1}) -> a_n` over normalized quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverseDynamics {
    pub params: NetworkParams,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
}

impl ReverseDynamics {
    fn features(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        self.state_stats.tile(2).normalize(&[s, s_next].concat())
    }

    pub fn infer(&self, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
        let x = Mat::row_vector(self.features(s, s_next));
        let out = self.params.forward(&x, &Mat::zeros(1, 0))?;
        Ok(self.action_stats.denormalize(out.data()))
    }
}

fn transitions(ds: &Dataset, ss: &NormStats, acts: &NormStats) -> Result<(Mat, Mat)> {
    let pair = ss.tile(2);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for e in &ds.episodes {
        for n in 0..e.len().saturating_sub(1) {
            x.push(pair.normalize(&[e.states[n].as_slice(), &e.states[n + 1]].concat()));
            y.push(acts.normalize(&e.actions[n]));
        }
    }
    if x.is_empty() {
        return Err(Error::Dataset("no consecutive states to learn from".into()));
    }
    Ok((
        Mat::from_rows(&x, pair.dim())?,
        Mat::from_rows(&y, acts.dim())?,
    ))
}

/// Fits the reverse-dynamics model and returns it with its held-out action
/// MSE in raw action units, summed over action dimensions. The held-out
/// transitions are the trailing episodes of the file.
pub fn train_reverse_dynamics(
    ds: &Dataset,
    cfg: &ReverseDynamicsConfig,
    rng: &mut Rng,
) -> Result<(ReverseDynamics, f64)> {
    let env = ds.env();
    let state_stats = ds.header.state_stats.clone();
    let action_stats = ds.header.action_stats.clone();
    let (x, y) = transitions(ds, &state_stats, &action_stats)?;
    let n = x.rows();
    let n_test = ((n as f64 * cfg.holdout).round() as usize).min(n - 1);
    let train_idx: Vec<usize> = (0..n - n_test).collect();
    let test_idx: Vec<usize> = (n - n_test..n).collect();
    let topo = Topology::new(
        2 * env.state_dim,
        0,
        cfg.hidden.clone(),
        env.action_dim,
        Activation::Silu,
    );
    let mut params = NetworkParams::init(topo, rng);
    fit_mse(
        &mut params,
        &x.select_rows(&train_idx),
        &y.select_rows(&train_idx),
        &cfg.fit,
        rng,
    )?;
    let model = ReverseDynamics {
        params,
        state_stats,
        action_stats,
    };
    let held_out = if n_test == 0 {
        0.0
    } else {
        let pred = model
            .params
            .forward(&x.select_rows(&test_idx), &Mat::zeros(n_test, 0))?;
        let truth = y.select_rows(&test_idx);
        let mut total = 0.0;
        for (p, t) in pred.iter_rows().zip(truth.iter_rows()) {
            let (p, t) = (
                model.action_stats.denormalize(p),
                model.action_stats.denormalize(t),
            );
            total += p
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total / n_test as f64
    };
    Ok((model, held_out))
}
