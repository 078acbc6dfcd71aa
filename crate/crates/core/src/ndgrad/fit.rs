use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::net::NetworkParams;
use super::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use super::tape::Tape;
use crate::rng::Rng;
use crate::{Error, Result};

/// Loss above which a step counts toward the divergence guard.
pub const DIVERGENCE_LOSS: f64 = 1e3;
/// Consecutive steps above [`DIVERGENCE_LOSS`] that abort training.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Tracks consecutive oversized losses.
#[derive(Debug, Default)]
pub struct DivergenceGuard {
    streak: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if loss > DIVERGENCE_LOSS {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence { step, loss });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 2000,
            batch_size: 128,
            adam: AdamConfig::with_lr(1e-3),
            grad_clip: Some(10.0),
        }
    }
}

/// Minibatch squared-error regression, in place. Returns the per-step
/// training loss curve.
pub fn fit_mse(
    params: &mut NetworkParams,
    inputs: &Mat,
    targets: &Mat,
    cfg: &FitConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if inputs.rows() != targets.rows() || inputs.rows() == 0 {
        return Err(Error::Shape(format!(
            "regression over {} inputs and {} targets",
            inputs.rows(),
            targets.rows()
        )));
    }
    let mut opt = OptimizerState::new(params.len(), cfg.adam);
    let mut guard = DivergenceGuard::default();
    let mut curve = Vec::with_capacity(cfg.steps);
    let empty = Mat::zeros(cfg.batch_size, 0);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..inputs.rows()))
            .collect();
        let (loss, mut grad) = {
            let mut tape = Tape::new();
            let src = tape.register(params, true);
            let x = tape.constant(inputs.select_rows(&idx));
            let y = tape.constant(targets.select_rows(&idx));
            let c = tape.constant(empty.clone());
            let pred = tape.mlp(src, x, c)?;
            let d = tape.squared_distance(pred, y)?;
            let root = tape.mean(d);
            let loss = tape.scalar(root);
            let mut g = tape.backward(root)?;
            (loss, g.take_params(src).expect("trainable"))
        };
        guard.observe(step, loss)?;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grad, c);
        }
        adam_step(params.weights_mut(), &grad, &mut opt)?;
        curve.push(loss);
    }
    Ok(curve)
}

/// Mean squared error per row (summed over columns), averaged over rows.
pub fn mse(params: &NetworkParams, inputs: &Mat, targets: &Mat) -> Result<f64> {
    let pred = params.forward(inputs, &Mat::zeros(inputs.rows(), 0))?;
    let n = pred.rows().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}
