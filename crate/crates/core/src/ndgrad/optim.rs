use serde::{Deserialize, Serialize};

use super::net::NetworkParams;
use crate::error::first_non_finite;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        OptimizerState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], gradient: &[f64], state: &mut OptimizerState) -> Result<()> {
    let n = params.len();
    if gradient.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::Shape(format!(
            "adam: params {n}, gradient {}, moments {}/{}",
            gradient.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    if let Some(i) = first_non_finite(gradient) {
        return Err(Error::non_finite("gradient", i));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..n {
        let g = gradient[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Rescales `gradient` so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(gradient: &mut [f64], max_norm: f64) -> f64 {
    let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        gradient.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `target <- decay * target + (1 - decay) * source`.
pub fn ema_update(target: &mut NetworkParams, source: &NetworkParams, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!(
            "EMA decay must lie in [0, 1), got {decay}"
        )));
    }
    if target.topology() != source.topology() {
        return Err(Error::Shape(
            "EMA target and source topologies differ".into(),
        ));
    }
    for (t, s) in target.weights_mut().iter_mut().zip(source.weights()) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

/// Compares an analytic gradient against central differences.
///
/// `loss_and_grad` returns the loss and, for the unperturbed call, its
/// gradient. Returns `max_i |g_ad - g_fd| / (|g_fd| + 1e-12)`.
pub fn finite_diff_check<F>(mut loss_and_grad: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (l0, analytic) = loss_and_grad(params)?;
    if !l0.is_finite() {
        return Err(Error::non_finite("loss", 0));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let (lp, _) = loss_and_grad(&p)?;
        p[i] = orig - eps;
        let (lm, _) = loss_and_grad(&p)?;
        p[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::non_finite("perturbed loss", i));
        }
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::net::{Activation, Topology};

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(2, AdamConfig::default());
        s.first_moment = vec![0.5, 0.5];
        s.second_moment = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        // first step with nonzero moments still moves params; isolate the decay
        assert_eq!(s.first_moment, vec![0.45, 0.45]);
        assert!((s.second_moment[0] - 0.24975).abs() < 1e-15);
        assert_eq!(s.step, 1);

        let mut p = vec![1.0, -2.0];
        let mut fresh = OptimizerState::new(2, AdamConfig::default());
        adam_step(&mut p, &[0.0, 0.0], &mut fresh).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut s = OptimizerState::new(
            1,
            AdamConfig {
                lr: 0.1,
                eps: 1e-300,
                ..AdamConfig::default()
            },
        );
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_shifted_quadratic() {
        let mut w = vec![0.0];
        let mut s = OptimizerState::new(1, AdamConfig::with_lr(0.1));
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 2.0);
            adam_step(&mut w, &[g], &mut s).unwrap();
        }
        assert!((w[0] - 2.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_index() {
        let mut p = vec![0.0; 3];
        let mut s = OptimizerState::new(3, AdamConfig::default());
        let err = adam_step(&mut p, &[0.0, 0.0, f64::INFINITY], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    fn scalar_net(w: f64) -> NetworkParams {
        NetworkParams::from_weights(
            Topology::new(1, 0, vec![], 1, Activation::Identity),
            vec![w, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn ema_endpoints() {
        let mut t = scalar_net(2.0);
        ema_update(&mut t, &scalar_net(0.0), 0.5).unwrap();
        assert_eq!(t.weights()[0], 1.0);
        ema_update(&mut t, &scalar_net(7.0), 0.0).unwrap();
        assert_eq!(t.weights()[0], 7.0);
        assert!(ema_update(&mut t, &scalar_net(0.0), 1.0).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        // closed form: w_n - s = decay^n (w_0 - s)
        let mut t = scalar_net(10.0);
        let src = scalar_net(1.0);
        for n in 1..=20 {
            ema_update(&mut t, &src, 0.8).unwrap();
            let expect = 1.0 + 0.8f64.powi(n) * 9.0;
            assert!((t.weights()[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_topology_mismatch_rejected() {
        let mut t = scalar_net(1.0);
        let other = NetworkParams::zeros(Topology::new(2, 0, vec![], 1, Activation::Identity));
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn fd_check_on_quadratic() {
        let err = finite_diff_check(
            |p| {
                let l = p.iter().map(|x| (x - 1.0) * (x - 1.0)).sum();
                Ok((l, p.iter().map(|x| 2.0 * (x - 1.0)).collect()))
            },
            &[0.3, -2.0, 5.0],
            // central differences are exact on quadratics, so a wide step only trims roundoff
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fd_check_rejects_non_finite_loss() {
        let r = finite_diff_check(|_| Ok((f64::NAN, vec![0.0])), &[1.0], 1e-6);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
