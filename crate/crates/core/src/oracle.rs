//! Analytic Gaussian-mixture targets.
//!
//! With data drawn from a diagonal Gaussian mixture, every quantity a learned
//! denoiser approximates has a closed form: the noisy marginal, its score,
//! and the posterior mean `E[x0 | x_sigma]`. [`GaussianMixture`] implements
//! [`Denoiser`] so solvers and distillation can run against a perfect
//! teacher.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ndgrad::Mat;
use crate::rng::{normal, Rng};
use crate::schedule::{Denoiser, NfeMeter};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs a component".into()))?;
        let dim = first.mean.len();
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::Shape(format!(
                    "component {i} has the wrong dimension"
                )));
            }
            if !(c.weight > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "component {i} weight must be > 0"
                )));
            }
            if c.var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "component {i} variance must be > 0"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(GaussianMixture { components, dim })
    }

    /// 1D mixture from `(weight, mean, std)` triples.
    pub fn one_d(parts: &[(f64, f64, f64)]) -> Result<Self> {
        Self::new(
            parts
                .iter()
                .map(|&(w, m, s)| Component {
                    weight: w,
                    mean: vec![m],
                    var: vec![s * s],
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// Per-dimension standard deviation of the clean distribution.
    pub fn std(&self) -> Vec<f64> {
        let mu = self.mean();
        (0..self.dim)
            .map(|d| {
                self.components
                    .iter()
                    .map(|c| c.weight * (c.var[d] + (c.mean[d] - mu[d]).powi(2)))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                pick = c;
                break;
            }
        }
        pick.mean
            .iter()
            .zip(&pick.var)
            .map(|(m, v)| m + v.sqrt() * normal(rng))
            .collect()
    }

    /// Normalized component responsibilities under `N(mu_i, var_i + sigma^2)`.
    fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let mut l = c.weight.ln();
                for d in 0..self.dim {
                    let v = c.var[d] + s2;
                    l -= 0.5 * ((x[d] - c.mean[d]).powi(2) / v + v.ln());
                }
                l
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = ws.iter().sum();
        ws.into_iter().map(|w| w / z).collect()
    }

    /// Density of the noisy marginal `p_sigma` at `x`.
    pub fn density(&self, x: &[f64], sigma: f64) -> f64 {
        let s2 = sigma * sigma;
        self.components
            .iter()
            .map(|c| {
                let mut p = c.weight;
                for d in 0..self.dim {
                    let v = c.var[d] + s2;
                    p *= (-(x[d] - c.mean[d]).powi(2) / (2.0 * v)).exp()
                        / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .sum()
    }

    /// CDF of the 1D noisy marginal.
    pub fn cdf_1d(&self, x: f64, sigma: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * std_normal_cdf((x - c.mean[0]) / (c.var[0] + sigma * sigma).sqrt()))
            .sum()
    }

    /// Inverse of [`Self::cdf_1d`] by bisection.
    pub fn quantile_1d(&self, p: f64, sigma: f64) -> f64 {
        let spread = self
            .components
            .iter()
            .map(|c| c.mean[0].abs() + 40.0 * (c.var[0] + sigma * sigma).sqrt())
            .fold(0.0, f64::max);
        let (mut lo, mut hi) = (-spread, spread);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_1d(mid, sigma) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Exact probability-flow transport in 1D: the flow is the monotone map
    /// carrying `p_{sigma_from}` onto `p_{sigma_to}`.
    pub fn pfode_transport_1d(&self, x: f64, sigma_from: f64, sigma_to: f64) -> f64 {
        self.quantile_1d(self.cdf_1d(x, sigma_from), sigma_to)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Complementary error function, relative accuracy ~1e-15 (continued
/// fraction in the tails, series near zero).
fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        // erf series
        let mut sum = x;
        let mut term = x;
        let x2 = x * x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    // Lentz continued fraction for erfc
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// `E[x0 | x_sigma = x]`.
pub fn gmm_posterior_mean(mixture: &GaussianMixture, x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    let s2 = sigma * sigma;
    let r = mixture.responsibilities(x, sigma);
    let mut out = vec![0.0; mixture.dim];
    for (c, ri) in mixture.components.iter().zip(&r) {
        for d in 0..mixture.dim {
            out[d] += ri * (s2 * c.mean[d] + c.var[d] * x[d]) / (c.var[d] + s2);
        }
    }
    out
}

/// `grad_x log p_sigma(x)`, from the log-density directly.
pub fn gmm_score(mixture: &GaussianMixture, x: &[f64], sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    let r = mixture.responsibilities(x, sigma);
    let mut out = vec![0.0; mixture.dim];
    for (c, ri) in mixture.components.iter().zip(&r) {
        for d in 0..mixture.dim {
            out[d] += ri * (c.mean[d] - x[d]) / (c.var[d] + s2);
        }
    }
    out
}

impl Denoiser for GaussianMixture {
    fn denoise(&self, x: &Mat, sigma: f64, _condition: &Mat, meter: &NfeMeter) -> Result<Mat> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "oracle of dimension {} given width {}",
                self.dim,
                x.cols()
            )));
        }
        meter.tick();
        let mut out = Mat::zeros(x.rows(), self.dim);
        for i in 0..x.rows() {
            out.row_mut(i)
                .copy_from_slice(&gmm_posterior_mean(self, x.row(i), sigma));
        }
        Ok(out)
    }

    fn denoise_rows(
        &self,
        x: &Mat,
        sigmas: &[f64],
        _condition: &Mat,
        meter: &NfeMeter,
    ) -> Result<Mat> {
        meter.tick();
        let mut out = Mat::zeros(x.rows(), self.dim);
        for (i, &s) in sigmas.iter().enumerate() {
            out.row_mut(i)
                .copy_from_slice(&gmm_posterior_mean(self, x.row(i), s));
        }
        Ok(out)
    }
}

/// Exact PFODE flow for a single Gaussian `N(mean, var)`:
/// `x(s) = mean + (x - mean) sqrt((var + s^2) / (var + t^2))`.
pub fn gaussian_pfode_flow(x: f64, sigma_from: f64, sigma_to: f64, mean: f64, var: f64) -> f64 {
    mean + (x - mean) * ((var + sigma_to * sigma_to) / (var + sigma_from * sigma_from)).sqrt()
}

/// Wasserstein-1 distance between two 1D empirical distributions.
///
/// Equal sizes use sorted matching; otherwise both quantile functions are
/// evaluated at the midpoints of a common grid of `max(n_a, n_b)` levels.
pub fn wasserstein_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument(
            "wasserstein_1d needs samples".into(),
        ));
    }
    let sorted = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(samples_a), sorted(samples_b));
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let n = a.len().max(b.len());
    let q = |v: &[f64], p: f64| v[((p * v.len() as f64) as usize).min(v.len() - 1)];
    Ok((0..n)
        .map(|i| {
            let p = (i as f64 + 0.5) / n as f64;
            (q(&a, p) - q(&b, p)).abs()
        })
        .sum::<f64>()
        / n as f64)
}
