//! Noise schedules, EDM preconditioning, training-noise sampling and the
//! pseudo-Huber distance shared by teacher and student.
//!
//! Time is identified with the noise level: `t == sigma` everywhere.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::ndgrad::{Mat, NetworkParams, NodeId, SourceId, Tape};
use crate::rng::{normal, Rng};
use crate::{Error, Result};

/// Karras discretization parameters. Sigmas are always recomputed from
/// these, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub n_bins: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            n_bins: 80,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        karras_sigmas(self.n_bins, self.sigma_min, self.sigma_max, self.rho)
    }

    pub fn with_bins(self, n_bins: usize) -> Self {
        ScheduleConfig { n_bins, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub n_bins: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `sigma_max = sigmas[0] > ... > sigmas[N-1] = sigma_min`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// The sigmas with the terminal `0` appended (N + 1 points).
    pub fn grid(&self) -> Vec<f64> {
        let mut g = self.sigmas.clone();
        g.push(0.0);
        g
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            n_bins: self.n_bins,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
        }
    }
}

pub fn karras_sigmas(
    n_bins: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
) -> Result<NoiseSchedule> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least 2 bins, got {n_bins}"
        )));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let lo = sigma_min.powf(1.0 / rho);
    let hi = sigma_max.powf(1.0 / rho);
    let last = (n_bins - 1) as f64;
    let mut sigmas: Vec<f64> = (0..n_bins)
        .map(|i| (hi + i as f64 / last * (lo - hi)).powf(rho))
        .collect();
    sigmas[0] = sigma_max;
    sigmas[n_bins - 1] = sigma_min;
    if sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument(
            "sigma range too narrow for the requested bin count".into(),
        ));
    }
    Ok(NoiseSchedule {
        n_bins,
        sigma_min,
        sigma_max,
        rho,
        sigmas,
    })
}

/// EDM input/output scaling around a raw network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preconditioner {
    pub sigma_data: f64,
}

impl Default for Preconditioner {
    fn default() -> Self {
        Preconditioner { sigma_data: 0.5 }
    }
}

impl Preconditioner {
    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    /// `ln(sigma) / 4`, floored so that `sigma = 0` stays finite.
    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * sigma.max(1e-20).ln()
    }
}

/// Width of [`time_embedding`].
pub const TIME_EMBED_DIM: usize = 7;

/// Smooth features of a scalar time code: the value itself plus sine and
/// cosine at three octaves.
pub fn time_embedding(v: f64) -> [f64; TIME_EMBED_DIM] {
    use std::f64::consts::PI;
    let mut e = [0.0; TIME_EMBED_DIM];
    e[0] = v;
    for (k, f) in [1.0, 2.0, 4.0].iter().enumerate() {
        e[1 + 2 * k] = (PI * f * v).sin();
        e[2 + 2 * k] = (PI * f * v).cos();
    }
    e
}

/// Counts raw-network evaluations. Denoisers tick it exactly where the raw
/// network runs, once per batched call.
#[derive(Debug, Default)]
pub struct NfeMeter(AtomicU64);

impl NfeMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tick(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Anything that maps a noisy batch at one noise level to a clean estimate.
pub trait Denoiser {
    fn denoise(&self, x: &Mat, sigma: f64, condition: &Mat, meter: &NfeMeter) -> Result<Mat>;

    /// Row `i` denoised at `sigmas[i]`. The default evaluates row by row.
    fn denoise_rows(
        &self,
        x: &Mat,
        sigmas: &[f64],
        condition: &Mat,
        meter: &NfeMeter,
    ) -> Result<Mat> {
        let mut out = Mat::zeros(x.rows(), x.cols());
        for (i, &s) in sigmas.iter().enumerate() {
            let xi = x.select_rows(&[i]);
            let ci = if condition.cols() == 0 {
                Mat::zeros(1, 0)
            } else {
                condition.select_rows(&[i])
            };
            out.row_mut(i)
                .copy_from_slice(self.denoise(&xi, s, &ci, meter)?.data());
        }
        Ok(out)
    }
}

/// Conditioning block fed to the raw teacher network: `[condition, emb(c_noise)]`.
pub(crate) fn teacher_condition(
    precond: &Preconditioner,
    sigmas: &[f64],
    condition: &Mat,
) -> Result<Mat> {
    let rows = sigmas.len();
    let emb: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| time_embedding(precond.c_noise(s)).to_vec())
        .collect();
    let emb = Mat::from_rows(&emb, TIME_EMBED_DIM)?;
    if condition.cols() == 0 {
        return Ok(emb);
    }
    if condition.rows() != rows {
        return Err(Error::Shape(format!(
            "condition has {} rows for {rows} samples",
            condition.rows()
        )));
    }
    Mat::hcat(&[condition, &emb])
}

/// `D(x, sigma) = c_skip x + c_out F(c_in x, c_noise, condition)`.
///
/// Returns `x` unchanged at `sigma = 0` without touching the network.
pub fn edm_denoise(
    raw_net: &NetworkParams,
    precond: &Preconditioner,
    x: &Mat,
    sigma: f64,
    condition: &Mat,
) -> Result<Mat> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let cond = teacher_condition(precond, &vec![sigma; x.rows()], condition)?;
    let c_in = precond.c_in(sigma);
    let f = raw_net.forward(&x.map(|v| v * c_in), &cond)?;
    let (cs, co) = (precond.c_skip(sigma), precond.c_out(sigma));
    let mut out = x.map(|v| cs * v);
    for (o, fv) in out.data_mut().iter_mut().zip(f.data()) {
        *o += co * fv;
    }
    Ok(out)
}

/// [`edm_denoise`] with one sigma per row.
pub fn edm_denoise_rows(
    raw_net: &NetworkParams,
    precond: &Preconditioner,
    x: &Mat,
    sigmas: &[f64],
    condition: &Mat,
) -> Result<Mat> {
    if let Some(bad) = sigmas.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::InvalidArgument(format!("invalid sigma {bad}")));
    }
    if sigmas.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} sigmas for {} rows",
            sigmas.len(),
            x.rows()
        )));
    }
    let cond = teacher_condition(precond, sigmas, condition)?;
    let mut xin = x.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        let c = precond.c_in(s);
        xin.row_mut(i).iter_mut().for_each(|v| *v *= c);
    }
    let f = raw_net.forward(&xin, &cond)?;
    let mut out = x.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let (cs, co) = (precond.c_skip(s), precond.c_out(s));
        for (o, fv) in out.row_mut(i).iter_mut().zip(f.row(i)) {
            *o = cs * *o + co * fv;
        }
    }
    Ok(out)
}

/// Taped version of [`edm_denoise`] with one sigma per row.
pub fn edm_denoise_tape(
    tape: &mut Tape<'_>,
    source: SourceId,
    precond: &Preconditioner,
    x: NodeId,
    sigmas: &[f64],
    condition: &Mat,
) -> Result<NodeId> {
    let cond = tape.constant(teacher_condition(precond, sigmas, condition)?);
    let c_in: Vec<f64> = sigmas.iter().map(|&s| precond.c_in(s)).collect();
    let c_skip: Vec<f64> = sigmas.iter().map(|&s| precond.c_skip(s)).collect();
    let c_out: Vec<f64> = sigmas.iter().map(|&s| precond.c_out(s)).collect();
    let xin = tape.row_scale(x, &c_in)?;
    let f = tape.mlp(source, xin, cond)?;
    let skip = tape.row_scale(x, &c_skip)?;
    let out = tape.row_scale(f, &c_out)?;
    tape.add(skip, out)
}

/// Log-normal training noise law, clamped to the schedule range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSigma {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for TrainingSigma {
    fn default() -> Self {
        TrainingSigma {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }
}

impl TrainingSigma {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        sample_training_sigma(self, rng)
    }
}

pub fn sample_training_sigma(law: &TrainingSigma, rng: &mut Rng) -> f64 {
    let z = law.p_mean + law.p_std * normal(rng);
    z.exp().clamp(law.sigma_min, law.sigma_max)
}

/// `sqrt(|a - b|^2 + c^2) - c`.
pub fn pseudo_huber(a: &[f64], b: &[f64], c: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "pseudo_huber over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-Huber constant must be positive, got {c}"
        )));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq + c * c).sqrt() - c)
}

/// Default pseudo-Huber constant for normalized data of width `dim`.
pub fn default_huber_c(dim: usize) -> f64 {
    0.00054 * (dim as f64).sqrt()
}

/// `x0 + sigma * eps`, `eps ~ N(0, I)`.
pub fn perturb(x0: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    x0.iter().map(|&v| v + sigma * normal(rng)).collect()
}
