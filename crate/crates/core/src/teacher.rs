//! EDM teacher: denoising score matching and multi-step samplers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataenv::SampleSet;
use crate::ndgrad::{
    adam_step, clip_grad_norm, Activation, AdamConfig, DivergenceGuard, Mat, NetworkParams, NodeId,
    OptimizerState, SourceId, Tape, Topology,
};
use crate::reward::TapeReward;
use crate::rng::{self, Rng};
use crate::schedule::{
    default_huber_c, edm_denoise, edm_denoise_rows, edm_denoise_tape, Denoiser, NfeMeter,
    NoiseSchedule, Preconditioner, ScheduleConfig, TrainingSigma, TIME_EMBED_DIM,
};
use crate::{Error, Result};

/// Trained denoiser `D_phi` around a raw dense network.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub params: NetworkParams,
    pub precond: Preconditioner,
}

impl TeacherModel {
    /// Raw-network shape for targets of width `x_dim` under conditions of
    /// width `cond_dim`; the time embedding rides along with the condition.
    pub fn topology(x_dim: usize, cond_dim: usize, hidden: &[usize], act: Activation) -> Topology {
        Topology::new(
            x_dim,
            cond_dim + TIME_EMBED_DIM,
            hidden.to_vec(),
            x_dim,
            act,
        )
    }

    pub fn x_dim(&self) -> usize {
        self.params.output_dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.params.cond_dim() - TIME_EMBED_DIM
    }
}

impl Denoiser for TeacherModel {
    fn denoise(&self, x: &Mat, sigma: f64, condition: &Mat, meter: &NfeMeter) -> Result<Mat> {
        if sigma > 0.0 {
            meter.tick();
        }
        edm_denoise(&self.params, &self.precond, x, sigma, condition)
    }

    fn denoise_rows(
        &self,
        x: &Mat,
        sigmas: &[f64],
        condition: &Mat,
        meter: &NfeMeter,
    ) -> Result<Mat> {
        meter.tick();
        edm_denoise_rows(&self.params, &self.precond, x, sigmas, condition)
    }
}

/// `x_T ~ N(0, sigma_max^2 I)`, one row per condition.
pub fn sample_prior(rows: usize, dim: usize, sigma_max: f64, rng: &mut Rng) -> Mat {
    let data = (0..rows * dim)
        .map(|_| sigma_max * rng::normal(rng))
        .collect();
    Mat::from_vec(rows, dim, data).expect("sized by construction")
}

/// Mean pseudo-Huber distance between `x0` and the taped denoiser output at
/// `x0 + sigma_i * noise_i`. Returns `(loss, denoised)`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss_at(
    tape: &mut Tape<'_>,
    source: SourceId,
    precond: &Preconditioner,
    x0: &Mat,
    condition: &Mat,
    sigmas: &[f64],
    noise: &Mat,
    huber_c: f64,
) -> Result<(NodeId, NodeId)> {
    let mut xs = x0.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        for (v, e) in xs.row_mut(i).iter_mut().zip(noise.row(i)) {
            *v += s * e;
        }
    }
    let xs = tape.constant(xs);
    let target = tape.constant(x0.clone());
    let d = edm_denoise_tape(tape, source, precond, xs, sigmas, condition)?;
    let ph = tape.pseudo_huber(d, target, huber_c)?;
    Ok((tape.mean(ph), d))
}

/// Noise levels and noise for one DSM batch, drawn in that order.
pub fn draw_dsm_noise(
    rows: usize,
    dim: usize,
    law: &TrainingSigma,
    rng: &mut Rng,
) -> (Vec<f64>, Mat) {
    let sigmas: Vec<f64> = (0..rows).map(|_| law.sample(rng)).collect();
    let noise = Mat::from_vec(rows, dim, rng::normal_vec(rng, rows * dim)).expect("sized");
    (sigmas, noise)
}

/// DSM loss on a fresh draw of noise levels and noise.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss(
    tape: &mut Tape<'_>,
    source: SourceId,
    precond: &Preconditioner,
    x0: &Mat,
    condition: &Mat,
    law: &TrainingSigma,
    huber_c: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    if x0.rows() == 0 {
        return Err(Error::InvalidArgument("empty DSM batch".into()));
    }
    let (sigmas, noise) = draw_dsm_noise(x0.rows(), x0.cols(), law, rng);
    Ok(dsm_loss_at(
        tape, source, precond, x0, condition, &sigmas, &noise, huber_c,
    )?
    .0)
}

fn check_finite(x: &Mat, step: usize) -> Result<()> {
    match x.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::non_finite(
            format!("sampler state at step {step}"),
            i,
        )),
    }
}

/// One Heun step from `sigma_from` down to `sigma_to`; plain Euler when
/// `sigma_to = 0`.
pub fn heun_step<D: Denoiser + ?Sized>(
    den: &D,
    x: &Mat,
    sigma_from: f64,
    sigma_to: f64,
    condition: &Mat,
    meter: &NfeMeter,
) -> Result<Mat> {
    if !(sigma_from > sigma_to && sigma_to >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Heun step needs sigma_from > sigma_to >= 0, got {sigma_from} -> {sigma_to}"
        )));
    }
    let h = sigma_to - sigma_from;
    let d0 = den.denoise(x, sigma_from, condition, meter)?;
    let slope0: Vec<f64> = x
        .data()
        .iter()
        .zip(d0.data())
        .map(|(xv, dv)| (xv - dv) / sigma_from)
        .collect();
    let mut euler = x.clone();
    for (v, s) in euler.data_mut().iter_mut().zip(&slope0) {
        *v += h * s;
    }
    if sigma_to == 0.0 {
        return Ok(euler);
    }
    let d1 = den.denoise(&euler, sigma_to, condition, meter)?;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let slope1 = (euler.data()[i] - d1.data()[i]) / sigma_to;
        *v += 0.5 * h * (slope0[i] + slope1);
    }
    Ok(out)
}

/// Heun integration along a descending grid ending at 0.
pub fn solve_pfode_grid<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &Mat,
    grid: &[f64],
    condition: &Mat,
    meter: &NfeMeter,
) -> Result<Mat> {
    let mut x = x_t.clone();
    for (i, w) in grid.windows(2).enumerate() {
        x = heun_step(den, &x, w[0], w[1], condition, meter)?;
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Integrates the probability-flow ODE over the schedule plus its terminal
/// zero. Returns the endpoint and the number of raw-network evaluations,
/// `2 (N - 1) - 1` for `N` grid points including the zero.
pub fn solve_pfode<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &Mat,
    schedule: &NoiseSchedule,
    condition: &Mat,
) -> Result<(Mat, u64)> {
    let meter = NfeMeter::new();
    let x = solve_pfode_grid(den, x_t, &schedule.grid(), condition, &meter)?;
    Ok((x, meter.get()))
}

/// `steps` noise levels spaced uniformly in index along the Karras curve of
/// `cfg`, followed by the terminal zero.
pub fn step_grid(cfg: &ScheduleConfig, steps: usize) -> Result<Vec<f64>> {
    match steps {
        0 => Err(Error::InvalidArgument(
            "a sampler needs at least one step".into(),
        )),
        1 => Ok(vec![cfg.sigma_max, 0.0]),
        n => Ok(cfg.with_bins(n).build()?.grid()),
    }
}

/// Deterministic first-order sampler: Euler on the probability-flow ODE,
/// `x' = D + (sigma'/sigma) (x - D)`, one evaluation per step.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &Mat,
    cfg: &ScheduleConfig,
    steps: usize,
    condition: &Mat,
) -> Result<(Mat, u64)> {
    let meter = NfeMeter::new();
    let mut x = x_t.clone();
    for (i, w) in step_grid(cfg, steps)?.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        if s <= 0.0 {
            continue;
        }
        let d = den.denoise(&x, s, condition, &meter)?;
        let r = s_next / s;
        for (v, dv) in x.data_mut().iter_mut().zip(d.data()) {
            *v = dv + r * (*v - dv);
        }
        check_finite(&x, i)?;
    }
    Ok((x, meter.get()))
}

/// Ancestral sampler for the variance-exploding process:
/// `x' = D + (s'^2/s^2)(x - D) + s' sqrt(1 - s'^2/s^2) z`.
pub fn ddpm_sample<D: Denoiser + ?Sized>(
    den: &D,
    x_t: &Mat,
    cfg: &ScheduleConfig,
    steps: usize,
    condition: &Mat,
    rng: &mut Rng,
) -> Result<(Mat, u64)> {
    let meter = NfeMeter::new();
    let mut x = x_t.clone();
    for (i, w) in step_grid(cfg, steps)?.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        if s <= 0.0 {
            continue;
        }
        let d = den.denoise(&x, s, condition, &meter)?;
        let r2 = (s_next / s).powi(2);
        let noise_scale = s_next * (1.0 - r2).max(0.0).sqrt();
        for (v, dv) in x.data_mut().iter_mut().zip(d.data()) {
            *v = dv + r2 * (*v - dv);
            if noise_scale > 0.0 {
                *v += noise_scale * rng::normal(rng);
            }
        }
        check_finite(&x, i)?;
    }
    Ok((x, meter.get()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub precond: Preconditioner,
    pub training_sigma: TrainingSigma,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    /// Pseudo-Huber constant; derived from the target width when absent.
    pub huber_c: Option<f64>,
    /// Weight of the reward term on the denoiser output. Zero gives the
    /// plain, reward-agnostic teacher.
    pub reward_weight: f64,
    pub checkpoint_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![128, 128],
            activation: Activation::Silu,
            precond: Preconditioner::default(),
            training_sigma: TrainingSigma::default(),
            steps: 4000,
            batch_size: 128,
            adam: AdamConfig::with_lr(1e-3),
            grad_clip: Some(1.0),
            huber_c: None,
            reward_weight: 0.0,
            checkpoint_every: 0,
        }
    }
}

/// One row of the teacher loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogRow {
    pub step: usize,
    pub dsm_loss: f64,
    pub wall_ms: f64,
}

pub fn loss_curve_csv(rows: &[TeacherLogRow]) -> String {
    let mut out = String::from("step,dsm_loss,wall_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3}\n", r.step, r.dsm_loss, r.wall_ms));
    }
    out
}

pub struct TeacherRun {
    pub model: TeacherModel,
    pub log: Vec<TeacherLogRow>,
}

/// Trains the teacher on normalized samples. `on_checkpoint` receives the
/// parameters every `checkpoint_every` steps; a reward model is required
/// when `reward_weight > 0`.
pub fn train_teacher(
    data: &SampleSet,
    cfg: &TeacherConfig,
    reward: Option<&dyn TapeReward>,
    rng: &mut Rng,
    mut on_checkpoint: impl FnMut(usize, &NetworkParams) -> Result<()>,
) -> Result<TeacherRun> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no teacher training samples".into()));
    }
    if cfg.reward_weight < 0.0 {
        return Err(Error::InvalidArgument(
            "reward weight must be non-negative".into(),
        ));
    }
    let reward = match (cfg.reward_weight > 0.0, reward) {
        (false, _) => None,
        (true, Some(r)) => Some(r),
        (true, None) => {
            return Err(Error::InvalidArgument(
                "a reward-aware teacher needs a reward model".into(),
            ))
        }
    };
    let topo = TeacherModel::topology(data.x.cols(), data.cond.cols(), &cfg.hidden, cfg.activation);
    let mut params = NetworkParams::init(topo, rng);
    let huber_c = cfg
        .huber_c
        .unwrap_or_else(|| default_huber_c(data.x.cols()));
    let mut opt = OptimizerState::new(params.len(), cfg.adam);
    let mut guard = DivergenceGuard::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let started = Instant::now();
        let (x0, cond) = data.batch(cfg.batch_size, rng);
        let (sigmas, noise) = draw_dsm_noise(x0.rows(), x0.cols(), &cfg.training_sigma, rng);
        let (dsm, mut grad) = {
            let mut tape = Tape::new();
            let src = tape.register(&params, true);
            let (dsm, denoised) = dsm_loss_at(
                &mut tape,
                src,
                &cfg.precond,
                &x0,
                &cond,
                &sigmas,
                &noise,
                huber_c,
            )?;
            let root = match reward {
                None => dsm,
                Some(r) => {
                    let rv = r.reward_node(&mut tape, &cond, denoised)?;
                    let mean_r = tape.mean(rv);
                    let penalty = tape.scale(mean_r, -cfg.reward_weight);
                    tape.add(dsm, penalty)?
                }
            };
            let dsm_value = tape.scalar(dsm);
            let mut g = tape.backward(root)?;
            (dsm_value, g.take_params(src).expect("trainable source"))
        };
        guard.observe(step, dsm)?;
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grad, c);
        }
        adam_step(params.weights_mut(), &grad, &mut opt)?;
        log.push(TeacherLogRow {
            step,
            dsm_loss: dsm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(TeacherRun {
        model: TeacherModel {
            params,
            precond: cfg.precond,
        },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianMixture;

    struct ZeroScore;

    impl Denoiser for ZeroScore {
        fn denoise(&self, x: &Mat, _: f64, _: &Mat, meter: &NfeMeter) -> Result<Mat> {
            meter.tick();
            Ok(x.clone())
        }
    }

    fn empty(rows: usize) -> Mat {
        Mat::zeros(rows, 0)
    }

    #[test]
    fn zero_score_leaves_state_unchanged() {
        let x = Mat::row_vector(vec![1.5, -2.0]);
        let y = heun_step(&ZeroScore, &x, 3.0, 1.0, &empty(1), &NfeMeter::new()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn terminal_step_is_euler() {
        let g = GaussianMixture::one_d(&[(0.5, -1.0, 0.1), (0.5, 2.0, 0.3)]).unwrap();
        let x = Mat::row_vector(vec![0.7]);
        let meter = NfeMeter::new();
        let y = heun_step(&g, &x, 0.8, 0.0, &empty(1), &meter).unwrap();
        let d = g.denoise(&x, 0.8, &empty(1), &NfeMeter::new()).unwrap();
        // Euler to zero lands exactly on the denoised point
        assert!((y.data()[0] - d.data()[0]).abs() < 1e-15);
        assert_eq!(meter.get(), 1);
    }

    #[test]
    fn pfode_nfe_counts() {
        let g = GaussianMixture::one_d(&[(1.0, 0.0, 1.0)]).unwrap();
        let x = Mat::row_vector(vec![3.0]);
        let two = crate::schedule::karras_sigmas(2, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(solve_pfode(&g, &x, &two, &empty(1)).unwrap().1, 3);
        let s41 = ScheduleConfig::default().with_bins(40).build().unwrap();
        assert_eq!(solve_pfode(&g, &x, &s41, &empty(1)).unwrap().1, 79);
    }

    #[test]
    fn single_bin_grid_is_one_euler_step() {
        let g = GaussianMixture::one_d(&[(1.0, 0.0, 1.0)]).unwrap();
        let grid = step_grid(&ScheduleConfig::default(), 1).unwrap();
        assert_eq!(grid, vec![80.0, 0.0]);
        let meter = NfeMeter::new();
        solve_pfode_grid(&g, &Mat::row_vector(vec![1.0]), &grid, &empty(1), &meter).unwrap();
        assert_eq!(meter.get(), 1);
    }

    #[test]
    fn sampler_nfe_matches_steps() {
        let g = GaussianMixture::one_d(&[(1.0, 0.0, 1.0)]).unwrap();
        let cfg = ScheduleConfig::default();
        let x = Mat::row_vector(vec![10.0]);
        assert_eq!(ddim_sample(&g, &x, &cfg, 15, &empty(1)).unwrap().1, 15);
        let mut r = rng::seeded(0);
        assert_eq!(
            ddpm_sample(&g, &x, &cfg, 15, &empty(1), &mut r).unwrap().1,
            15
        );
    }

    #[test]
    fn sigma_zero_dsm_is_zero_for_any_network() {
        let p = NetworkParams::init(
            TeacherModel::topology(2, 0, &[8], Activation::Silu),
            &mut rng::seeded(1),
        );
        let x0 = Mat::from_vec(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 2.0]).unwrap();
        let noise = Mat::filled(3, 2, 1.0);
        let mut tape = Tape::new();
        let src = tape.register(&p, true);
        let (loss, _) = dsm_loss_at(
            &mut tape,
            src,
            &Preconditioner::default(),
            &x0,
            &empty(3),
            &[0.0; 3],
            &noise,
            0.01,
        )
        .unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let data = SampleSet {
            x: Mat::filled(4, 1, 0.5),
            cond: empty(4),
        };
        let cfg = TeacherConfig {
            steps: 0,
            hidden: vec![4],
            ..TeacherConfig::default()
        };
        let run = train_teacher(&data, &cfg, None, &mut rng::seeded(3), |_, _| Ok(())).unwrap();
        let init = NetworkParams::init(
            TeacherModel::topology(1, 0, &[4], Activation::Silu),
            &mut rng::seeded(3),
        );
        assert_eq!(run.model.params, init);
    }
}
