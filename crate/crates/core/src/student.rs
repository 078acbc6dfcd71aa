//! Consistency trajectory student: anytime-to-anytime jumps, the CTM, DSM
//! and reward objectives, and one- and multi-step sampling.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataenv::SampleSet;
use crate::ndgrad::{
    adam_step, clip_grad_norm, ema_update, AdamConfig, DivergenceGuard, Mat, NetworkParams, NodeId,
    OptimizerState, SourceId, Tape, Topology,
};
use crate::reward::TapeReward;
use crate::rng::{self, Rng};
use crate::schedule::{
    default_huber_c, time_embedding, Denoiser, NfeMeter, Preconditioner, ScheduleConfig,
    TrainingSigma, TIME_EMBED_DIM,
};
use crate::teacher::{draw_dsm_noise, sample_prior, TeacherModel};
use crate::{Error, Result};

/// `G_theta(x, t, s) = (s/t) x + (1 - s/t) g_theta(x, t, s)`, with `g_theta`
/// EDM-preconditioned at noise level `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub params: NetworkParams,
    pub precond: Preconditioner,
}

/// `s/t`, taken as 1 whenever `s == t` (including `t = 0`).
fn jump_ratio(t: f64, s: f64) -> f64 {
    if s == t {
        1.0
    } else {
        s / t
    }
}

fn check_times(ts: &[f64], ss: &[f64], rows: usize) -> Result<()> {
    if ts.len() != rows || ss.len() != rows {
        return Err(Error::Shape(format!(
            "{} start and {} end times for {rows} rows",
            ts.len(),
            ss.len()
        )));
    }
    for (&t, &s) in ts.iter().zip(ss) {
        if !(s >= 0.0 && t >= s) {
            return Err(Error::InvalidArgument(format!(
                "jump needs t >= s >= 0, got t={t}, s={s}"
            )));
        }
    }
    Ok(())
}

impl StudentModel {
    pub fn topology(teacher: &Topology) -> Topology {
        Topology {
            cond_dim: teacher.cond_dim + TIME_EMBED_DIM,
            ..teacher.clone()
        }
    }

    /// Student whose raw network reproduces the teacher's for every target
    /// time: the extra target-time inputs start with zero weights.
    pub fn from_teacher(teacher: &TeacherModel) -> Result<Self> {
        let tp = &teacher.params;
        let topo = Self::topology(tp.topology());
        let mut w = Vec::with_capacity(topo.n_params());
        for (l, spec) in tp.layers().iter().enumerate() {
            let off = tp.offsets()[l];
            let (fi, fo) = (spec.fan_in, spec.fan_out);
            for r in 0..fo {
                w.extend_from_slice(&tp.weights()[off + r * fi..off + (r + 1) * fi]);
                w.extend(std::iter::repeat_n(0.0, TIME_EMBED_DIM));
            }
            w.extend_from_slice(&tp.weights()[off + fo * fi..off + fo * fi + fo]);
        }
        Ok(StudentModel {
            params: NetworkParams::from_weights(topo, w)?,
            precond: teacher.precond,
        })
    }

    pub fn x_dim(&self) -> usize {
        self.params.output_dim()
    }

    fn raw_condition(&self, ts: &[f64], ss: &[f64], condition: &Mat) -> Result<Mat> {
        let rows = ts.len();
        let emb: Vec<Vec<f64>> = ts
            .iter()
            .zip(ss)
            .map(|(&t, &s)| {
                let mut e = time_embedding(self.precond.c_noise(t)).to_vec();
                e.extend(time_embedding(jump_ratio(t, s)));
                e
            })
            .collect();
        let emb = Mat::from_rows(&emb, 2 * TIME_EMBED_DIM)?;
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

    /// Per-row jump from `ts[i]` to `ss[i]`. Rows with `t == s` return their
    /// input; the raw network runs once per call unless every row is such a
    /// no-op.
    pub fn jump_rows(
        &self,
        x: &Mat,
        ts: &[f64],
        ss: &[f64],
        condition: &Mat,
        meter: &NfeMeter,
    ) -> Result<Mat> {
        check_times(ts, ss, x.rows())?;
        if ts.iter().zip(ss).all(|(t, s)| t == s) {
            return Ok(x.clone());
        }
        meter.tick();
        let cond = self.raw_condition(ts, ss, condition)?;
        let mut xin = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            let c = self.precond.c_in(t);
            xin.row_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        let f = self.params.forward(&xin, &cond)?;
        let mut out = x.clone();
        for i in 0..x.rows() {
            let (t, s) = (ts[i], ss[i]);
            if t == s {
                continue;
            }
            let (cs, co) = (self.precond.c_skip(t), self.precond.c_out(t));
            let r = s / t;
            for (o, fv) in out.row_mut(i).iter_mut().zip(f.row(i)) {
                let g = cs * *o + co * fv;
                *o = r * *o + (1.0 - r) * g;
            }
        }
        Ok(out)
    }

    /// `G_theta(x, t, s)` for every row.
    pub fn jump(&self, x: &Mat, t: f64, s: f64, condition: &Mat, meter: &NfeMeter) -> Result<Mat> {
        let n = x.rows();
        self.jump_rows(x, &vec![t; n], &vec![s; n], condition, meter)
    }
}

/// Single-row convenience over [`StudentModel::jump`].
pub fn student_jump(
    student: &StudentModel,
    x_t: &[f64],
    t: f64,
    s: f64,
    condition: &[f64],
) -> Result<Vec<f64>> {
    let out = student.jump(
        &Mat::row_vector(x_t.to_vec()),
        t,
        s,
        &Mat::row_vector(condition.to_vec()),
        &NfeMeter::new(),
    )?;
    Ok(out.into_vec())
}

/// Taped per-row jump through the parameters registered as `source`.
pub fn jump_tape(
    tape: &mut Tape<'_>,
    source: SourceId,
    student: &StudentModel,
    x: NodeId,
    ts: &[f64],
    ss: &[f64],
    condition: &Mat,
) -> Result<NodeId> {
    check_times(ts, ss, tape.value(x).rows())?;
    let p = &student.precond;
    let cond = tape.constant(student.raw_condition(ts, ss, condition)?);
    // rows with t == s keep x alone, as in the eager jump
    let c_in: Vec<f64> = ts
        .iter()
        .zip(ss)
        .map(|(&t, &s)| if t == s { 0.0 } else { p.c_in(t) })
        .collect();
    let ratio: Vec<f64> = ts.iter().zip(ss).map(|(&t, &s)| jump_ratio(t, s)).collect();
    let weight = |t: f64, s: f64, c: f64| if t == s { 0.0 } else { (1.0 - s / t) * c };
    let c_skip: Vec<f64> = ts
        .iter()
        .zip(ss)
        .map(|(&t, &s)| weight(t, s, p.c_skip(t)))
        .collect();
    let c_out: Vec<f64> = ts
        .iter()
        .zip(ss)
        .map(|(&t, &s)| weight(t, s, p.c_out(t)))
        .collect();
    let xin = tape.row_scale(x, &c_in)?;
    let f = tape.mlp(source, xin, cond)?;
    // (s/t) x + (1 - s/t)(c_skip x + c_out F), regrouped by input
    let keep: Vec<f64> = ratio.iter().zip(&c_skip).map(|(r, cs)| r + cs).collect();
    let skip = tape.row_scale(x, &keep)?;
    let out = tape.row_scale(f, &c_out)?;
    tape.add(skip, out)
}

/// Noise levels of a distillation grid, indexed upward from the terminal
/// zero: position 0 is `sigma = 0`, position `N` is `sigma_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    ascending: Vec<f64>,
}

impl TimeGrid {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let mut g = cfg.build()?.grid();
        g.reverse();
        Ok(TimeGrid { ascending: g })
    }

    pub fn from_ascending(ascending: Vec<f64>) -> Result<Self> {
        if ascending.len() < 3 || ascending[0] != 0.0 || ascending.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument(
                "a time grid needs at least 3 increasing points starting at 0".into(),
            ));
        }
        Ok(TimeGrid { ascending })
    }

    pub fn len(&self) -> usize {
        self.ascending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ascending.is_empty()
    }

    pub fn sigma(&self, pos: usize) -> f64 {
        self.ascending[pos]
    }

    pub fn top(&self) -> f64 {
        self.ascending[self.ascending.len() - 1]
    }
}

/// Grid positions and noise levels with `0 <= k < u < t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepTriple {
    pub t: f64,
    pub u: f64,
    pub k: f64,
    pub t_pos: usize,
    pub u_pos: usize,
    pub k_pos: usize,
}

/// Draws `t` uniformly over positions `>= 2`, then `u` uniformly below `t`
/// (at most `max_gap` positions below when set), then `k` uniformly below `u`.
pub fn sample_triple(rng: &mut Rng, grid: &TimeGrid, max_gap: Option<usize>) -> TimestepTriple {
    let n = grid.len();
    let t_pos = rng.random_range(2..n);
    let lowest_u = match max_gap {
        Some(g) => t_pos.saturating_sub(g.max(1)).max(1),
        None => 1,
    };
    let u_pos = rng.random_range(lowest_u..t_pos);
    let k_pos = rng.random_range(0..u_pos);
    TimestepTriple {
        t: grid.sigma(t_pos),
        u: grid.sigma(u_pos),
        k: grid.sigma(k_pos),
        t_pos,
        u_pos,
        k_pos,
    }
}

/// Per-row Heun step from `from[i]` to `to[i]` through a frozen denoiser;
/// Euler on rows ending at zero.
pub fn heun_rows<D: Denoiser + ?Sized>(
    den: &D,
    x: &Mat,
    from: &[f64],
    to: &[f64],
    condition: &Mat,
) -> Result<Mat> {
    let meter = NfeMeter::new();
    let d0 = den.denoise_rows(x, from, condition, &meter)?;
    let mut euler = x.clone();
    let mut slope0 = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (sf, st) = (from[i], to[i]);
        for j in 0..x.cols() {
            let s = (x.get(i, j) - d0.get(i, j)) / sf;
            slope0.row_mut(i)[j] = s;
            euler.row_mut(i)[j] += (st - sf) * s;
        }
    }
    // corrector level; rows ending at zero reuse their start level and are skipped
    let mid: Vec<f64> = from
        .iter()
        .zip(to)
        .map(|(&f, &t)| if t > 0.0 { t } else { f })
        .collect();
    let d1 = den.denoise_rows(&euler, &mid, condition, &meter)?;
    let mut out = euler.clone();
    for i in 0..x.rows() {
        let (sf, st) = (from[i], to[i]);
        if st == 0.0 {
            continue;
        }
        for j in 0..x.cols() {
            let s1 = (euler.get(i, j) - d1.get(i, j)) / st;
            out.row_mut(i)[j] = x.get(i, j) + 0.5 * (st - sf) * (slope0.get(i, j) + s1);
        }
    }
    Ok(out)
}

/// Draws that a CTM batch consumes, fixed up front so the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct CtmDraw {
    pub triples: Vec<TimestepTriple>,
    pub noise: Mat,
}

impl CtmDraw {
    pub fn sample(
        rows: usize,
        dim: usize,
        grid: &TimeGrid,
        max_gap: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        let triples = (0..rows)
            .map(|_| sample_triple(rng, grid, max_gap))
            .collect();
        let noise = Mat::from_vec(rows, dim, rng::normal_vec(rng, rows * dim)).expect("sized");
        CtmDraw { triples, noise }
    }
}

/// Teacher solve from grid position `from[i]` down to `to[i]`, one Heun
/// step per grid gap.
pub fn heun_walk<D: Denoiser + ?Sized>(
    den: &D,
    x: &Mat,
    grid: &TimeGrid,
    from: &[usize],
    to: &[usize],
    condition: &Mat,
) -> Result<Mat> {
    let mut pos = from.to_vec();
    let mut x = x.clone();
    while pos.iter().zip(to).any(|(p, t)| p > t) {
        let next: Vec<usize> = pos
            .iter()
            .zip(to)
            .map(|(&p, &t)| if p > t { p - 1 } else { p })
            .collect();
        let sf: Vec<f64> = pos.iter().map(|&p| grid.sigma(p)).collect();
        let st: Vec<f64> = next.iter().map(|&p| grid.sigma(p)).collect();
        // rows already at their target get a zero-length step
        x = heun_rows(den, &x, &sf, &st, condition)?;
        pos = next;
    }
    Ok(x)
}

/// CTM loss. Path A jumps `x_t` to `k` with the live student; path B solves
/// `t -> u` with the teacher and jumps `u -> k` with the frozen student.
/// Both are carried to time 0 by the frozen student and compared with the
/// pseudo-Huber distance. `frozen` is the stop-gradient copy of the student.
#[allow(clippy::too_many_arguments)]
pub fn ctm_loss<'p, D: Denoiser + ?Sized>(
    tape: &mut Tape<'p>,
    live: SourceId,
    student: &StudentModel,
    frozen: &'p StudentModel,
    teacher: &D,
    grid: &TimeGrid,
    x0: &Mat,
    condition: &Mat,
    draw: &CtmDraw,
    huber_c: f64,
) -> Result<NodeId> {
    let rows = x0.rows();
    let t: Vec<f64> = draw.triples.iter().map(|d| d.t).collect();
    let u: Vec<f64> = draw.triples.iter().map(|d| d.u).collect();
    let k: Vec<f64> = draw.triples.iter().map(|d| d.k).collect();
    let zeros = vec![0.0; rows];
    let mut x_t = x0.clone();
    for i in 0..rows {
        for (v, e) in x_t.row_mut(i).iter_mut().zip(draw.noise.row(i)) {
            *v += t[i] * e;
        }
    }
    let meter = NfeMeter::new();
    // target path, entirely outside the tape
    let t_pos: Vec<usize> = draw.triples.iter().map(|d| d.t_pos).collect();
    let u_pos: Vec<usize> = draw.triples.iter().map(|d| d.u_pos).collect();
    let x_u = heun_walk(teacher, &x_t, grid, &t_pos, &u_pos, condition)?;
    let x_k = frozen.jump_rows(&x_u, &u, &k, condition, &meter)?;
    let target = frozen.jump_rows(&x_k, &k, &zeros, condition, &meter)?;
    // live path
    let sg = tape.register(&frozen.params, false);
    let xt = tape.constant(x_t);
    let a_k = jump_tape(tape, live, student, xt, &t, &k, condition)?;
    let a_0 = jump_tape(tape, sg, frozen, a_k, &k, &zeros, condition)?;
    let target = tape.constant(target);
    let d = tape.pseudo_huber(a_0, target, huber_c)?;
    Ok(tape.mean(d))
}

/// Student DSM loss: the teacher's objective with `G_theta(., t, 0)` as the
/// denoiser.
#[allow(clippy::too_many_arguments)]
pub fn student_dsm_loss_at(
    tape: &mut Tape<'_>,
    live: SourceId,
    student: &StudentModel,
    x0: &Mat,
    condition: &Mat,
    sigmas: &[f64],
    noise: &Mat,
    huber_c: f64,
) -> Result<NodeId> {
    let mut xs = x0.clone();
    for (i, &s) in sigmas.iter().enumerate() {
        for (v, e) in xs.row_mut(i).iter_mut().zip(noise.row(i)) {
            *v += s * e;
        }
    }
    let xs = tape.constant(xs);
    let target = tape.constant(x0.clone());
    let zeros = vec![0.0; sigmas.len()];
    let d = jump_tape(tape, live, student, xs, sigmas, &zeros, condition)?;
    let ph = tape.pseudo_huber(d, target, huber_c)?;
    Ok(tape.mean(ph))
}

/// Negative mean reward of one-step samples `G_theta(x_T, T, 0)` drawn from
/// the given prior noise.
pub fn reward_term<'p>(
    tape: &mut Tape<'p>,
    live: SourceId,
    student: &StudentModel,
    reward: &'p dyn TapeReward,
    condition: &Mat,
    x_big_t: &Mat,
    sigma_max: f64,
) -> Result<NodeId> {
    let rows = x_big_t.rows();
    let xt = tape.constant(x_big_t.clone());
    let x0 = jump_tape(
        tape,
        live,
        student,
        xt,
        &vec![sigma_max; rows],
        &vec![0.0; rows],
        condition,
    )?;
    let r = reward.reward_node(tape, condition, x0)?;
    if let Some(i) = tape.value(r).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite("reward model output", i));
    }
    let m = tape.mean(r);
    Ok(tape.scale(m, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub reward: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            reward: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub weights: LossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub huber_c: Option<f64>,
    pub training_sigma: TrainingSigma,
    /// Grid the CTM timestep triples live on.
    pub grid: ScheduleConfig,
    /// Largest position gap between `t` and `u`; the teacher covers it with
    /// one Heun step per gap.
    pub max_gap: Option<usize>,
    /// Decay of the stop-gradient target; 0 uses the live parameters.
    pub ema_decay: f64,
    pub init_from_teacher: bool,
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            weights: LossWeights::default(),
            steps: 3000,
            batch_size: 128,
            adam: AdamConfig::with_lr(1e-4),
            grad_clip: Some(1.0),
            huber_c: None,
            training_sigma: TrainingSigma::default(),
            grid: ScheduleConfig {
                n_bins: 18,
                ..ScheduleConfig::default()
            },
            max_gap: None,
            ema_decay: 0.0,
            init_from_teacher: true,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let mut errs = Vec::new();
        for (name, v) in [
            ("alpha", w.alpha),
            ("beta", w.beta),
            ("reward weight", w.reward),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            errs.push(format!("ema_decay {} outside [0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub step: usize,
    pub ctm: f64,
    pub dsm: f64,
    pub reward: f64,
    pub total: f64,
    pub wall_ms: f64,
}

pub fn metrics_csv(rows: &[DistillMetrics]) -> String {
    let mut out = String::from("step,ctm,dsm,reward,total,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            r.step, r.ctm, r.dsm, r.reward, r.total, r.wall_ms
        ));
    }
    out
}

/// Mutable distillation state: live parameters, optional EMA target and
/// the optimizer.
pub struct Distiller<'m, D: Denoiser + ?Sized> {
    pub student: StudentModel,
    pub target: Option<StudentModel>,
    pub teacher: &'m D,
    pub reward: Option<&'m dyn TapeReward>,
    pub grid: TimeGrid,
    pub cfg: DistillConfig,
    pub huber_c: f64,
    opt: OptimizerState,
    guard: DivergenceGuard,
}

/// Total loss and per-term values of one step, with the gradient.
pub struct StepOutcome {
    pub ctm: f64,
    pub dsm: f64,
    pub reward: f64,
    pub total: f64,
    pub gradient: Vec<f64>,
}

impl<'m, D: Denoiser + ?Sized> Distiller<'m, D> {
    pub fn new(
        student: StudentModel,
        teacher: &'m D,
        reward: Option<&'m dyn TapeReward>,
        cfg: DistillConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.weights.reward > 0.0 && reward.is_none() {
            return Err(Error::InvalidArgument(
                "a positive reward weight needs a reward model".into(),
            ));
        }
        let grid = TimeGrid::new(&cfg.grid)?;
        let huber_c = cfg
            .huber_c
            .unwrap_or_else(|| default_huber_c(student.x_dim()));
        let target = (cfg.ema_decay > 0.0).then(|| student.clone());
        Ok(Distiller {
            opt: OptimizerState::new(student.params.len(), cfg.adam),
            student,
            target,
            teacher,
            reward,
            grid,
            cfg,
            huber_c,
            guard: DivergenceGuard::default(),
        })
    }

    /// Loss and gradient at the current parameters. Each term draws from
    /// its own stream of `(seed, step)`, and terms with zero weight are not
    /// evaluated, so turning one term off leaves the others bit-identical.
    pub fn evaluate(
        &self,
        x0: &Mat,
        condition: &Mat,
        seed: u64,
        step: usize,
    ) -> Result<StepOutcome> {
        let w = self.cfg.weights;
        let frozen = self.target.as_ref().unwrap_or(&self.student);
        let term_rng = |name: &str| rng::stream(seed, &[rng::tag(name), step as u64]);
        let mut tape = Tape::new();
        let live = tape.register(&self.student.params, true);
        let mut parts: Vec<(NodeId, f64)> = Vec::new();
        let (mut ctm, mut dsm, mut rew) = (0.0, 0.0, 0.0);
        if w.alpha > 0.0 {
            let draw = CtmDraw::sample(
                x0.rows(),
                x0.cols(),
                &self.grid,
                self.cfg.max_gap,
                &mut term_rng("ctm"),
            );
            let n = ctm_loss(
                &mut tape,
                live,
                &self.student,
                frozen,
                self.teacher,
                &self.grid,
                x0,
                condition,
                &draw,
                self.huber_c,
            )?;
            ctm = tape.scalar(n);
            parts.push((n, w.alpha));
        }
        if w.beta > 0.0 {
            let (sigmas, noise) = draw_dsm_noise(
                x0.rows(),
                x0.cols(),
                &self.cfg.training_sigma,
                &mut term_rng("dsm"),
            );
            let n = student_dsm_loss_at(
                &mut tape,
                live,
                &self.student,
                x0,
                condition,
                &sigmas,
                &noise,
                self.huber_c,
            )?;
            dsm = tape.scalar(n);
            parts.push((n, w.beta));
        }
        if w.reward > 0.0 {
            let r = self.reward.expect("checked in new");
            let top = self.grid.top();
            let xt = sample_prior(x0.rows(), x0.cols(), top, &mut term_rng("reward"));
            let n = reward_term(&mut tape, live, &self.student, r, condition, &xt, top)?;
            rew = tape.scalar(n);
            parts.push((n, w.reward));
        }
        let mut total = 0.0;
        let mut root: Option<NodeId> = None;
        for (n, wt) in parts {
            total += wt * tape.scalar(n);
            let scaled = tape.scale(n, wt);
            root = Some(match root {
                None => scaled,
                Some(r) => tape.add(r, scaled)?,
            });
        }
        let gradient = match root {
            None => vec![0.0; self.student.params.len()],
            Some(r) => {
                let mut g = tape.backward(r)?;
                g.take_params(live)
                    .unwrap_or_else(|| vec![0.0; self.student.params.len()])
            }
        };
        Ok(StepOutcome {
            ctm,
            dsm,
            reward: rew,
            total,
            gradient,
        })
    }

    /// One optimizer step on a batch.
    pub fn step(
        &mut self,
        x0: &Mat,
        condition: &Mat,
        seed: u64,
        step: usize,
    ) -> Result<DistillMetrics> {
        let started = Instant::now();
        let mut out = self.evaluate(x0, condition, seed, step)?;
        self.guard.observe(step, out.total)?;
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut out.gradient, c);
        }
        adam_step(
            self.student.params.weights_mut(),
            &out.gradient,
            &mut self.opt,
        )?;
        if let Some(t) = &mut self.target {
            ema_update(&mut t.params, &self.student.params, self.cfg.ema_decay)?;
        }
        Ok(DistillMetrics {
            step,
            ctm: out.ctm,
            dsm: out.dsm,
            reward: out.reward,
            total: out.total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// One distillation step with fresh optimizer-visible state; see
/// [`Distiller::step`].
pub fn distill_step<D: Denoiser + ?Sized>(
    distiller: &mut Distiller<'_, D>,
    x0: &Mat,
    condition: &Mat,
    seed: u64,
    step: usize,
) -> Result<DistillMetrics> {
    distiller.step(x0, condition, seed, step)
}

pub struct DistillRun {
    pub student: StudentModel,
    pub log: Vec<DistillMetrics>,
}

/// Full distillation loop over normalized samples.
pub fn distill<D: Denoiser + ?Sized>(
    student: StudentModel,
    teacher: &D,
    reward: Option<&dyn TapeReward>,
    data: &SampleSet,
    cfg: &DistillConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &StudentModel) -> Result<()>,
) -> Result<DistillRun> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no distillation samples".into()));
    }
    let mut d = Distiller::new(student, teacher, reward, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut br = rng::stream(seed, &[rng::tag("batch"), step as u64]);
        let (x0, cond) = data.batch(cfg.batch_size, &mut br);
        log.push(d.step(&x0, &cond, seed, step)?);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, &d.student)?;
        }
    }
    Ok(DistillRun {
        student: d.student,
        log,
    })
}

/// Re-noise levels for an `m`-evaluation sampler: grid positions
/// `round(k N / m)` for `k = 1..m`, ascending, on the distillation grid.
pub fn intermediate_levels(grid: &ScheduleConfig, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "a sampler needs at least one evaluation".into(),
        ));
    }
    let g = TimeGrid::new(grid)?;
    let top = g.len() - 1;
    let mut out: Vec<f64> = (1..m)
        .map(|k| g.sigma(((k * top) as f64 / m as f64).round().max(1.0) as usize))
        .collect();
    out.dedup();
    if out.len() != m - 1 {
        return Err(Error::InvalidArgument(format!(
            "the grid has too few levels for {m} evaluations"
        )));
    }
    Ok(out)
}

/// `G_theta(x_T, sigma_max, 0)` with `x_T ~ N(0, sigma_max^2)`, one row per
/// condition row. Returns the samples and the NFE (1).
pub fn one_step_sample(
    student: &StudentModel,
    condition: &Mat,
    sigma_max: f64,
    rng: &mut Rng,
) -> Result<(Mat, u64)> {
    multi_step_sample(student, condition, sigma_max, &[], rng)
}

/// Jumps to 0, then for each intermediate level in ascending order re-noises
/// the clean estimate to that level and jumps back to 0.
pub fn multi_step_sample(
    student: &StudentModel,
    condition: &Mat,
    sigma_max: f64,
    intermediate: &[f64],
    rng: &mut Rng,
) -> Result<(Mat, u64)> {
    if intermediate.windows(2).any(|w| w[0] >= w[1]) || intermediate.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(
            "intermediate levels must be positive and ascending".into(),
        ));
    }
    let rows = condition.rows();
    let meter = NfeMeter::new();
    let xt = sample_prior(rows, student.x_dim(), sigma_max, rng);
    let mut x = student.jump(&xt, sigma_max, 0.0, condition, &meter)?;
    for &s in intermediate {
        for v in x.data_mut() {
            *v += s * rng::normal(rng);
        }
        x = student.jump(&x, s, 0.0, condition, &meter)?;
    }
    Ok((x, meter.get()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Activation;

    fn student(seed: u64) -> StudentModel {
        let tt = TeacherModel::topology(2, 1, &[6], Activation::Silu);
        StudentModel {
            params: NetworkParams::init(StudentModel::topology(&tt), &mut rng::seeded(seed)),
            precond: Preconditioner::default(),
        }
    }

    #[test]
    fn jump_to_same_time_is_identity() {
        let s = student(1);
        let x = Mat::from_vec(2, 2, vec![0.3, -1.0, 4.0, 2.0]).unwrap();
        let c = Mat::from_vec(2, 1, vec![0.1, 0.2]).unwrap();
        let meter = NfeMeter::new();
        assert_eq!(s.jump(&x, 1.5, 1.5, &c, &meter).unwrap(), x);
        assert_eq!(meter.get(), 0);
        let mut tape = Tape::new();
        let src = tape.register(&s.params, true);
        let xi = tape.constant(x.clone());
        let y = jump_tape(&mut tape, src, &s, xi, &[1.5, 0.0], &[1.5, 0.0], &c).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn zero_network_interpolates() {
        // with F = 0 and a vanishing sigma_data, g = c_skip(t) x is ~0
        let mut s = student(2);
        s.params.weights_mut().iter_mut().for_each(|w| *w = 0.0);
        s.precond = Preconditioner { sigma_data: 1e-12 };
        let x = Mat::from_vec(1, 2, vec![4.0, 4.0]).unwrap();
        let y = s
            .jump(&x, 2.0, 1.0, &Mat::zeros(1, 1), &NfeMeter::new())
            .unwrap();
        for v in y.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backwards_jump_is_rejected() {
        let s = student(3);
        let x = Mat::zeros(1, 2);
        assert!(s
            .jump(&x, 1.0, 2.0, &Mat::zeros(1, 1), &NfeMeter::new())
            .is_err());
    }

    #[test]
    fn taped_and_eager_jumps_agree() {
        let s = student(4);
        let x = Mat::from_vec(3, 2, vec![0.3, -1.0, 4.0, 2.0, 0.0, 1.0]).unwrap();
        let c = Mat::from_vec(3, 1, vec![0.1, 0.2, -0.4]).unwrap();
        let (ts, ss) = ([3.0, 0.5, 80.0], [1.0, 0.0, 0.0]);
        let eager = s.jump_rows(&x, &ts, &ss, &c, &NfeMeter::new()).unwrap();
        let mut tape = Tape::new();
        let src = tape.register(&s.params, true);
        let xi = tape.constant(x);
        let y = jump_tape(&mut tape, src, &s, xi, &ts, &ss, &c).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(eager.data()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn student_from_teacher_matches_teacher_denoiser() {
        let teacher = TeacherModel {
            params: NetworkParams::init(
                TeacherModel::topology(2, 1, &[6, 5], Activation::Silu),
                &mut rng::seeded(5),
            ),
            precond: Preconditioner::default(),
        };
        let s = StudentModel::from_teacher(&teacher).unwrap();
        let x = Mat::from_vec(2, 2, vec![0.3, -1.0, 4.0, 2.0]).unwrap();
        let c = Mat::from_vec(2, 1, vec![0.1, 0.2]).unwrap();
        let d = teacher.denoise(&x, 1.7, &c, &NfeMeter::new()).unwrap();
        let g = s.jump(&x, 1.7, 0.0, &c, &NfeMeter::new()).unwrap();
        for (a, b) in d.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_point_grid_has_one_triple() {
        let grid = TimeGrid::from_ascending(vec![0.0, 0.5, 2.0]).unwrap();
        let mut r = rng::seeded(0);
        for _ in 0..20 {
            let tr = sample_triple(&mut r, &grid, None);
            assert_eq!((tr.t_pos, tr.u_pos, tr.k_pos), (2, 1, 0));
        }
    }

    #[test]
    fn one_step_sampling_costs_one_evaluation() {
        let s = student(6);
        let c = Mat::zeros(5, 1);
        let (x, nfe) = one_step_sample(&s, &c, 80.0, &mut rng::seeded(1)).unwrap();
        assert_eq!(nfe, 1);
        assert_eq!(x.shape(), (5, 2));
        let (_, nfe) =
            multi_step_sample(&s, &c, 80.0, &[0.5, 2.0, 10.0], &mut rng::seeded(1)).unwrap();
        assert_eq!(nfe, 4);
    }
}
