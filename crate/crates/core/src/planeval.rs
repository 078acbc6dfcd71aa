//! Closed- and open-loop rollouts, evaluation reports, return histograms,
//! the sampler timing benchmark and the ablation runner.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataenv::{
    behavior_action, env_step, history, Behavior, EnvSpec, NormStats, ReverseDynamics, StatePlanSet,
};
use crate::ndgrad::Mat;
use crate::rng::{self, Rng};
use crate::schedule::ScheduleConfig;
use crate::student::{multi_step_sample, StudentModel};
use crate::teacher::{ddim_sample, ddpm_sample, sample_prior, solve_pfode, TeacherModel};
use crate::{Error, Result};

/// How a model turns noise into a clean normalized window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Heun on the teacher over `n_bins` Karras levels plus zero.
    Heun {
        n_bins: usize,
    },
    Ddpm {
        steps: usize,
    },
    Ddim {
        steps: usize,
    },
    /// Student jump to zero, then one re-noise and jump per level.
    Student {
        intermediate: Vec<f64>,
    },
}

impl SamplerKind {
    pub fn label(&self) -> String {
        match self {
            SamplerKind::Heun { n_bins } => format!("heun-{n_bins}"),
            SamplerKind::Ddpm { steps } => format!("ddpm-{steps}"),
            SamplerKind::Ddim { steps } => format!("ddim-{steps}"),
            SamplerKind::Student { intermediate } => format!("student-{}", intermediate.len() + 1),
        }
    }
}

/// A generative model plus the sampler run on it.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    Teacher(&'a TeacherModel, &'a SamplerKind),
    Student(&'a StudentModel, &'a [f64]),
}

impl Generator<'_> {
    /// Clean normalized samples, one per condition row, and the NFE spent.
    pub fn generate(
        &self,
        condition: &Mat,
        schedule: &ScheduleConfig,
        rng: &mut Rng,
    ) -> Result<(Mat, u64)> {
        let rows = condition.rows();
        match *self {
            Generator::Teacher(t, kind) => {
                let x_t = sample_prior(rows, t.x_dim(), schedule.sigma_max, rng);
                match kind {
                    SamplerKind::Heun { n_bins } => {
                        let sched = schedule.with_bins(*n_bins).build()?;
                        solve_pfode(t, &x_t, &sched, condition)
                    }
                    SamplerKind::Ddpm { steps } => {
                        ddpm_sample(t, &x_t, schedule, *steps, condition, rng)
                    }
                    SamplerKind::Ddim { steps } => {
                        ddim_sample(t, &x_t, schedule, *steps, condition)
                    }
                    SamplerKind::Student { .. } => Err(Error::InvalidArgument(
                        "student sampling needs a student model".into(),
                    )),
                }
            }
            Generator::Student(s, levels) => {
                multi_step_sample(s, condition, schedule.sigma_max, levels, rng)
            }
        }
    }
}

/// Closed-loop action source: a generator over normalized action windows
/// or a scripted behavior.
pub enum Policy<'a> {
    Windows {
        generator: Generator<'a>,
        schedule: ScheduleConfig,
        h: usize,
        cond_stats: NormStats,
        target_stats: NormStats,
        action_dim: usize,
    },
    Scripted(Behavior),
}

impl Policy<'_> {
    /// First action of a fresh window, the NFE spent and the sampler time.
    fn act(
        &self,
        env: &EnvSpec,
        states: &[Vec<f64>],
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, u64, f64)> {
        match self {
            Policy::Scripted(b) => {
                let started = Instant::now();
                let a = behavior_action(env, *b, states.last().expect("non-empty"), None, rng);
                Ok((a, 1, started.elapsed().as_secs_f64()))
            }
            Policy::Windows {
                generator,
                schedule,
                h,
                cond_stats,
                target_stats,
                action_dim,
            } => {
                let (hist, _) = history(states, states.len() - 1, *h);
                let cond = Mat::row_vector(cond_stats.normalize(&hist.concat()));
                let started = Instant::now();
                let (x, nfe) = generator.generate(&cond, schedule, rng)?;
                let secs = started.elapsed().as_secs_f64();
                let window = target_stats.denormalize(x.row(0));
                Ok((window[..*action_dim].to_vec(), nfe, secs))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub total_return: f64,
    pub rewards: Vec<f64>,
    pub nfe_per_action: u64,
    /// Mean sampler time per generated action or plan, seconds.
    pub wall_per_action: f64,
    pub success: bool,
}

/// Replans at every step and executes only the first action of each window.
pub fn closed_loop_rollout(policy: &Policy<'_>, env: &EnvSpec, seed: u64) -> Result<RolloutResult> {
    let mut env_rng = rng::stream(seed, &[rng::tag("env")]);
    let mut pol_rng = rng::stream(seed, &[rng::tag("policy")]);
    let mut states = vec![env.initial_state(&mut env_rng)];
    let mut rewards = Vec::with_capacity(env.horizon);
    let mut nfe = 0u64;
    let mut secs = 0.0;
    let mut success = false;
    for t in 0..env.horizon {
        let (a, n, s) = policy
            .act(env, &states, &mut pol_rng)
            .map_err(|e| Error::InvalidArgument(format!("sampler failed at step {t}: {e}")))?;
        nfe = nfe.max(n);
        secs += s;
        let tr = env_step(env, states.last().expect("non-empty"), &a, t, &mut env_rng);
        rewards.push(tr.reward);
        success |= env.goal().is_some() && tr.reward > 0.0;
        states.push(tr.next_state);
        if tr.done {
            break;
        }
    }
    Ok(RolloutResult {
        total_return: rewards.iter().sum(),
        wall_per_action: (secs / rewards.len().max(1) as f64).max(f64::MIN_POSITIVE),
        rewards,
        nfe_per_action: nfe,
        success,
    })
}

/// Generates one whole state plan from the start and the environment goal
/// and executes it without replanning. Each action is inferred by the
/// reverse-dynamics model from the state actually reached to the next
/// planned state.
pub fn open_loop_rollout(
    generator: &Generator<'_>,
    schedule: &ScheduleConfig,
    plans: &StatePlanSet,
    dynamics: &ReverseDynamics,
    env: &EnvSpec,
    seed: u64,
) -> Result<RolloutResult> {
    let goal = env
        .goal()
        .ok_or_else(|| Error::InvalidArgument("open-loop planning needs a goal".into()))?;
    let mut env_rng = rng::stream(seed, &[rng::tag("env")]);
    let mut pol_rng = rng::stream(seed, &[rng::tag("policy")]);
    let start = env.initial_state(&mut env_rng);
    let cond = Mat::row_vector(plans.condition(&start, &goal));
    let started = Instant::now();
    let (x, nfe) = generator.generate(&cond, schedule, &mut pol_rng)?;
    let secs = started.elapsed().as_secs_f64();
    let mut planned = vec![start.clone()];
    planned.extend(plans.decode(x.row(0)));
    let mut state = start;
    let mut rewards = Vec::new();
    let mut success = false;
    for (t, target) in planned.iter().skip(1).enumerate().take(env.horizon) {
        let a = dynamics.infer(&state, target)?;
        let tr = env_step(env, &state, &a, t, &mut env_rng);
        rewards.push(tr.reward);
        state = tr.next_state;
        if tr.reward > 0.0 {
            success = true;
        }
        if tr.done {
            break;
        }
    }
    Ok(RolloutResult {
        total_return: rewards.iter().sum(),
        rewards,
        nfe_per_action: nfe,
        wall_per_action: secs.max(f64::MIN_POSITIVE),
        success,
    })
}

/// `100 (r - r_random) / (r_expert - r_random)`.
pub fn normalized_score(ret: f64, random: f64, expert: f64) -> f64 {
    100.0 * (ret - random) / (expert - random)
}

/// Reference returns used to normalize scores and split return modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub expert: f64,
    pub medium: f64,
    pub random: f64,
}

impl References {
    /// Mean closed-loop return of each scripted behavior over `n` seeds.
    pub fn measure(env: &EnvSpec, n: usize, seed: u64) -> Result<Self> {
        let mean = |b: Behavior, tag: &str| -> Result<f64> {
            let mut total = 0.0;
            for i in 0..n {
                let s = rng::derive_seed(seed, &[rng::tag(tag), i as u64]);
                total += closed_loop_rollout(&Policy::Scripted(b), env, s)?.total_return;
            }
            Ok(total / n as f64)
        };
        Ok(References {
            expert: mean(Behavior::Expert, "expert")?,
            medium: mean(Behavior::Medium, "medium")?,
            random: mean(Behavior::Random, "random")?,
        })
    }

    /// Return separating the high- and low-reward modes.
    pub fn mode_threshold(&self) -> f64 {
        0.5 * (self.expert + self.medium)
    }

    pub fn score(&self, ret: f64) -> f64 {
        normalized_score(ret, self.random, self.expert)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub rollouts: usize,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub normalized_score: Option<f64>,
    pub high_mode_fraction: Option<f64>,
    pub success_rate: f64,
    pub nfe_per_action: u64,
    pub wall_ms_p50: f64,
    pub wall_ms_p90: f64,
    pub returns: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl EvalReport {
    pub fn from_rollouts(
        label: &str,
        config_hash: &str,
        results: &[RolloutResult],
        refs: Option<&References>,
    ) -> Result<Self> {
        let n = results.len();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "a report needs at least two rollouts".into(),
            ));
        }
        let returns: Vec<f64> = results.iter().map(|r| r.total_return).collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let mut times: Vec<f64> = results.iter().map(|r| r.wall_per_action * 1e3).collect();
        times.sort_by(f64::total_cmp);
        Ok(EvalReport {
            label: label.to_string(),
            config_hash: config_hash.to_string(),
            rollouts: n,
            mean_return: mean,
            stderr_return: (var / n as f64).sqrt(),
            normalized_score: refs.map(|r| r.score(mean)),
            high_mode_fraction: refs.map(|r| {
                let th = r.mode_threshold();
                returns.iter().filter(|&&x| x > th).count() as f64 / n as f64
            }),
            success_rate: results.iter().filter(|r| r.success).count() as f64 / n as f64,
            nfe_per_action: results.iter().map(|r| r.nfe_per_action).max().unwrap_or(0),
            wall_ms_p50: percentile(&times, 0.5),
            wall_ms_p90: percentile(&times, 0.9),
            returns,
        })
    }

    /// The report with timing fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        EvalReport {
            wall_ms_p50: 0.0,
            wall_ms_p90: 0.0,
            ..self.clone()
        }
    }
}

/// Closed-loop evaluation over seeds `derive(seed, i)`, `i < n`.
pub fn evaluate_closed_loop(
    policy: &Policy<'_>,
    env: &EnvSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<RolloutResult>> {
    (0..n)
        .map(|i| {
            closed_loop_rollout(
                policy,
                env,
                rng::derive_seed(seed, &[rng::tag("eval"), i as u64]),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub threshold: f64,
    pub low_mass: f64,
    pub high_mass: f64,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Equal-width histogram of returns with the mass on either side of
/// `threshold`.
pub fn reward_histogram(returns: &[f64], bins: usize, threshold: f64) -> Result<Histogram> {
    if returns.len() < 30 {
        return Err(Error::InvalidArgument(format!(
            "a return histogram needs at least 30 rollouts, got {}",
            returns.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs bins".into()));
    }
    let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &r in returns {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = returns.len() as f64;
    let high = returns.iter().filter(|&&r| r > threshold).count() as f64 / n;
    Ok(Histogram {
        edges,
        counts,
        threshold,
        low_mass: 1.0 - high,
        high_mass: high,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sampler: String,
    pub nfe: u64,
    pub median_ms: f64,
    pub speedup_vs_reference: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("sampler,nfe,median_ms,speedup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.3}\n",
            r.sampler, r.nfe, r.median_ms, r.speedup_vs_reference
        ));
    }
    out
}

/// Median wall time of one single-condition generation per sampler, after
/// `warmup` untimed calls. Speedups are relative to the first entry.
pub fn benchmark(
    samplers: &[(String, Generator<'_>)],
    condition: &Mat,
    schedule: &ScheduleConfig,
    trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("benchmark needs trials".into()));
    }
    let mut rows = Vec::with_capacity(samplers.len());
    for (name, g) in samplers {
        let mut r = rng::stream(seed, &[rng::tag(name)]);
        for _ in 0..warmup {
            g.generate(condition, schedule, &mut r)?;
        }
        let mut times = Vec::with_capacity(trials);
        let mut nfe = 0;
        for _ in 0..trials {
            let started = Instant::now();
            let (_, n) = g.generate(condition, schedule, &mut r)?;
            times.push(started.elapsed().as_secs_f64() * 1e3);
            nfe = n;
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            sampler: name.clone(),
            nfe,
            median_ms: percentile(&times, 0.5),
            speedup_vs_reference: 0.0,
        });
    }
    let reference = rows[0].median_ms;
    for r in &mut rows {
        r.speedup_vs_reference = reference / r.median_ms;
    }
    Ok(rows)
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub reward_weight: f64,
    pub dsm_weight: f64,
    pub teacher_reward_weight: f64,
    pub h: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Runs every cell; a failing cell is recorded and the suite moves on.
pub fn ablation_suite(
    cells: &[AblationCell],
    mut run_cell: impl FnMut(&AblationCell) -> Result<EvalReport>,
) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|cell| match run_cell(cell) {
            Ok(report) => AblationRow {
                cell: cell.clone(),
                report: Some(report),
                error: None,
            },
            Err(e) => AblationRow {
                cell: cell.clone(),
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "cell,reward_weight,dsm_weight,teacher_reward_weight,h,c,mean_return,stderr,normalized_score,high_mode_fraction,success_rate,error\n",
    );
    for r in rows {
        let c = &r.cell;
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let rep = r.report.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.name,
            c.reward_weight,
            c.dsm_weight,
            c.teacher_reward_weight,
            c.h,
            c.c,
            f(rep.map(|r| r.mean_return)),
            f(rep.map(|r| r.stderr_return)),
            f(rep.and_then(|r| r.normalized_score)),
            f(rep.and_then(|r| r.high_mode_fraction)),
            f(rep.map(|r| r.success_rate)),
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_expert_earns_corridor_return() {
        let env = EnvSpec::bimodal_reach();
        let r = closed_loop_rollout(&Policy::Scripted(Behavior::Expert), &env, 4).unwrap();
        // noise jitters the approach by at most a step, so 24 to 26 rewarded steps
        assert!(
            r.total_return >= 240.0 && r.total_return <= 260.0,
            "{}",
            r.total_return
        );
        assert_eq!(r.nfe_per_action, 1);
    }

    #[test]
    fn histogram_masses_split_at_threshold() {
        let mut v = vec![10.0; 20];
        v.extend(vec![100.0; 30]);
        let h = reward_histogram(&v, 5, 55.0).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 50);
        assert!((h.high_mass - 0.6).abs() < 1e-12);
        assert!(reward_histogram(&v[..10], 5, 55.0).is_err());
    }

    #[test]
    fn report_needs_two_rollouts() {
        let r = RolloutResult {
            total_return: 1.0,
            rewards: vec![1.0],
            nfe_per_action: 1,
            wall_per_action: 1e-3,
            success: false,
        };
        assert!(EvalReport::from_rollouts("x", "h", std::slice::from_ref(&r), None).is_err());
        let rep = EvalReport::from_rollouts("x", "h", &[r.clone(), r], None).unwrap();
        assert_eq!(rep.stderr_return, 0.0);
    }

    #[test]
    fn normalized_score_endpoints() {
        assert_eq!(normalized_score(5.0, 5.0, 25.0), 0.0);
        assert_eq!(normalized_score(25.0, 5.0, 25.0), 100.0);
    }
}
