//! Experiment configuration, content-addressed stage artifacts and the
//! command-line pipeline.
//!
//! Every stage writes into `<root>/<stage>-<key>/`, where `key` hashes the
//! config sections the stage depends on plus the keys of its inputs. Two
//! `distill` runs with different reward settings therefore share one
//! teacher directory, and an ablation grid reuses whatever is on disk.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataenv::{
    gen_offline_dataset, state_plans, train_reverse_dynamics, validate_mixture, window_dataset,
    Behavior, Dataset, EnvSpec, MixtureEntry, NormStats, ReverseDynamics, ReverseDynamicsConfig,
    SampleSet,
};
use crate::ndgrad::{Checkpoint, Mat, NetworkParams, NodeId, Tape};
use crate::oracle::GaussianMixture;
use crate::planeval::{
    ablation_csv, ablation_suite, bench_csv, benchmark, evaluate_closed_loop, open_loop_rollout,
    reward_histogram, AblationCell, EvalReport, Generator, Policy, References, SamplerKind,
};
use crate::reward::{train_reward, RewardConfig, RewardModel, SmoothedGoalReward, TapeReward};
use crate::rng;
use crate::schedule::{Preconditioner, ScheduleConfig};
use crate::student::{distill, intermediate_levels, metrics_csv, DistillConfig, StudentModel};
use crate::teacher::{loss_curve_csv, solve_pfode, train_teacher, TeacherConfig, TeacherModel};
use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TRAJDISTILL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvChoice {
    BimodalReach,
    PointmassMaze { horizon: usize },
}

impl EnvChoice {
    pub fn spec(&self) -> Result<EnvSpec> {
        match self {
            EnvChoice::BimodalReach => Ok(EnvSpec::bimodal_reach()),
            EnvChoice::PointmassMaze { horizon } => EnvSpec::pointmass_maze(*horizon),
        }
    }

    /// Maze tasks plan whole state sequences and execute them open loop.
    pub fn open_loop(&self) -> bool {
        matches!(self, EnvChoice::PointmassMaze { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_episodes: usize,
    pub mixture: Vec<MixtureEntry>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_episodes: 200,
            mixture: vec![
                MixtureEntry {
                    behavior: Behavior::Expert,
                    fraction: 0.5,
                },
                MixtureEntry {
                    behavior: Behavior::Medium,
                    fraction: 0.5,
                },
            ],
        }
    }
}

/// Closed-loop window sizes: `h` conditioning states, `c` planned actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub h: usize,
    pub c: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { h: 1, c: 4 }
    }
}

/// Smoothing of the sparse goal reward used as the maze reward model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoalRewardConfig {
    pub radius: f64,
    pub temperature: f64,
}

impl Default for GoalRewardConfig {
    fn default() -> Self {
        GoalRewardConfig {
            radius: 0.5,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub model: EvalModel,
    pub rollouts: usize,
    /// Student network evaluations per generated window or plan.
    pub student_nfe: usize,
    pub teacher_sampler: SamplerKind,
    /// Rollouts per scripted behavior for the reference returns.
    pub reference_rollouts: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: EvalModel::Student,
            rollouts: 100,
            student_nfe: 1,
            teacher_sampler: SamplerKind::Heun { n_bins: 40 },
            reference_rollouts: 50,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub trials: usize,
    pub warmup: usize,
    pub ddpm_steps: usize,
    pub ddim_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            trials: 30,
            warmup: 3,
            ddpm_steps: 15,
            ddim_steps: 15,
        }
    }
}

/// One file drives the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root; the environment variable and `--out` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub env: EnvChoice,
    pub data: DataConfig,
    pub plan: PlanConfig,
    /// Noise range shared by every sampler.
    pub schedule: ScheduleConfig,
    pub teacher: TeacherConfig,
    pub reward: RewardConfig,
    pub goal_reward: GoalRewardConfig,
    pub dynamics: ReverseDynamicsConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub ablation: Vec<AblationCell>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            env: EnvChoice::BimodalReach,
            data: DataConfig::default(),
            plan: PlanConfig::default(),
            schedule: ScheduleConfig::default(),
            teacher: TeacherConfig::default(),
            reward: RewardConfig::default(),
            goal_reward: GoalRewardConfig::default(),
            dynamics: ReverseDynamicsConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            ablation: Vec::new(),
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ExperimentConfig {
    /// Every violated constraint, or nothing.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seed > i64::MAX as u64 {
            errs.push(format!(
                "seed {} does not fit a signed 64-bit integer",
                self.seed
            ));
        }
        let spec = match self.env.spec() {
            Ok(s) => Some(s),
            Err(e) => {
                errs.push(e.to_string());
                None
            }
        };
        if self.data.n_episodes == 0 {
            errs.push("data.n_episodes must be positive".into());
        }
        if let Err(e) = validate_mixture(&self.data.mixture) {
            errs.push(e.to_string());
        }
        if self.plan.h == 0 || self.plan.c == 0 {
            errs.push("plan.h and plan.c must be positive".into());
        }
        if let Some(spec) = &spec {
            if self.plan.c > spec.horizon {
                errs.push(format!(
                    "plan.c = {} exceeds the episode horizon {}",
                    self.plan.c, spec.horizon
                ));
            }
        }
        if let Err(e) = self.schedule.build() {
            errs.push(format!("schedule: {e}"));
        }
        let t = &self.teacher;
        if t.steps == 0 || t.batch_size == 0 {
            errs.push("teacher.steps and teacher.batch_size must be positive".into());
        }
        if !(t.reward_weight >= 0.0 && t.reward_weight.is_finite()) {
            errs.push(format!(
                "teacher.reward_weight must be finite and non-negative, got {}",
                t.reward_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.reward.gamma) {
            errs.push(format!("reward.gamma {} outside [0, 1]", self.reward.gamma));
        }
        let g = &self.goal_reward;
        if !(g.radius > 0.0 && g.temperature > 0.0) {
            errs.push("goal_reward.radius and goal_reward.temperature must be positive".into());
        }
        if let Err(Error::Config(e)) = self.distill.validate() {
            errs.extend(e.into_iter().map(|m| format!("distill: {m}")));
        }
        if self.distill.steps == 0 {
            errs.push("distill.steps must be positive".into());
        }
        if self.eval.rollouts < 2 {
            errs.push("eval.rollouts must be at least 2".into());
        }
        if self.eval.student_nfe == 0 {
            errs.push("eval.student_nfe must be positive".into());
        } else if let Err(e) = intermediate_levels(&self.distill.grid, self.eval.student_nfe) {
            errs.push(format!("eval.student_nfe: {e}"));
        }
        if self.bench.trials == 0 {
            errs.push("bench.trials must be positive".into());
        }
        for c in &self.ablation {
            for (name, v) in [
                ("reward_weight", c.reward_weight),
                ("dsm_weight", c.dsm_weight),
                ("teacher_reward_weight", c.teacher_reward_weight),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    errs.push(format!(
                        "ablation cell {}: {name} must be finite and non-negative",
                        c.name
                    ));
                }
            }
            if c.h == 0 || c.c == 0 {
                errs.push(format!(
                    "ablation cell {}: h and c must be positive",
                    c.name
                ));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        hash_json(&c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Parses, fills defaults and validates. Returns the config and its hash.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    cfg.validate()?;
    let hash = cfg.hash()?;
    Ok((cfg, hash))
}

/// Normalization and geometry a planner needs at sampling time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerMeta {
    pub precond: Preconditioner,
    pub schedule: ScheduleConfig,
    pub cond_stats: NormStats,
    pub target_stats: NormStats,
    pub h: usize,
    pub c: usize,
    pub open_loop: bool,
    /// Planned states per open-loop plan.
    pub plan_len: usize,
}

#[derive(Serialize, Deserialize)]
struct RewardMeta {
    h: usize,
    state_stats: NormStats,
    action_stats: NormStats,
    rtg_mean: f64,
    rtg_std: f64,
}

#[derive(Serialize, Deserialize)]
struct DynamicsMeta {
    state_stats: NormStats,
    action_stats: NormStats,
}

/// The reward model a distillation run is steered by.
#[derive(Clone, Debug)]
pub enum RewardArtifact {
    Learned(RewardModel),
    Goal(SmoothedGoalReward),
}

impl TapeReward for RewardArtifact {
    fn reward_node<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        condition: &Mat,
        x0: NodeId,
    ) -> Result<NodeId> {
        match self {
            RewardArtifact::Learned(r) => r.reward_node(tape, condition, x0),
            RewardArtifact::Goal(r) => r.reward_node(tape, condition, x0),
        }
    }
}

/// Training samples and planner metadata for the configured task.
pub fn planner_samples(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(SampleSet, PlannerMeta)> {
    if cfg.env.open_loop() {
        let plans = state_plans(ds)?;
        let d = plans.state_stats.dim();
        let meta = PlannerMeta {
            precond: cfg.teacher.precond,
            schedule: cfg.schedule,
            cond_stats: plans.state_stats.tile(2),
            target_stats: plans.state_stats.tile(plans.plan_len),
            h: 1,
            c: plans.plan_len,
            open_loop: true,
            plan_len: plans.plan_len,
        };
        debug_assert_eq!(meta.target_stats.dim(), plans.plan_len * d);
        Ok((plans.samples, meta))
    } else {
        let ws = window_dataset(ds, cfg.plan.h, cfg.plan.c)?;
        let meta = PlannerMeta {
            precond: cfg.teacher.precond,
            schedule: cfg.schedule,
            cond_stats: ws.cond_stats(),
            target_stats: ws.target_stats(),
            h: cfg.plan.h,
            c: cfg.plan.c,
            open_loop: false,
            plan_len: 0,
        };
        Ok((ws.samples()?, meta))
    }
}

/// Exposes the stored stats as a plan set for open-loop decoding.
fn plan_view(meta: &PlannerMeta, state_stats: &NormStats) -> crate::dataenv::StatePlanSet {
    crate::dataenv::StatePlanSet {
        samples: SampleSet {
            x: Mat::zeros(0, meta.target_stats.dim()),
            cond: Mat::zeros(0, meta.cond_stats.dim()),
        },
        plan_len: meta.plan_len,
        state_stats: state_stats.clone(),
    }
}

/// Stage keys and artifact I/O under one output root.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    /// Recompute stages even when their artifacts exist.
    pub force: bool,
}

fn missing(path: &Path, stage: &str) -> Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: format!("run `{stage}` with the same config first"),
    }
}

fn short(key: &str) -> &str {
    &key[..16]
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, root: PathBuf) -> Self {
        Pipeline {
            cfg,
            root,
            force: false,
        }
    }

    fn dir(&self, stage: &str, key: &str) -> Result<PathBuf> {
        let d = self.root.join(format!("{stage}-{}", short(key)));
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn data_key(&self) -> Result<String> {
        let c = &self.cfg;
        hash_json(&("data", &c.env, &c.data, c.seed))
    }

    pub fn teacher_key(&self) -> Result<String> {
        let c = &self.cfg;
        let reward = if c.teacher.reward_weight > 0.0 {
            Some(self.reward_key()?)
        } else {
            None
        };
        let plan = (!c.env.open_loop()).then_some(c.plan);
        hash_json(&(
            "teacher",
            self.data_key()?,
            plan,
            &c.schedule,
            &c.teacher,
            reward,
            &c.dynamics,
        ))
    }

    pub fn reward_key(&self) -> Result<String> {
        let c = &self.cfg;
        if c.env.open_loop() {
            hash_json(&("goal-reward", self.data_key()?, &c.goal_reward))
        } else {
            hash_json(&("reward", self.data_key()?, c.plan.h, &c.reward))
        }
    }

    pub fn student_key(&self) -> Result<String> {
        let c = &self.cfg;
        let reward = if c.distill.weights.reward > 0.0 {
            Some(self.reward_key()?)
        } else {
            None
        };
        hash_json(&("student", self.teacher_key()?, reward, &c.distill))
    }

    pub fn eval_key(&self) -> Result<String> {
        let model = match self.cfg.eval.model {
            EvalModel::Student => self.student_key()?,
            EvalModel::Teacher => self.teacher_key()?,
        };
        hash_json(&("eval", model, &self.cfg.eval))
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        Ok(self.dir("data", &self.data_key()?)?.join("dataset.jsonl"))
    }

    pub fn gen_data(&self) -> Result<Dataset> {
        let path = self.data_path()?;
        let key = self.data_key()?;
        if !self.force && path.exists() {
            return Dataset::load(&path);
        }
        let spec = self.cfg.env.spec()?;
        let ds = gen_offline_dataset(
            &spec,
            &self.cfg.data.mixture,
            self.cfg.data.n_episodes,
            self.cfg.seed,
            &key,
        )?;
        ds.save(&path)?;
        info!(
            "dataset with {} episodes written to {}",
            ds.episodes.len(),
            path.display()
        );
        Ok(ds)
    }

    fn load_data(&self) -> Result<Dataset> {
        let path = self.data_path()?;
        if !path.exists() {
            return Err(missing(&path, "gen-data"));
        }
        let ds = Dataset::load(&path)?;
        if ds.header.config_hash != self.data_key()? {
            return Err(Error::Checkpoint(format!(
                "{} was produced by another config",
                path.display()
            )));
        }
        Ok(ds)
    }

    fn reward_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let d = self.dir("reward", &self.reward_key()?)?;
        Ok((d.join("reward.ckpt"), d.join("reward.json")))
    }

    pub fn train_reward(&self) -> Result<RewardArtifact> {
        let (ckpt, summary) = self.reward_paths()?;
        let key = self.reward_key()?;
        if !self.force && summary.exists() {
            return self.load_reward();
        }
        let ds = self.load_data()?;
        if self.cfg.env.open_loop() {
            let plans = state_plans(&ds)?;
            let r = SmoothedGoalReward {
                state_stats: plans.state_stats,
                plan_len: plans.plan_len,
                radius: self.cfg.goal_reward.radius,
                temperature: self.cfg.goal_reward.temperature,
            };
            fs::write(
                &summary,
                serde_json::to_string_pretty(&serde_json::json!({
                    "config_hash": key,
                    "goal_reward": r,
                }))?,
            )?;
            return Ok(RewardArtifact::Goal(r));
        }
        let mut r = rng::stream(self.cfg.seed, &[rng::tag("reward")]);
        let (model, stats) = train_reward(&ds, self.cfg.plan.h, &self.cfg.reward, &mut r)?;
        let meta = RewardMeta {
            h: model.h,
            state_stats: model.state_stats.clone(),
            action_stats: model.action_stats.clone(),
            rtg_mean: model.rtg_mean,
            rtg_std: model.rtg_std,
        };
        Checkpoint::new(
            "reward",
            self.cfg.reward.fit.steps as u64,
            &key,
            model.params.clone(),
        )
        .with_metadata(serde_json::to_value(meta)?)
        .save(&ckpt)?;
        fs::write(
            &summary,
            serde_json::to_string_pretty(&serde_json::json!({
                "config_hash": key,
                "summary": stats,
            }))?,
        )?;
        info!("reward model held-out mse {:.4}", stats.heldout_mse);
        Ok(RewardArtifact::Learned(model))
    }

    pub fn load_reward(&self) -> Result<RewardArtifact> {
        let (ckpt, summary) = self.reward_paths()?;
        if !summary.exists() {
            return Err(missing(&summary, "train-reward"));
        }
        if self.cfg.env.open_loop() {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary)?)?;
            return Ok(RewardArtifact::Goal(serde_json::from_value(
                v["goal_reward"].clone(),
            )?));
        }
        let c = self.checked_checkpoint(&ckpt, &self.reward_key()?, "train-reward")?;
        let m: RewardMeta = serde_json::from_value(c.metadata)?;
        Ok(RewardArtifact::Learned(RewardModel {
            params: c.params,
            h: m.h,
            state_stats: m.state_stats,
            action_stats: m.action_stats,
            rtg_mean: m.rtg_mean,
            rtg_std: m.rtg_std,
        }))
    }

    fn checked_checkpoint(&self, path: &Path, key: &str, stage: &str) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(missing(path, stage));
        }
        let c = Checkpoint::load(path)?;
        if c.config_hash != key {
            return Err(Error::Checkpoint(format!(
                "{} was produced by another config",
                path.display()
            )));
        }
        Ok(c)
    }

    fn teacher_dir(&self) -> Result<PathBuf> {
        self.dir("teacher", &self.teacher_key()?)
    }

    pub fn train_teacher(&self) -> Result<(TeacherModel, PlannerMeta)> {
        let dir = self.teacher_dir()?;
        if !self.force && dir.join("teacher.ckpt").exists() {
            return self.load_teacher();
        }
        let key = self.teacher_key()?;
        let ds = self.load_data()?;
        let (samples, meta) = planner_samples(&self.cfg, &ds)?;
        let reward = if self.cfg.teacher.reward_weight > 0.0 {
            Some(self.load_reward()?)
        } else {
            None
        };
        let mut r = rng::stream(self.cfg.seed, &[rng::tag("teacher")]);
        let run = train_teacher(
            &samples,
            &self.cfg.teacher,
            reward.as_ref().map(|r| r as &dyn TapeReward),
            &mut r,
            |step, params| {
                Checkpoint::new("teacher", step as u64, &key, params.clone())
                    .save(&dir.join(format!("teacher-{step:06}.ckpt")))
            },
        )?;
        Checkpoint::new(
            "teacher",
            self.cfg.teacher.steps as u64,
            &key,
            run.model.params.clone(),
        )
        .with_metadata(serde_json::to_value(&meta)?)
        .save(&dir.join("teacher.ckpt"))?;
        fs::write(dir.join("loss.csv"), loss_curve_csv(&run.log))?;
        if self.cfg.env.open_loop() {
            let mut r = rng::stream(self.cfg.seed, &[rng::tag("dynamics")]);
            let (dynamics, mse) = train_reverse_dynamics(&ds, &self.cfg.dynamics, &mut r)?;
            info!("reverse dynamics held-out mse {mse:.3e}");
            let m = DynamicsMeta {
                state_stats: dynamics.state_stats.clone(),
                action_stats: dynamics.action_stats.clone(),
            };
            Checkpoint::new(
                "dynamics",
                self.cfg.dynamics.fit.steps as u64,
                &key,
                dynamics.params,
            )
            .with_metadata(serde_json::to_value(m)?)
            .save(&dir.join("dynamics.ckpt"))?;
        }
        info!("teacher written to {}", dir.display());
        Ok((run.model, meta))
    }

    pub fn load_teacher(&self) -> Result<(TeacherModel, PlannerMeta)> {
        let path = self.teacher_dir()?.join("teacher.ckpt");
        let c = self.checked_checkpoint(&path, &self.teacher_key()?, "train-teacher")?;
        let meta: PlannerMeta = serde_json::from_value(c.metadata)?;
        Ok((
            TeacherModel {
                params: c.params,
                precond: meta.precond,
            },
            meta,
        ))
    }

    fn load_dynamics(&self) -> Result<ReverseDynamics> {
        let path = self.teacher_dir()?.join("dynamics.ckpt");
        let c = self.checked_checkpoint(&path, &self.teacher_key()?, "train-teacher")?;
        let m: DynamicsMeta = serde_json::from_value(c.metadata)?;
        Ok(ReverseDynamics {
            params: c.params,
            state_stats: m.state_stats,
            action_stats: m.action_stats,
        })
    }

    fn student_dir(&self) -> Result<PathBuf> {
        self.dir("student", &self.student_key()?)
    }

    pub fn distill(&self) -> Result<(StudentModel, PlannerMeta)> {
        let dir = self.student_dir()?;
        if !self.force && dir.join("student.ckpt").exists() {
            return self.load_student();
        }
        let key = self.student_key()?;
        let (teacher, meta) = self.load_teacher()?;
        let ds = self.load_data()?;
        let (samples, _) = planner_samples(&self.cfg, &ds)?;
        let reward = if self.cfg.distill.weights.reward > 0.0 {
            Some(self.load_reward()?)
        } else {
            None
        };
        let student = if self.cfg.distill.init_from_teacher {
            StudentModel::from_teacher(&teacher)?
        } else {
            let topo = StudentModel::topology(teacher.params.topology());
            let mut r = rng::stream(self.cfg.seed, &[rng::tag("student-init")]);
            StudentModel {
                params: NetworkParams::init(topo, &mut r),
                precond: teacher.precond,
            }
        };
        let seed = rng::derive_seed(self.cfg.seed, &[rng::tag("distill")]);
        let run = distill(
            student,
            &teacher,
            reward.as_ref().map(|r| r as &dyn TapeReward),
            &samples,
            &self.cfg.distill,
            seed,
            |step, s| {
                Checkpoint::new("student", step as u64, &key, s.params.clone())
                    .save(&dir.join(format!("student-{step:06}.ckpt")))
            },
        )?;
        Checkpoint::new(
            "student",
            self.cfg.distill.steps as u64,
            &key,
            run.student.params.clone(),
        )
        .with_metadata(serde_json::to_value(&meta)?)
        .save(&dir.join("student.ckpt"))?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&run.log))?;
        info!("student written to {}", dir.display());
        Ok((run.student, meta))
    }

    pub fn load_student(&self) -> Result<(StudentModel, PlannerMeta)> {
        let path = self.student_dir()?.join("student.ckpt");
        let c = self.checked_checkpoint(&path, &self.student_key()?, "distill")?;
        let meta: PlannerMeta = serde_json::from_value(c.metadata)?;
        Ok((
            StudentModel {
                params: c.params,
                precond: meta.precond,
            },
            meta,
        ))
    }

    /// Evaluates the configured model and writes the report.
    pub fn eval(&self) -> Result<EvalReport> {
        let dir = self.dir("eval", &self.eval_key()?)?;
        let key = self.eval_key()?;
        let (teacher, meta) = self.load_teacher()?;
        let student = match self.cfg.eval.model {
            EvalModel::Student => {
                let (s, smeta) = self.load_student()?;
                if smeta.schedule != meta.schedule || smeta.precond != meta.precond {
                    return Err(Error::Checkpoint(
                        "student and teacher were built with different noise schedules".into(),
                    ));
                }
                Some(s)
            }
            EvalModel::Teacher => None,
        };
        if meta.schedule != self.cfg.schedule {
            return Err(Error::Checkpoint(
                "the configured schedule differs from the one the teacher was trained with".into(),
            ));
        }
        let levels = intermediate_levels(&self.cfg.distill.grid, self.cfg.eval.student_nfe)?;
        let generator = match &student {
            Some(s) => Generator::Student(s, &levels),
            None => Generator::Teacher(&teacher, &self.cfg.eval.teacher_sampler),
        };
        let label = match &student {
            Some(_) => format!("student-{}", self.cfg.eval.student_nfe),
            None => self.cfg.eval.teacher_sampler.label(),
        };
        let env = self.cfg.env.spec()?;
        let n = self.cfg.eval.rollouts;
        let report = if meta.open_loop {
            let dynamics = self.load_dynamics()?;
            let state_stats = dynamics.state_stats.clone();
            let view = plan_view(&meta, &state_stats);
            let results = (0..n)
                .map(|i| {
                    let s = rng::derive_seed(self.cfg.seed, &[rng::tag("eval"), i as u64]);
                    open_loop_rollout(&generator, &meta.schedule, &view, &dynamics, &env, s)
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::from_rollouts(&label, &key, &results, None)?
        } else {
            let refs = References::measure(&env, self.cfg.eval.reference_rollouts, self.cfg.seed)?;
            let policy = Policy::Windows {
                generator,
                schedule: meta.schedule,
                h: meta.h,
                cond_stats: meta.cond_stats.clone(),
                target_stats: meta.target_stats.clone(),
                action_dim: env.action_dim,
            };
            let results = evaluate_closed_loop(&policy, &env, n, self.cfg.seed)?;
            let report = EvalReport::from_rollouts(&label, &key, &results, Some(&refs))?;
            if n >= 30 {
                let hist = reward_histogram(
                    &report.returns,
                    self.cfg.eval.histogram_bins,
                    refs.mode_threshold(),
                )?;
                fs::write(dir.join("histogram.csv"), hist.to_csv())?;
            }
            report
        };
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        info!("report written to {}", dir.display());
        Ok(report)
    }

    /// Times every sampler on one dataset condition and writes `bench.csv`.
    pub fn bench(&self) -> Result<PathBuf> {
        let (teacher, meta) = self.load_teacher()?;
        let (student, _) = self.load_student()?;
        let ds = self.load_data()?;
        let (samples, _) = planner_samples(&self.cfg, &ds)?;
        let condition = samples.cond.select_rows(&[0]);
        let b = &self.cfg.bench;
        let heun = self.cfg.eval.teacher_sampler.clone();
        let ddpm = SamplerKind::Ddpm {
            steps: b.ddpm_steps,
        };
        let ddim = SamplerKind::Ddim {
            steps: b.ddim_steps,
        };
        let levels = intermediate_levels(&self.cfg.distill.grid, self.cfg.eval.student_nfe)?;
        let samplers = vec![
            (heun.label(), Generator::Teacher(&teacher, &heun)),
            (ddpm.label(), Generator::Teacher(&teacher, &ddpm)),
            (ddim.label(), Generator::Teacher(&teacher, &ddim)),
            (
                format!("student-{}", self.cfg.eval.student_nfe),
                Generator::Student(&student, &levels),
            ),
        ];
        let rows = benchmark(
            &samplers,
            &condition,
            &meta.schedule,
            b.trials,
            b.warmup,
            self.cfg.seed,
        )?;
        let dir = self.dir(
            "bench",
            &hash_json(&("bench", self.student_key()?, b, &self.cfg.eval))?,
        )?;
        let path = dir.join("bench.csv");
        fs::write(&path, bench_csv(&rows))?;
        Ok(path)
    }

    /// Trains and evaluates every ablation cell, reusing cached stages.
    pub fn ablate(&self) -> Result<PathBuf> {
        if self.cfg.ablation.is_empty() {
            return Err(Error::Config(vec![
                "the config lists no ablation cells".into()
            ]));
        }
        let rows = ablation_suite(&self.cfg.ablation, |cell| {
            let mut cfg = self.cfg.clone();
            cfg.distill.weights.reward = cell.reward_weight;
            cfg.distill.weights.beta = cell.dsm_weight;
            cfg.teacher.reward_weight = cell.teacher_reward_weight;
            cfg.plan = PlanConfig {
                h: cell.h,
                c: cell.c,
            };
            cfg.eval.model = EvalModel::Student;
            cfg.validate()?;
            let p = Pipeline {
                cfg,
                root: self.root.clone(),
                force: false,
            };
            p.gen_data()?;
            if p.cfg.teacher.reward_weight > 0.0 || p.cfg.distill.weights.reward > 0.0 {
                p.train_reward()?;
            }
            p.train_teacher()?;
            p.distill()?;
            p.eval()
        });
        let dir = self.dir("ablate", &hash_json(&("ablate", self.cfg.hash()?))?)?;
        fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
        fs::write(
            dir.join("ablation.json"),
            serde_json::to_string_pretty(&rows)?,
        )?;
        Ok(dir.join("ablation.csv"))
    }
}

/// One line of the `verify` suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Oracle checks that need no training: Heun convergence order on a
/// Gaussian mixture and the boundary identities of both parameterizations.
pub fn verify_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let g = GaussianMixture::one_d(&[(0.4, -1.0, 0.4), (0.6, 1.2, 0.6)])?;
    let mut r = rng::stream(seed, &[rng::tag("verify")]);
    let n = 200;
    let sigma_max = 80.0;
    let xt: Vec<f64> = (0..n).map(|_| sigma_max * rng::normal(&mut r)).collect();
    let exact: Vec<f64> = xt
        .iter()
        .map(|&x| g.pfode_transport_1d(x, sigma_max, 0.0))
        .collect();
    let x = Mat::from_vec(n, 1, xt)?;
    let none = Mat::zeros(n, 0);
    let mut errors = Vec::new();
    for bins in [20, 40, 80, 160] {
        let sched = ScheduleConfig::default().with_bins(bins).build()?;
        let (y, _) = solve_pfode(&g, &x, &sched, &none)?;
        let e = y
            .data()
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64;
        errors.push(e);
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    checks.push(Check {
        name: "heun-order".into(),
        passed: ratios.iter().all(|q| (3.2..=4.8).contains(q)),
        detail: format!("error ratios per doubling {ratios:.3?}"),
    });

    let teacher = TeacherModel {
        params: NetworkParams::init(
            TeacherModel::topology(3, 2, &[16], crate::ndgrad::Activation::Silu),
            &mut r,
        ),
        precond: Preconditioner::default(),
    };
    let student = StudentModel::from_teacher(&teacher)?;
    let rows = 1000;
    let xs = Mat::from_vec(rows, 3, rng::normal_vec(&mut r, rows * 3))?;
    let cond = Mat::from_vec(rows, 2, rng::normal_vec(&mut r, rows * 2))?;
    let ts: Vec<f64> = (0..rows)
        .map(|_| 0.002 + 80.0 * rand::Rng::random::<f64>(&mut r))
        .collect();
    let meter = crate::schedule::NfeMeter::new();
    let same = student.jump_rows(&xs, &ts, &ts, &cond, &meter)?;
    let jump_err = same
        .data()
        .iter()
        .zip(xs.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let zeros = vec![0.0; rows];
    let clean = crate::schedule::Denoiser::denoise_rows(&teacher, &xs, &zeros, &cond, &meter)?;
    let den_err = clean
        .data()
        .iter()
        .zip(xs.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "boundary-identities".into(),
        passed: jump_err == 0.0 && den_err == 0.0,
        detail: format!("max |G(x,t,t) - x| = {jump_err:e}, max |D(x,0) - x| = {den_err:e}"),
    });
    Ok(checks)
}

#[derive(Parser, Debug)]
#[command(
    name = "trajdistill",
    version,
    about = "Reward-aware trajectory distillation pipeline"
)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root. Falls back to $TRAJDISTILL_OUT, then the config, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Student reward-loss weight.
    #[arg(long, global = true)]
    reward_weight: Option<f64>,
    /// Student evaluations per generated window or plan.
    #[arg(long, global = true)]
    nfe: Option<usize>,
    /// Training steps of the stage being run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    stage: Stage,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    GenData,
    TrainTeacher,
    TrainReward,
    Distill,
    Eval,
    Bench,
    Ablate,
    Verify,
}

fn build_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?.0,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.reward_weight {
        cfg.distill.weights.reward = w;
    }
    if let Some(m) = cli.nfe {
        cfg.eval.student_nfe = m;
    }
    if let Some(steps) = cli.steps {
        match cli.stage {
            Stage::TrainTeacher => cfg.teacher.steps = steps,
            Stage::TrainReward => cfg.reward.fit.steps = steps,
            Stage::Distill => cfg.distill.steps = steps,
            _ => {}
        }
    }
    cfg.validate()?;
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, root))
}

fn run_stage(stage: Stage, p: &Pipeline) -> Result<()> {
    match stage {
        Stage::GenData => {
            p.gen_data()?;
            println!("{}", p.data_path()?.display());
        }
        Stage::TrainReward => {
            p.train_reward()?;
            println!("{}", p.reward_paths()?.1.display());
        }
        Stage::TrainTeacher => {
            p.train_teacher()?;
            println!("{}", p.teacher_dir()?.join("teacher.ckpt").display());
        }
        Stage::Distill => {
            p.distill()?;
            println!("{}", p.student_dir()?.join("student.ckpt").display());
        }
        Stage::Eval => {
            let r = p.eval()?;
            println!("{}", serde_json::to_string_pretty(&r.without_timing())?);
        }
        Stage::Bench => println!("{}", fs::read_to_string(p.bench()?)?),
        Stage::Ablate => println!("{}", fs::read_to_string(p.ablate()?)?),
        Stage::Verify => {
            let checks = verify_suite(p.cfg.seed)?;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                return Err(Error::InvalidArgument(format!(
                    "verification failed: {}",
                    c.name
                )));
            }
        }
    }
    Ok(())
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::MissingArtifact { .. } | Error::TomlParse(_)
    )
}

/// Runs one pipeline stage. Exit codes: 0 success, 1 invalid arguments,
/// config or missing inputs, 2 runtime failure (details in
/// `<root>/diagnostics.txt`).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let (cfg, root) = match build_config(&cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut pipeline = Pipeline::new(cfg, root);
    pipeline.force = true;
    match run_stage(cli.stage, &pipeline) {
        Ok(()) => 0,
        Err(e) if is_validation(&e) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            let diag = pipeline.root.join("diagnostics.txt");
            let body = format!(
                "stage: {:?}\nerror: {e}\nconfig hash: {}\n\n{}",
                cli.stage,
                pipeline.cfg.hash().unwrap_or_default(),
                pipeline.cfg.to_toml().unwrap_or_default()
            );
            if fs::create_dir_all(&pipeline.root)
                .and_then(|_| fs::write(&diag, body))
                .is_ok()
            {
                eprintln!("diagnostics written to {}", diag.display());
            }
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg =
            ExperimentConfig::from_toml("seed = 3\n[env]\nkind = \"bimodal-reach\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.teacher, TeacherConfig::default());
        let again =
            ExperimentConfig::from_toml("seed = 3\n[env]\nkind = \"bimodal-reach\"\n").unwrap();
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
    }

    #[test]
    fn negative_reward_weight_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.distill.weights.reward = -0.1;
        cfg.eval.rollouts = 1;
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 2, "{errs:?}"),
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn out_dir_does_not_change_the_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("/elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn reward_settings_do_not_touch_the_teacher_key() {
        let a = Pipeline::new(ExperimentConfig::default(), "x".into());
        let mut cfg = ExperimentConfig::default();
        cfg.reward.gamma = 0.9;
        cfg.distill.weights.reward = 0.2;
        let b = Pipeline::new(cfg, "x".into());
        assert_eq!(a.teacher_key().unwrap(), b.teacher_key().unwrap());
        assert_ne!(a.student_key().unwrap(), b.student_key().unwrap());
    }
}
