use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::env::{behavior_action, env_step, Behavior, Dynamics, EnvSpec};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// One logged rollout. `states[n]` is the state in which `actions[n]` was
/// taken and `rewards[n]` received.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub tag: Behavior,
    /// Navigation target of goal-directed behaviors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        let n = self.states.len();
        if n == 0 || self.actions.len() != n || self.rewards.len() != n || n > spec.horizon {
            return Err(Error::Dataset(format!(
                "episode has {} states, {} actions, {} rewards (horizon {})",
                n,
                self.actions.len(),
                self.rewards.len(),
                spec.horizon
            )));
        }
        let widths_ok = self.states.iter().all(|s| s.len() == spec.state_dim)
            && self.actions.iter().all(|a| a.len() == spec.action_dim);
        if !widths_ok {
            return Err(Error::Dataset("state or action width mismatch".into()));
        }
        Ok(())
    }
}

/// Per-dimension affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest scale used by [`NormStats`], so constant dimensions stay finite.
pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        // Welford, one dimension at a time
        for r in rows {
            n += 1;
            for d in 0..dim {
                let delta = r[d] - mean[d];
                mean[d] += delta / n as f64;
                m2[d] += delta * (r[d] - mean[d]);
            }
        }
        let std = m2
            .iter()
            .map(|v| if n > 0 { (v / n as f64).sqrt() } else { 0.0 })
            .collect();
        NormStats { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self, d: usize) -> f64 {
        self.std[d].max(STD_FLOOR)
    }

    /// Stats for `k` stacked copies of a vector.
    pub fn tile(&self, k: usize) -> NormStats {
        NormStats {
            mean: self.mean.repeat(k),
            std: self.std.repeat(k),
        }
    }

    /// Stats for the concatenation `[self, other]`.
    pub fn concat(&self, other: &NormStats) -> NormStats {
        NormStats {
            mean: [self.mean.as_slice(), &other.mean].concat(),
            std: [self.std.as_slice(), &other.std].concat(),
        }
    }

    /// Normalizes a vector whose length is a multiple of the stats width.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let k = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % k]) / self.scale(i % k))
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        let k = self.dim();
        x.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale(i % k) + self.mean[i % k])
            .collect()
    }
}

pub fn normalize(x: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.normalize(x)
}

pub fn denormalize(x: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.denormalize(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub behavior: Behavior,
    pub fraction: f64,
}

pub fn validate_mixture(mixture: &[MixtureEntry]) -> Result<()> {
    if mixture.is_empty() {
        return Err(Error::InvalidArgument("empty behavior mixture".into()));
    }
    if mixture.iter().any(|m| !(m.fraction >= 0.0)) {
        return Err(Error::InvalidArgument(
            "mixture fractions must be non-negative".into(),
        ));
    }
    let total: f64 = mixture.iter().map(|m| m.fraction).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "mixture fractions sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub env: EnvSpec,
    pub mixture: Vec<MixtureEntry>,
    pub seed: u64,
    pub n_episodes: usize,
    pub config_hash: String,
    pub state_stats: NormStats,
    pub action_stats: NormStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn env(&self) -> &EnvSpec {
        &self.header.env
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes
            .iter()
            .map(EpisodeRecord::total_return)
            .collect()
    }

    /// Mean return of the episodes carrying `tag`, if any.
    pub fn mean_return(&self, tag: Behavior) -> Option<f64> {
        let r: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| e.tag == tag)
            .map(EpisodeRecord::total_return)
            .collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Newline-delimited JSON: header, then one episode per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: DatasetHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Dataset("empty dataset file".into()))?,
        )?;
        let episodes = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpisodeRecord>, _>>()?;
        if episodes.len() != header.n_episodes {
            return Err(Error::Dataset(format!(
                "header announces {} episodes, file has {}",
                header.n_episodes,
                episodes.len()
            )));
        }
        for (i, e) in episodes.iter().enumerate() {
            e.validate(&header.env)
                .map_err(|err| Error::Dataset(format!("episode {i}: {err}")))?;
        }
        Ok(Dataset { header, episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

fn pick_behavior(mixture: &[MixtureEntry], rng: &mut Rng) -> Behavior {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for m in mixture {
        acc += m.fraction;
        if u < acc {
            return m.behavior;
        }
    }
    mixture
        .iter()
        .rev()
        .find(|m| m.fraction > 0.0)
        .unwrap_or(&mixture[0])
        .behavior
}

/// Rolls out one scripted episode for the full horizon. Maze goal hits do
/// not end data episodes; the behavior simply holds at its target.
pub fn rollout_behavior(spec: &EnvSpec, behavior: Behavior, rng: &mut Rng) -> EpisodeRecord {
    let mut state = spec.initial_state(rng);
    let goal = match &spec.dynamics {
        Dynamics::PointmassMaze(m) => Some(m.random_cell_center(rng).to_vec()),
        Dynamics::BimodalReach(_) => None,
    };
    let mut ep = EpisodeRecord {
        states: Vec::with_capacity(spec.horizon),
        actions: Vec::with_capacity(spec.horizon),
        rewards: Vec::with_capacity(spec.horizon),
        tag: behavior,
        goal: goal.clone(),
    };
    for t in 0..spec.horizon {
        let a = behavior_action(spec, behavior, &state, goal.as_deref(), rng);
        let tr = env_step(spec, &state, &a, t, rng);
        ep.states.push(std::mem::replace(&mut state, tr.next_state));
        ep.actions.push(a);
        ep.rewards.push(tr.reward);
    }
    ep
}

/// Generates `n_episodes` scripted rollouts. Episode `i` draws its behavior
/// and its dynamics noise from its own stream derived from `(seed, i)`.
pub fn gen_offline_dataset(
    spec: &EnvSpec,
    mixture: &[MixtureEntry],
    n_episodes: usize,
    seed: u64,
    config_hash: &str,
) -> Result<Dataset> {
    spec.validate()?;
    validate_mixture(mixture)?;
    let episodes: Vec<EpisodeRecord> = (0..n_episodes)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::tag("episode"), i as u64]);
            let behavior = pick_behavior(mixture, &mut r);
            rollout_behavior(spec, behavior, &mut r)
        })
        .collect();
    let state_stats = NormStats::from_rows(
        episodes
            .iter()
            .flat_map(|e| e.states.iter().map(Vec::as_slice)),
        spec.state_dim,
    );
    let action_stats = NormStats::from_rows(
        episodes
            .iter()
            .flat_map(|e| e.actions.iter().map(Vec::as_slice)),
        spec.action_dim,
    );
    Ok(Dataset {
        header: DatasetHeader {
            env: spec.clone(),
            mixture: mixture.to_vec(),
            seed,
            n_episodes,
            config_hash: config_hash.to_string(),
            state_stats,
            action_stats,
        },
        episodes,
    })
}
