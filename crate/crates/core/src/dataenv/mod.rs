//! Synthetic environments, offline datasets, windowing and reverse dynamics.

mod dataset;
mod dynamics;
mod env;
mod maze;
mod window;

pub use dataset::{
    denormalize, gen_offline_dataset, normalize, rollout_behavior, validate_mixture, Dataset,
    DatasetHeader, EpisodeRecord, MixtureEntry, NormStats, STD_FLOOR,
};
pub use dynamics::{train_reverse_dynamics, ReverseDynamics, ReverseDynamicsConfig};
pub use env::{
    behavior_action, env_step, Behavior, Dynamics, EnvSpec, ReachLayout, Transition, BEHAVIOR_NOISE,
};
pub use maze::MazeLayout;
pub use window::{
    history, state_plans, window_dataset, PlanWindow, SampleSet, StatePlanSet, WindowSet,
};
