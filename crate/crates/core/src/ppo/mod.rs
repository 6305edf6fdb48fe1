//! Proximal policy optimization over frozen-encoder latents.

pub mod config;
pub mod gae;
pub mod rollout;
pub mod train;
pub mod update;

pub use config::{CriticMode, TrainConfig};
pub use gae::compute_gae;
pub use rollout::{collect_rollout, make_critic, Collector, Critic, Encoders, RolloutBuffer};
pub use train::{
    evaluate, train, train_with, EvalRecord, EvalReport, RunStatus, TrainRun, UpdateMetrics,
};
pub use update::{policy_loss_and_grad, ppo_update, value_loss_and_grad, UpdateStats};
