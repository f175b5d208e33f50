//! Core of the text-GAN laboratory.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generators;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod report;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{AttentionMask, ModelDims};
pub use params::{Adam, Grads, ParamId, ParamStore, Session};
pub use tensor::{Tape, Tensor, Var};

pub use adversary::{DiscriminatorLM, RewardConfig};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Scale};
pub use data::{SequenceBatch, Vocabulary};
pub use generators::{Generator, SampleMode, VariantTag};
pub use metrics::{MetricsRecord, Phase};
pub use runner::{run_adversarial, run_experiment, run_pretrain, Runner};
