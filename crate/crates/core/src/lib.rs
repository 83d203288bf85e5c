//! Hypernetwork-generated adapters for multi-task fine-tuning of a small
//! encoder-decoder transformer.

pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod hyper;
pub mod model;
pub mod rundir;
pub mod tasks;
pub mod tensor;

pub use config::{Ablations, ConfigError, ModelConfig, RunConfig, TrainConfig, Variant};
pub use harness::{FreezePolicy, HarnessError};
pub use hyper::{GeneratedWeights, WeightCache};
pub use model::{build_model, Batch, BaseWeights, Model, ModelError, Owner, Parameter};
pub use tasks::{Example, Split, TaskRegistry, TaskSpec};
pub use tensor::{Tape, Tensor, TensorError};
