//! Optimizer, training loops, configuration, experiment harnesses and the
//! gradient-check suite behind the command-line tool.

mod ablate;
mod config;
pub mod gradcheck;
mod optim;
mod train;

pub use ablate::{ablate, compare_adaptation, AblationRow, AblationTable, AdaptationComparison};
pub use config::{
    DaSection, GraphSection, LambdaLocation, LambdaSchedule, ModelSection, NodeFeatureSource, TrainConfig,
    TrainSection,
};
pub use optim::{adam_step, cosine_lr, dann_ramp, AdamConfig, AdamState};
pub use train::{
    adversarial_step, build_model, classification_step, evaluate_model, train_da, train_da_observed, train_single,
    train_single_observed, DomainRow, EpochRow, Observer, RunArtifacts, StepRecord,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
