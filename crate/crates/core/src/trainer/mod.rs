//! Training, evaluation and ablation driver.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod optim;
pub mod plot;
mod train;

pub use ablation::{apply_ablation, run_ablation, AblationAxis, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::{DataSource, EvalModel, ExperimentConfig, SplitConfig};
pub use evaluate::{evaluate, EvaluationReport};
pub use train::{derive_seed, load_subjects, prepare_split, train, train_on, EpochLog, StepLog, TrainOptions, TrainOutcome};
