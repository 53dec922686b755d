//! Synthetic benchmark, performer pretraining, experiment orchestration
//! and persistence.

pub mod checkpoint;
pub mod experiment;
pub mod pretrain;
pub mod report;
pub mod synthetic;

pub use checkpoint::{load_model, save_model, Checkpoint, FORMAT_VERSION};
pub use experiment::{
    run_experiment, run_replicate, ExperimentConfig, ExperimentResult, ExplainerSpec,
    ReplicateOutcome, ReplicateResult, RunResult, SweepPoint,
};
pub use pretrain::{planted_trunk, pretrain_performer, PretrainConfig, PretrainReport, Pretrained};
pub use report::{emit_report, load_result};
pub use synthetic::{generate_dataset, Dataset, Split, SyntheticSpec};
