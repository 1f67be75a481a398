//! Synthetic data, evaluation, and experiment orchestration.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod plot;

pub use config::{EvalSection, ExperimentConfig, FramesConfig, GradcheckConfig, PlotConfig, PretrainConfig, RunSpec};
pub use dataset::{degrade, gen_dataset, Dataset, DatasetSpec, RewardConfig, Split, REWARD_IDS};
pub use eval::{evaluate, video_seed, write_eval_rows, ConditionStats, EvalConfig, EvalReport, Stats};
pub use experiment::{
    base_checkpoint, derive_seed, evaluate_all, fine_tune, frame_video, pretrain, run_experiment,
    run_experiment_config, run_train_config, setup, write_plots, ExperimentOutcome, RunOutcome, Setup,
};
pub use gradcheck::{run_gradcheck, GradcheckRow};
