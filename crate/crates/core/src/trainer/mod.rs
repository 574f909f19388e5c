//! The training loop and everything around it.

pub mod config;
pub mod fit;
pub mod step;

pub use config::{EvalConfig, PredictWith, TrainConfig, Variant};
pub use fit::{
    evaluate_model, fit, predict_volume, run_ablation, AblationRun, AblationSummary, AblationTable, Case, Dataset,
    FitResult, RunLayout, Sampler, Stream,
};
pub use step::{select_pseudo_source, train_step, LabeledPatch, Source, StepReport};
