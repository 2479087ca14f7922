//! Training variants, the training loop, evaluation on bias regimes,
//! class-count benchmarks and experiment configuration.

mod bench;
mod config;
mod eval;
mod run;
mod train;
mod variant;

pub use bench::{bench_class_scaling, scaling_ratio, write_bench_csv, BenchRow};
pub use config::{Backbone, ExperimentConfig};
pub use run::{ensure_ranges, run_experiment, ExperimentOutcome};
pub use eval::{accuracy, evaluate, predictions, EvalReport, RegimeResult};
pub use train::{batch_gradient, calibrate, time_epoch, train, Calibration, EpochRecord, TrainHistory};
pub use variant::{
    build_training_heatmaps, select_stochastic_from_uniform, select_stochastic_logit, training_targets, Engine,
    VariantKind, VariantSpec,
};
