//! Experiment runners behind the command-line tool.

mod bench;
mod experiments;
mod inspect;
mod train;

pub use bench::{bench, fit_exponent, BenchConfig, BenchReport, BenchRow};
pub use experiments::{ablate, median, sweep_ffn, AblationResult, SweepResult, ABLATION_HEADER, SWEEP_HEADER};
pub use inspect::{
    centroid_separation, dump_features, enumerate_params, gradcheck_cmd, param_report, write_features_csv,
    FeatureRow, ParamReport, GRADCHECK_MAX_CHANNELS, GRADCHECK_MAX_TOKENS,
};
pub use train::{
    evaluate_checkpoint, evaluate_model, load_data, prepare_split, train, train_with, EpochRecord, Prepared,
    TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, MODEL_FILE, REPORT_FILE,
};
