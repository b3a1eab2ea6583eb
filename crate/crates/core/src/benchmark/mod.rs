//! The 1-D benchmark: data generation, base-model training, the repeated
//! RMSE protocol and coverage-curve calibration checks. Also a synthetic 2-D
//! spatial dataset for leave-one-out comparisons.

mod coverage;
mod data;
mod runner;
mod spatial;

pub use coverage::{coverage_curve, nominal_grid, CoverageCurve, IntervalForecast};
pub use data::{
    base_prediction_matrix, dataset_1d, generate_dataset, generate_sample, inputs_1d, true_function, validation_grid,
    BaseModel, BaseModelKind, NoiseModel, Sample1d,
};
pub use runner::{
    run_benchmark, run_repetition, BenchmarkConfig, BenchmarkReport, Method, MethodOutcome, MethodSummary, Repetition,
    TreeChoice, SUMMARY_SCHEMA_VERSION,
};
pub use spatial::{spatial_dataset, spatial_truth, SpatialConfig};
