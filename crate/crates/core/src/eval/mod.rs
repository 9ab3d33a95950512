//! Accuracy metrics, classical baselines, benchmarks and weight-based denoising.

pub mod baseline;
pub mod benchmark;
pub mod metrics;

pub use baseline::{jet_normal_unweighted, pca_normal, JET_SCALES};
pub use benchmark::{run_benchmark, BenchmarkConfig, BenchmarkReport, Category, EvalReport, Method, MethodKind};
pub use metrics::{
    aggregate_weights, align_curvatures, angle_error_unoriented, curvature_error, curvature_rms, default_alpha_grid, denoise,
    denoise_threshold, pgp, rmse, DENOISE_SLACK,
};
