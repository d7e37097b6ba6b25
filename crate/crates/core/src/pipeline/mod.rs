//! Experiment pipeline: datasets, runners, compression, profiles,
//! regression, PCA, and reports.

pub mod compress;
pub mod dataset;
pub mod pca;
pub mod profile;
pub mod regress;
pub mod report;

pub use compress::{compress_model, distill_model, CompressConfig, DistillModelConfig};
pub use dataset::{gen_dataset, Dataset, DatasetKind, DatasetSpec, Targets};
pub use pca::pca2d;
pub use profile::{complexity_profile, ComplexityProfile};
pub use regress::{cross_validate, fit_regressor, RegressionModel, TargetKind};
pub use report::{emit_report, ReportFormat, RunRecord};

/// Caps rayon's worker pool from `FCX_THREADS` (ignored when unset, zero,
/// unparsable, or when a pool already exists).
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("FCX_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
