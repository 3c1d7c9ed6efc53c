//! Evaluation of cine reconstructions: cropped PSNR/SSIM, a pluggable
//! perceptual metric, paired significance tests and comparison tables.

pub mod dists;
pub mod error;
pub mod metrics;
pub mod report;
pub mod stats;

pub use dists::{dists, PerceptualBackend, StructureTexture};
pub use error::{EvalError, Result};
pub use metrics::{
    crop_eval_region, evaluate_images, evaluate_series, gaussian_window, psnr, ssim, xt_strip, SequenceMetrics,
};
pub use report::{
    make_report, read_metrics_csv, write_gray_png, write_metrics_csv, Cell, ComparisonTable, MetricRecord,
    MetricReport, Row, Setting, Summary, CROP_TAG, SIGNIFICANCE,
};
pub use stats::{wilcoxon_signed_rank, Wilcoxon};
