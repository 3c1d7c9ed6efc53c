//! Reference reconstructions to compare the dual-branch network against.
//!
//! - [`pinr`]: the positional branch trained alone by the same trainer.
//! - [`grappa`]: k-t GRAPPA interpolation calibrated on the ACS block.
//! - [`lps`]: low-rank plus sparse iterative thresholding.

pub mod error;
pub mod grappa;
pub mod lps;
pub mod pinr;

pub use error::{BaselineError, Result};
pub use grappa::{
    kt_grappa_apply, kt_grappa_calibrate, kt_grappa_calibrate_on, kt_grappa_reconstruct, offset_class, solve_ridge, CoverageReport,
    GrappaKernels, KtGrappaOutput, KtGrappaSpec, OffsetClass,
};
pub use lps::{lps_reconstruct, nuclear_norm, soft_threshold, svt, EncodingOperator, LpsOutput, LpsSpec};
pub use pinr::{pinr_config, pinr_reconstruct};
