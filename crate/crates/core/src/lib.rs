//! Shared building blocks for scan-specific cine MRI reconstruction.
//!
//! Everything here is a pure function over immutable inputs: multi-coil
//! k-space volumes laid out `[H, W, C, T]` (readout, phase-encode, coil,
//! frame), centered orthonormal FFTs, coil sensitivity handling, Cartesian
//! undersampling masks and a synthetic cardiac phantom.

pub mod csm;
pub mod error;
pub mod fft;
pub mod phantom;
pub mod sampling;
pub mod volume;

pub use csm::{estimate_csm_from_acs, CoilSensitivityMaps, CsmSource};
pub use error::{CoreError, Result};
pub use fft::{fft2_centered, ifft2_centered};
pub use phantom::{generate_phantom, Phantom, PhantomSpec};
pub use sampling::{
    effective_acceleration, make_gaussian_mask, make_mask, make_uniform_mask, mask_from_coordinates,
    mask_to_coordinates, CoordinateSet, MaskPattern, MaskSpec, SamplingMask,
};
pub use volume::{coil_combine, hard_dc, normalize_kspace, zero_fill, CineImageSeries, KSpaceVolume};

pub use num_complex::Complex32;
