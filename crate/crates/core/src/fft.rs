//! Centered, orthonormal 2-D FFT pair over the two leading axes.
//!
//! The DC sample sits at index `n / 2` along each transformed axis, so the
//! forward transform is `fftshift(fft(ifftshift(x))) / sqrt(n)` per axis.
//! Trailing axes (coils, frames, ...) are batched.

use ndarray::{ArrayD, Axis, Dimension};
use num_complex::Complex;
use rustfft::num_traits::Float;
use rustfft::{FftDirection, FftNum, FftPlanner};

use crate::error::{CoreError, Result};

/// Forward centered FFT over axes 0 and 1.
pub fn fft2_centered<T, D>(img: &ndarray::Array<Complex<T>, D>) -> Result<ndarray::Array<Complex<T>, D>>
where
    T: FftNum + Float,
    D: Dimension,
{
    transform(img, FftDirection::Forward)
}

/// Inverse centered FFT over axes 0 and 1; exact inverse of [`fft2_centered`].
pub fn ifft2_centered<T, D>(ksp: &ndarray::Array<Complex<T>, D>) -> Result<ndarray::Array<Complex<T>, D>>
where
    T: FftNum + Float,
    D: Dimension,
{
    transform(ksp, FftDirection::Inverse)
}

fn transform<T, D>(x: &ndarray::Array<Complex<T>, D>, dir: FftDirection) -> Result<ndarray::Array<Complex<T>, D>>
where
    T: FftNum + Float,
    D: Dimension,
{
    if x.ndim() < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "centered 2-D FFT needs at least 2 axes, got {}",
            x.ndim()
        )));
    }
    if let Some(index) = x.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(CoreError::NonFinite { what: "fft input", index });
    }
    let mut out: ArrayD<Complex<T>> = x.to_owned().into_dyn();
    let mut planner = FftPlanner::<T>::new();
    for axis in 0..2 {
        let n = out.shape()[axis];
        if n == 0 {
            continue;
        }
        let fft = planner.plan_fft(n, dir);
        let scale = T::from_f64(1.0 / (n as f64).sqrt()).expect("representable scale");
        let zero = Complex::<T>::new(T::zero(), T::zero());
        let mut buf = vec![zero; n];
        let mut scratch = vec![zero; fft.get_inplace_scratch_len()];
        for mut lane in out.lanes_mut(Axis(axis)) {
            // ifftshift: element at centered index i moves to (i - n/2) mod n
            for (i, v) in lane.iter().enumerate() {
                buf[(i + n - n / 2) % n] = *v;
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            // fftshift: element at natural index j moves to (j + n/2) mod n
            for (j, v) in buf.iter().enumerate() {
                lane[(j + n / 2) % n] = *v * scale;
            }
        }
    }
    Ok(out.into_dimensionality::<D>().expect("dimensionality preserved"))
}
