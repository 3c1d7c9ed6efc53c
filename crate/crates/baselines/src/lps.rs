//! Low-rank plus sparse decomposition of the cine series.
//!
//! Iterative thresholding on `M = L + S`: singular-value thresholding of the
//! space-by-time Casorati matrix gives `L`, soft thresholding of the
//! temporal Fourier coefficients gives `S`, and each sweep ends with the
//! data-consistency step `M <- L + S - E^H (E (L + S) - d)` where `E` is the
//! coil-weighted, masked Fourier operator. Runs in double precision.

use std::sync::Arc;

use kpinr_core::{fft2_centered, ifft2_centered, CineImageSeries, CoilSensitivityMaps, KSpaceVolume, SamplingMask};
use nalgebra::DMatrix;
use ndarray::{Array3, Array4, Axis, Zip};
use num_complex::{Complex32, Complex64};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{BaselineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LpsSpec {
    /// Singular-value threshold as a fraction of the zero-filled `sigma_1`.
    pub lambda_l: f64,
    /// Sparse threshold as a fraction of the largest zero-filled temporal
    /// Fourier magnitude.
    pub lambda_s: f64,
    pub max_iters: usize,
    /// Stop once `||M_k - M_{k-1}|| < tol ||M_{k-1}||`.
    pub tol: f64,
}

impl Default for LpsSpec {
    fn default() -> Self {
        Self { lambda_l: 0.01, lambda_s: 0.025, max_iters: 100, tol: 1e-5 }
    }
}

impl LpsSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && !v.is_nan();
        if !(ok(self.lambda_l) && ok(self.lambda_s) && ok(self.tol)) || self.max_iters == 0 {
            return Err(BaselineError::Config("L+S thresholds and tolerance must be >= 0, max_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Objective rises this many times in a row before the run is aborted.
pub const DIVERGENCE_STREAK: usize = 10;

/// `E`: image `[H, W, T]` to masked multi-coil k-space `[H, W, C, T]`.
#[derive(Debug, Clone)]
pub struct EncodingOperator {
    csm: Array3<Complex64>,
    mask: Array3<bool>,
}

impl EncodingOperator {
    pub fn new(csm: &CoilSensitivityMaps, mask: &SamplingMask) -> Result<Self> {
        let (h, w, _) = csm.maps.dim();
        let (mh, mw, _) = mask.dims();
        if (h, w) != (mh, mw) {
            return Err(BaselineError::Config(format!("coil maps {h}x{w} do not match mask {mh}x{mw}")));
        }
        Ok(Self { csm: csm.maps.mapv(c64), mask: mask.mask().mapv(|v| v == 1) })
    }

    pub fn forward(&self, x: &Array3<Complex64>) -> Result<Array4<Complex64>> {
        let (h, w, c) = self.csm.dim();
        let t = x.dim().2;
        let coil = Array4::from_shape_fn((h, w, c, t), |(ih, iw, ic, it)| self.csm[[ih, iw, ic]] * x[[ih, iw, it]]);
        let mut k = fft2_centered(&coil)?;
        self.apply_mask(&mut k);
        Ok(k)
    }

    pub fn adjoint(&self, k: &Array4<Complex64>) -> Result<Array3<Complex64>> {
        let mut k = k.clone();
        self.apply_mask(&mut k);
        let coil = ifft2_centered(&k)?;
        let (h, w, _, t) = coil.dim();
        let mut out = Array3::<Complex64>::zeros((h, w, t));
        for ((ih, iw, ic, it), v) in coil.indexed_iter() {
            out[[ih, iw, it]] += self.csm[[ih, iw, ic]].conj() * v;
        }
        Ok(out)
    }

    fn apply_mask(&self, k: &mut Array4<Complex64>) {
        for ((ih, iw, _, it), v) in k.indexed_iter_mut() {
            if !self.mask[[ih, iw, it]] {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
}

fn c64(v: Complex32) -> Complex64 {
    Complex64::new(v.re as f64, v.im as f64)
}

fn norm(x: impl IntoIterator<Item = Complex64>) -> f64 {
    x.into_iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Row `(h W + w)`, column `t`.
fn casorati(x: &Array3<Complex64>) -> DMatrix<Complex64> {
    let (h, w, t) = x.dim();
    DMatrix::from_fn(h * w, t, |r, c| x[[r / w, r % w, c]])
}

fn from_casorati(m: &DMatrix<Complex64>, h: usize, w: usize) -> Array3<Complex64> {
    Array3::from_shape_fn((h, w, m.ncols()), |(ih, iw, it)| m[(ih * w + iw, it)])
}

/// Singular-value soft thresholding; returns the result and its nuclear norm.
pub fn svt(m: &DMatrix<Complex64>, tau: f64) -> (DMatrix<Complex64>, f64) {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("left vectors requested"), svd.v_t.expect("right vectors requested"));
    let shrunk = svd.singular_values.map(|s| (s - tau).max(0.0));
    let nuclear = shrunk.sum();
    let mut us = u;
    for (j, s) in shrunk.iter().enumerate() {
        us.column_mut(j).scale_mut(*s);
    }
    (us * vt, nuclear)
}

pub fn nuclear_norm(m: &DMatrix<Complex64>) -> f64 {
    m.singular_values().sum()
}

/// Complex soft threshold `x max(|x| - tau, 0) / |x|`.
pub fn soft_threshold(x: Complex64, tau: f64) -> Complex64 {
    let a = x.norm();
    if a <= tau {
        Complex64::new(0.0, 0.0)
    } else {
        x * ((a - tau) / a)
    }
}

/// Unitary FFT along the frame axis.
struct TemporalFft {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl TemporalFft {
    fn new(t: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { fwd: planner.plan_fft_forward(t), inv: planner.plan_fft_inverse(t), scale: 1.0 / (t as f64).sqrt() }
    }

    fn apply(&self, x: &Array3<Complex64>, inverse: bool) -> Array3<Complex64> {
        let mut out = x.clone();
        let plan = if inverse { &self.inv } else { &self.fwd };
        let mut buf = vec![Complex64::new(0.0, 0.0); x.dim().2];
        for mut lane in out.lanes_mut(Axis(2)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            plan.process(&mut buf);
            for (v, b) in lane.iter_mut().zip(&buf) {
                *v = b * self.scale;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LpsOutput {
    /// `L + S` after the final data-consistency step, de-normalized.
    pub image: CineImageSeries,
    pub low_rank: CineImageSeries,
    pub sparse: CineImageSeries,
    /// `0.5 ||E(L+S) - d||^2 + lambda_L ||L||_* + lambda_S ||T S||_1` per iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub thresholds: (f64, f64),
}

fn to_series(x: &Array3<Complex64>, scale: f64) -> CineImageSeries {
    CineImageSeries { data: x.mapv(|v| Complex32::new((v.re * scale) as f32, (v.im * scale) as f32)) }
}

/// L+S reconstruction of the normalized measurement `meas`.
pub fn lps_reconstruct(meas: &KSpaceVolume, mask: &SamplingMask, csm: &CoilSensitivityMaps, spec: &LpsSpec) -> Result<LpsOutput> {
    spec.validate()?;
    let (h, w, c, t) = meas.dims();
    if csm.maps.dim() != (h, w, c) || mask.dims() != (h, w, t) {
        return Err(BaselineError::Config(format!(
            "k-space {:?}, coil maps {:?} and mask {:?} disagree",
            meas.dims(),
            csm.maps.dim(),
            mask.dims()
        )));
    }
    let op = EncodingOperator::new(csm, mask)?;
    let d = KSpaceVolume::from_measured(meas.data(), mask)?.data().mapv(c64);
    let tf = TemporalFft::new(t);

    let mut m = op.adjoint(&d)?;
    let sigma1 = casorati(&m).singular_values().max();
    let tmax = tf.apply(&m, false).iter().map(|v| v.norm()).fold(0.0, f64::max);
    let (lam_l, lam_s) = (spec.lambda_l * sigma1, spec.lambda_s * tmax);

    let mut l_prev = m.clone();
    let mut s = Array3::<Complex64>::zeros((h, w, t));
    let mut l = m.clone();
    let mut objective = Vec::new();
    let (mut streak, mut converged, mut iterations) = (0, false, 0);
    for _ in 0..spec.max_iters {
        iterations += 1;
        let m_old = m.clone();
        let (lc, nuc) = svt(&casorati(&(&m - &s)), lam_l);
        l = from_casorati(&lc, h, w);
        let ts = tf.apply(&(&m - &l_prev), false).mapv(|v| soft_threshold(v, lam_s));
        let l1: f64 = ts.iter().map(|v| v.norm()).sum();
        s = tf.apply(&ts, true);
        let x = &l + &s;
        let mut resid = op.forward(&x)?;
        Zip::from(&mut resid).and(&d).for_each(|r, &dv| *r -= dv);
        let obj = 0.5 * norm(resid.iter().copied()).powi(2) + lam_l * nuc + lam_s * l1;
        m = &x - &op.adjoint(&resid)?;
        l_prev = l.clone();

        if objective.last().is_some_and(|&prev| obj > prev) {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Err(BaselineError::Diverged { streak, last: obj });
            }
        } else {
            streak = 0;
        }
        objective.push(obj);
        let change = norm((&m - &m_old).iter().copied()) / norm(m_old.iter().copied()).max(f64::MIN_POSITIVE);
        if change < spec.tol {
            converged = true;
            break;
        }
    }
    let scale = meas.norm_scale as f64;
    Ok(LpsOutput {
        image: to_series(&m, scale),
        low_rank: to_series(&l, scale),
        sparse: to_series(&s, scale),
        objective,
        iterations,
        converged,
        thresholds: (lam_l, lam_s),
    })
}
