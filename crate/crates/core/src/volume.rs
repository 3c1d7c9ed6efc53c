//! Multi-coil k-space volumes, coil-combined image series and the
//! elementwise operations between them.

use std::collections::BTreeMap;

use ndarray::{Array3, Array4, Zip};
use num_complex::Complex32;

use crate::csm::CoilSensitivityMaps;
use crate::error::{check_finite, CoreError, Result};
use crate::sampling::SamplingMask;

/// Complex k-space laid out `[H, W, C, T]`.
///
/// `norm_scale` is the divisor applied at ingest; `data * norm_scale`
/// recovers the original intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceVolume {
    data: Array4<Complex32>,
    pub norm_scale: f32,
    pub meta: BTreeMap<String, String>,
}

impl KSpaceVolume {
    pub fn new(data: Array4<Complex32>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidArgument(format!(
                "k-space dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        check_finite("k-space", data.iter())?;
        Ok(Self { data, norm_scale: 1.0, meta: BTreeMap::new() })
    }

    /// Builds a volume from an acquisition buffer whose unacquired entries
    /// may hold anything (including NaN). Only `mask = 1` entries are read;
    /// the rest are zero-filled.
    pub fn from_measured(data: &Array4<Complex32>, mask: &SamplingMask) -> Result<Self> {
        let (h, w, c, t) = data.dim();
        mask.check_dims(h, w, t, "from_measured")?;
        let mut out = Array4::<Complex32>::zeros((h, w, c, t));
        for ((ih, iw, ic, it), v) in out.indexed_iter_mut() {
            if mask.is_sampled(ih, iw, it) {
                let m = data[[ih, iw, ic, it]];
                if !(m.re.is_finite() && m.im.is_finite()) {
                    return Err(CoreError::NonFinite {
                        what: "measured k-space",
                        index: ((ih * w + iw) * c + ic) * t + it,
                    });
                }
                *v = m;
            }
        }
        Self::new(out)
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn with_norm_scale(mut self, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CoreError::InvalidArgument(format!("norm_scale must be positive, got {scale}")));
        }
        self.norm_scale = scale;
        Ok(self)
    }

    pub fn data(&self) -> &Array4<Complex32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<Complex32> {
        self.data
    }

    /// `(H, W, C, T)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// Undo [`normalize_kspace`]: values in ingest units.
    pub fn denormalized(&self) -> Array4<Complex32> {
        self.data.mapv(|v| v * self.norm_scale)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.norm()))
    }
}

/// Coil-combined complex image series `[H, W, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CineImageSeries {
    pub data: Array3<Complex32>,
}

impl CineImageSeries {
    pub fn magnitude(&self) -> Array3<f32> {
        self.data.mapv(|v| v.norm())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// `out[h,w,t] = sum_c conj(csm[h,w,c]) * coil_imgs[h,w,c,t]`.
pub fn coil_combine(coil_imgs: &Array4<Complex32>, csm: &CoilSensitivityMaps) -> Result<CineImageSeries> {
    let (h, w, c, t) = coil_imgs.dim();
    if csm.maps.dim() != (h, w, c) {
        return Err(CoreError::ShapeMismatch {
            op: "coil_combine",
            expected: vec![h, w, c],
            got: csm.maps.shape().to_vec(),
        });
    }
    let mut out = Array3::<Complex32>::zeros((h, w, t));
    for ih in 0..h {
        for iw in 0..w {
            for ic in 0..c {
                let s = csm.maps[[ih, iw, ic]].conj();
                for it in 0..t {
                    out[[ih, iw, it]] += s * coil_imgs[[ih, iw, ic, it]];
                }
            }
        }
    }
    Ok(CineImageSeries { data: out })
}

/// Retrospective undersampling: keeps `mask = 1` entries bit-exactly and
/// writes zeros elsewhere (selection, so NaN at unacquired entries never
/// leaks through).
pub fn zero_fill(ksp_full: &KSpaceVolume, mask: &SamplingMask) -> Result<KSpaceVolume> {
    let (h, w, _, t) = ksp_full.dims();
    mask.check_dims(h, w, t, "zero_fill")?;
    let mut out = ksp_full.data.clone();
    for ((ih, iw, _, it), v) in out.indexed_iter_mut() {
        if !mask.is_sampled(ih, iw, it) {
            *v = Complex32::new(0.0, 0.0);
        }
    }
    Ok(KSpaceVolume { data: out, norm_scale: ksp_full.norm_scale, meta: ksp_full.meta.clone() })
}

/// Scales k-space to unit peak magnitude and records the divisor.
pub fn normalize_kspace(ksp: &KSpaceVolume) -> Result<KSpaceVolume> {
    let peak = ksp.max_abs();
    if peak == 0.0 {
        return Err(CoreError::InvalidArgument("cannot normalize all-zero k-space".into()));
    }
    let data = ksp.data.mapv(|v| v / peak);
    Ok(KSpaceVolume { data, norm_scale: ksp.norm_scale * peak, meta: ksp.meta.clone() })
}

/// Hard data consistency: measured values where `mask = 1`, predictions
/// elsewhere. Selection, not arithmetic blending, so sampled entries are
/// bit-identical to `meas`.
pub fn hard_dc(pred: &KSpaceVolume, meas: &KSpaceVolume, mask: &SamplingMask) -> Result<KSpaceVolume> {
    if pred.dims() != meas.dims() {
        let (a, b) = (pred.data.shape().to_vec(), meas.data.shape().to_vec());
        return Err(CoreError::ShapeMismatch { op: "hard_dc", expected: b, got: a });
    }
    let (h, w, _, t) = pred.dims();
    mask.check_dims(h, w, t, "hard_dc")?;
    let mut out = pred.data.clone();
    Zip::indexed(&mut out).and(&meas.data).for_each(|(ih, iw, _, it), o, &m| {
        if mask.is_sampled(ih, iw, it) {
            *o = m;
        }
    });
    Ok(KSpaceVolume { data: out, norm_scale: meas.norm_scale, meta: meas.meta.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csm::CsmSource;
    use crate::sampling::{MaskPattern, SamplingMask};
    use ndarray::Array3;
    use proptest::prelude::*;

    fn vol(h: usize, w: usize, c: usize, t: usize, seed: u32) -> KSpaceVolume {
        let data = Array4::from_shape_fn((h, w, c, t), |(a, b, cc, d)| {
            let k = (a * 7 + b * 13 + cc * 17 + d * 23) as f32 + seed as f32;
            Complex32::new((k * 0.37).sin(), (k * 0.11).cos())
        });
        KSpaceVolume::new(data).unwrap()
    }

    fn mask_from(f: impl Fn(usize, usize, usize) -> bool, h: usize, w: usize, t: usize) -> SamplingMask {
        let m = Array3::from_shape_fn((h, w, t), |(a, b, c)| f(a, b, c) as u8);
        SamplingMask::from_raw(m, 0, MaskPattern::UniformCartesian, 1.0).unwrap()
    }

    fn unit_csm(h: usize, w: usize, c: usize, v: Complex32) -> CoilSensitivityMaps {
        CoilSensitivityMaps { maps: Array3::from_elem((h, w, c), v), source: CsmSource::GroundTruth }
    }

    #[test]
    fn combine_single_coil_identity() {
        let k = vol(4, 5, 1, 3, 1);
        let out = coil_combine(k.data(), &unit_csm(4, 5, 1, Complex32::new(1.0, 0.0))).unwrap();
        for ((h, w, t), v) in out.data.indexed_iter() {
            assert_eq!(*v, k.data()[[h, w, 0, t]]);
        }
    }

    #[test]
    fn combine_two_equal_coils_gives_sqrt2() {
        let x = vol(3, 3, 1, 2, 4);
        let both = Array4::from_shape_fn((3, 3, 2, 2), |(h, w, _, t)| x.data()[[h, w, 0, t]]);
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let out = coil_combine(&both, &unit_csm(3, 3, 2, Complex32::new(s, 0.0))).unwrap();
        for ((h, w, t), v) in out.data.indexed_iter() {
            let expect = x.data()[[h, w, 0, t]] * std::f32::consts::SQRT_2;
            assert!((v - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn combine_zero_maps_and_shape_errors() {
        let k = vol(3, 3, 2, 2, 0);
        let out = coil_combine(k.data(), &unit_csm(3, 3, 2, Complex32::new(0.0, 0.0))).unwrap();
        assert!(out.data.iter().all(|v| v.norm() == 0.0));
        assert!(matches!(
            coil_combine(k.data(), &unit_csm(3, 3, 3, Complex32::new(1.0, 0.0))),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn combine_is_linear() {
        let a = vol(3, 4, 2, 2, 1);
        let b = vol(3, 4, 2, 2, 9);
        let csm = CoilSensitivityMaps {
            maps: Array3::from_shape_fn((3, 4, 2), |(h, w, c)| Complex32::new(0.3 * h as f32, 0.1 * (w + c) as f32)),
            source: CsmSource::GroundTruth,
        };
        let (ca, cb) = (Complex32::new(0.5, -1.0), Complex32::new(2.0, 0.25));
        let mixed = a.data().mapv(|v| v * ca) + &b.data().mapv(|v| v * cb);
        let lhs = coil_combine(&mixed, &csm).unwrap();
        let ra = coil_combine(a.data(), &csm).unwrap();
        let rb = coil_combine(b.data(), &csm).unwrap();
        for ((l, x), y) in lhs.data.iter().zip(ra.data.iter()).zip(rb.data.iter()) {
            assert!((l - (x * ca + y * cb)).norm() < 1e-5);
        }
    }

    #[test]
    fn zero_fill_edge_masks() {
        let k = vol(4, 4, 2, 2, 3);
        let all = zero_fill(&k, &mask_from(|_, _, _| true, 4, 4, 2)).unwrap();
        assert_eq!(all.data(), k.data());
        let none = zero_fill(&k, &mask_from(|_, _, _| false, 4, 4, 2)).unwrap();
        assert!(none.data().iter().all(|v| *v == Complex32::new(0.0, 0.0)));
        assert!(zero_fill(&k, &mask_from(|_, _, _| true, 4, 3, 2)).is_err());
    }

    #[test]
    fn zero_fill_checkerboard_matches_elementwise_product() {
        let k = vol(4, 4, 1, 1, 5);
        let m = mask_from(|h, w, _| (h + w) % 2 == 0, 4, 4, 1);
        let out = zero_fill(&k, &m).unwrap();
        for ((h, w, c, t), v) in out.data().indexed_iter() {
            let weight = ((h + w) % 2 == 0) as u8 as f32;
            assert_eq!(*v, k.data()[[h, w, c, t]] * weight);
        }
    }

    #[test]
    fn from_measured_ignores_unsampled_nan() {
        let k = vol(4, 4, 2, 2, 5);
        let m = mask_from(|_, w, _| w % 2 == 0, 4, 4, 2);
        let mut poisoned = k.data().clone();
        for ((_, w, _, _), v) in poisoned.indexed_iter_mut() {
            if w % 2 == 1 {
                *v = Complex32::new(f32::NAN, f32::NAN);
            }
        }
        let got = KSpaceVolume::from_measured(&poisoned, &m).unwrap();
        assert_eq!(got, zero_fill(&k, &m).unwrap());
        assert!(KSpaceVolume::new(poisoned).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut data = Array4::<Complex32>::zeros((2, 2, 1, 1));
        data[[0, 1, 0, 0]] = Complex32::new(6.0, 8.0);
        data[[1, 1, 0, 0]] = Complex32::new(1.0, -2.0);
        let k = KSpaceVolume::new(data).unwrap();
        let n = normalize_kspace(&k).unwrap();
        assert_eq!(n.norm_scale, 10.0);
        assert!((n.max_abs() - 1.0).abs() < 1e-7);
        let again = normalize_kspace(&n).unwrap();
        assert_eq!(again.data(), n.data());
        assert_eq!(again.norm_scale, 10.0);
        let zeros = KSpaceVolume::new(Array4::zeros((2, 2, 1, 1))).unwrap();
        assert!(normalize_kspace(&zeros).is_err());
    }

    #[test]
    fn normalize_round_trip_relative_error() {
        let k = vol(5, 6, 3, 2, 8);
        let scaled = KSpaceVolume::new(k.data().mapv(|v| v * 1234.5)).unwrap();
        let n = normalize_kspace(&scaled).unwrap();
        let back = n.denormalized();
        for (a, b) in back.iter().zip(scaled.data().iter()) {
            assert!((a - b).norm() <= 1e-6 * b.norm().max(1e-30) + 1e-6 * 1234.5 * 1e-3);
        }
    }

    #[test]
    fn hard_dc_selects_entries() {
        let p = vol(4, 4, 2, 3, 1);
        let m = vol(4, 4, 2, 3, 2);
        let ones = mask_from(|_, _, _| true, 4, 4, 3);
        let zeros = mask_from(|_, _, _| false, 4, 4, 3);
        assert_eq!(hard_dc(&p, &m, &ones).unwrap().data(), m.data());
        assert_eq!(hard_dc(&p, &m, &zeros).unwrap().data(), p.data());
        let mixed = mask_from(|_, w, t| (w + t) % 3 == 0, 4, 4, 3);
        let out = hard_dc(&p, &m, &mixed).unwrap();
        for ((h, w, c, t), v) in out.data().indexed_iter() {
            let src = if (w + t) % 3 == 0 { m.data() } else { p.data() };
            assert_eq!(v.re.to_bits(), src[[h, w, c, t]].re.to_bits());
            assert_eq!(v.im.to_bits(), src[[h, w, c, t]].im.to_bits());
        }
        assert!(hard_dc(&p, &vol(4, 4, 1, 3, 0), &mixed).is_err());
    }

    proptest! {
        #[test]
        fn zero_fill_and_hard_dc_idempotent(seed in 0u32..1000, modulo in 1usize..5) {
            let k = vol(4, 6, 2, 3, seed);
            let p = vol(4, 6, 2, 3, seed + 1);
            let m = mask_from(|_, w, t| (w + 2 * t) % modulo == 0, 4, 6, 3);
            let once = zero_fill(&k, &m).unwrap();
            prop_assert_eq!(zero_fill(&once, &m).unwrap(), once);
            let dc = hard_dc(&p, &k, &m).unwrap();
            prop_assert_eq!(hard_dc(&dc, &k, &m).unwrap(), dc);
        }
    }
}
