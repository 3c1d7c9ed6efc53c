//! Coil sensitivity maps and their estimation from the ACS block.

use ndarray::{Array3, Array4};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fft::ifft2_centered;
use crate::sampling::SamplingMask;
use crate::volume::KSpaceVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsmSource {
    GroundTruth,
    AcsEstimated,
}

impl CsmSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            CsmSource::GroundTruth => "ground-truth",
            CsmSource::AcsEstimated => "acs-estimated",
        }
    }
}

/// Complex `[H, W, C]` sensitivities, root-sum-of-squares normalized per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSensitivityMaps {
    pub maps: Array3<Complex32>,
    pub source: CsmSource,
}

/// Pixels whose coil root-sum-of-squares falls below this are zeroed.
pub const RSS_FLOOR: f32 = 1e-8;

impl CoilSensitivityMaps {
    /// Divides every pixel's coil vector by its root-sum-of-squares.
    pub fn normalized(maps: Array3<Complex32>, source: CsmSource) -> Self {
        let (h, w, c) = maps.dim();
        let mut out = maps;
        for ih in 0..h {
            for iw in 0..w {
                let rss = (0..c).map(|ic| out[[ih, iw, ic]].norm_sqr() as f64).sum::<f64>().sqrt() as f32;
                for ic in 0..c {
                    let v = &mut out[[ih, iw, ic]];
                    *v = if rss < RSS_FLOOR { Complex32::new(0.0, 0.0) } else { *v / rss };
                }
            }
        }
        Self { maps: out, source }
    }

    /// Per-pixel `sqrt(sum_c |s_c|^2)`, `[H, W]`.
    pub fn rss(&self) -> ndarray::Array2<f32> {
        let (h, w, c) = self.maps.dim();
        ndarray::Array2::from_shape_fn((h, w), |(ih, iw)| {
            (0..c).map(|ic| self.maps[[ih, iw, ic]].norm_sqr()).sum::<f32>().sqrt()
        })
    }

    pub fn coils(&self) -> usize {
        self.maps.dim().2
    }
}

fn hann(n: usize) -> Vec<f32> {
    // periodic-free form with nonzero end samples
    (0..n)
        .map(|k| {
            let x = (k + 1) as f64 / (n + 1) as f64;
            (0.5 - 0.5 * (2.0 * std::f64::consts::PI * x).cos()) as f32
        })
        .collect()
}

/// Low-resolution sensitivity estimate: time-average the ACS block, apodize
/// with a separable Hann window (ACS width along phase-encode, matched
/// resolution along readout), inverse FFT and RSS-normalize.
pub fn estimate_csm_from_acs(ksp: &KSpaceVolume, mask: &SamplingMask) -> Result<CoilSensitivityMaps> {
    let (h, w, c, t) = ksp.dims();
    mask.check_dims(h, w, t, "estimate_csm_from_acs")?;
    if mask.acs_lines == 0 {
        return Err(CoreError::Empty("ACS region"));
    }
    if mask.acs_lines < 4 {
        return Err(CoreError::InvalidArgument(format!(
            "CSM estimation needs at least 4 ACS lines, got {}",
            mask.acs_lines
        )));
    }
    let acs = mask.acs_range();
    let win_w = hann(acs.len());
    let width_h = ((acs.len() * h) as f64 / w as f64).round().max(1.0) as usize;
    let width_h = width_h.min(h);
    let start_h = (h / 2).saturating_sub(width_h / 2);
    let win_h = hann(width_h);

    let mut low = Array4::<Complex32>::zeros((h, w, c, 1));
    let inv_t = 1.0 / t as f32;
    for (kh, &wh) in win_h.iter().enumerate() {
        let ih = start_h + kh;
        for (kw, iw) in acs.clone().enumerate() {
            let weight = wh * win_w[kw] * inv_t;
            for ic in 0..c {
                let mut acc = Complex32::new(0.0, 0.0);
                for it in 0..t {
                    acc += ksp.data()[[ih, iw, ic, it]];
                }
                low[[ih, iw, ic, 0]] = acc * weight;
            }
        }
    }
    let img = ifft2_centered(&low)?;
    let maps = img.index_axis_move(ndarray::Axis(3), 0);
    Ok(CoilSensitivityMaps::normalized(maps, CsmSource::AcsEstimated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::sampling::{make_uniform_mask, MaskSpec};

    #[test]
    fn normalized_rss_is_zero_or_one() {
        let raw = Array3::from_shape_fn((5, 4, 3), |(h, w, c)| {
            if h == 0 {
                Complex32::new(0.0, 0.0)
            } else {
                Complex32::new((h * c) as f32 * 0.3, w as f32 - 1.5)
            }
        });
        let m = CoilSensitivityMaps::normalized(raw, CsmSource::GroundTruth);
        for v in m.rss().iter() {
            assert!(*v == 0.0 || (v - 1.0).abs() <= 1e-6, "rss {v}");
        }
    }

    #[test]
    fn single_coil_estimate_has_unit_magnitude() {
        let ph = generate_phantom(&PhantomSpec { coils: 1, h: 32, w: 32, frames: 4, ..Default::default() }).unwrap();
        let mask = make_uniform_mask(&MaskSpec { acs_lines: 8, ..Default::default() }, 32, 32, 4).unwrap();
        let est = estimate_csm_from_acs(&ph.ksp_full, &mask).unwrap();
        assert_eq!(est.source, CsmSource::AcsEstimated);
        for v in est.maps.iter() {
            assert!((v.norm() - 1.0).abs() < 1e-5 || v.norm() == 0.0);
        }
    }

    #[test]
    fn all_zero_kspace_gives_zero_maps() {
        let k = KSpaceVolume::new(Array4::zeros((16, 16, 3, 2))).unwrap();
        let mask = make_uniform_mask(&MaskSpec { acs_lines: 6, ..Default::default() }, 16, 16, 2).unwrap();
        let est = estimate_csm_from_acs(&k, &mask).unwrap();
        assert!(est.maps.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn rejects_missing_acs() {
        let k = KSpaceVolume::new(Array4::zeros((8, 8, 1, 1))).unwrap();
        let none = make_uniform_mask(&MaskSpec { acs_lines: 0, r: 2.0, ..Default::default() }, 8, 8, 1).unwrap();
        assert!(matches!(estimate_csm_from_acs(&k, &none), Err(CoreError::Empty(_))));
        let thin = make_uniform_mask(&MaskSpec { acs_lines: 2, r: 2.0, ..Default::default() }, 8, 8, 1).unwrap();
        assert!(estimate_csm_from_acs(&k, &thin).is_err());
    }

    /// Angle between estimated and true coil vectors, insensitive to the
    /// common phase the object imprints on the estimate.
    fn angular_error_deg(a: &[Complex32], b: &[Complex32]) -> f64 {
        let dot: num_complex::Complex64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let p = x * y.conj();
                num_complex::Complex64::new(p.re as f64, p.im as f64)
            })
            .sum();
        let na = a.iter().map(|v| v.norm_sqr() as f64).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v.norm_sqr() as f64).sum::<f64>().sqrt();
        (dot.norm() / (na * nb)).clamp(0.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn estimate_tracks_ground_truth_on_phantom() {
        let ph = generate_phantom(&PhantomSpec::default()).unwrap();
        let (h, w, c, t) = ph.ksp_full.dims();
        let mask = make_uniform_mask(&MaskSpec::default(), h, w, t).unwrap();
        let under = crate::volume::zero_fill(&ph.ksp_full, &mask).unwrap();
        let est = estimate_csm_from_acs(&under, &mask).unwrap();
        let support = ph.support();
        let mut errs = Vec::new();
        for ih in 0..h {
            for iw in 0..w {
                if !support[[ih, iw]] {
                    continue;
                }
                let a: Vec<_> = (0..c).map(|ic| est.maps[[ih, iw, ic]]).collect();
                let b: Vec<_> = (0..c).map(|ic| ph.csm.maps[[ih, iw, ic]]).collect();
                errs.push(angular_error_deg(&a, &b));
            }
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errs[errs.len() / 2];
        assert!(median <= 15.0, "median angular error {median} deg");
    }
}
