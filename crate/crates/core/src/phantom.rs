//! Synthetic multi-coil cardiac cine phantom.
//!
//! A static torso with a contracting, translating heart (bright blood pool
//! inside a darker myocardial ring), smooth image phase, Gaussian-magnitude
//! coil sensitivities with linear phase, RSS-normalized. The k-space is
//! exactly `fft2_centered(csm * image)` plus optional complex Gaussian noise.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::csm::{CoilSensitivityMaps, CsmSource};
use crate::error::{CoreError, Result};
use crate::fft::fft2_centered;
use crate::volume::{CineImageSeries, KSpaceVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    pub coils: usize,
    pub frames: usize,
    /// Heart centre excursion over the cycle, as a fraction of the half-FOV.
    pub motion_amplitude: f64,
    /// Peak fractional shrink of the heart radii (end systole).
    pub contraction: f64,
    /// Complex Gaussian noise std added to k-space (per real component).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { h: 64, w: 64, coils: 4, frames: 8, motion_amplitude: 0.06, contraction: 0.25, noise_std: 0.0, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h < 4 || self.w < 4 {
            return Err(CoreError::InvalidArgument(format!("phantom needs H, W >= 4, got {}x{}", self.h, self.w)));
        }
        if self.coils < 1 || self.frames < 1 {
            return Err(CoreError::InvalidArgument("phantom needs at least one coil and one frame".into()));
        }
        if !(self.noise_std >= 0.0 && self.motion_amplitude.is_finite() && (0.0..1.0).contains(&self.contraction)) {
            return Err(CoreError::InvalidArgument("phantom motion/noise parameters out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ksp_full: KSpaceVolume,
    pub csm: CoilSensitivityMaps,
    pub image: CineImageSeries,
}

impl Phantom {
    /// Pixels inside the object in any frame.
    pub fn support(&self) -> Array2<bool> {
        let mag = self.image.magnitude();
        let (h, w, t) = mag.dim();
        let peak = mag.iter().cloned().fold(0.0f32, f32::max);
        Array2::from_shape_fn((h, w), |(ih, iw)| (0..t).any(|it| mag[[ih, iw, it]] > 0.05 * peak))
    }
}

struct Ellipse {
    cu: f64,
    cv: f64,
    au: f64,
    av: f64,
    value: f64,
}

impl Ellipse {
    /// Smooth indicator with an edge roughly one pixel wide.
    fn eval(&self, u: f64, v: f64, edge: f64) -> f64 {
        let r = (((u - self.cu) / self.au).powi(2) + ((v - self.cv) / self.av).powi(2)).sqrt();
        let scale = self.au.min(self.av);
        self.value / (1.0 + ((r - 1.0) * scale / edge).exp())
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w, c, t) = (spec.h, spec.w, spec.coils, spec.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = |scale: f64| 1.0 + scale * (rng.random::<f64>() - 0.5);

    let edge = 1.0 / h.min(w) as f64;
    let body = Ellipse { cu: 0.0, cv: 0.0, au: 0.82 * jitter(0.1), av: 0.68 * jitter(0.1), value: 0.35 };
    let lungs = [
        Ellipse { cu: -0.05, cv: -0.42, au: 0.45, av: 0.2 * jitter(0.1), value: -0.25 },
        Ellipse { cu: -0.05, cv: 0.45, au: 0.4 * jitter(0.1), av: 0.16, value: -0.25 },
    ];
    let spine = Ellipse { cu: 0.6, cv: 0.02, au: 0.1, av: 0.09, value: 0.3 };
    let (heart_u, heart_v) = (0.05 * jitter(0.4), 0.08 * jitter(0.4));
    let (outer_u, outer_v) = (0.3 * jitter(0.1), 0.26 * jitter(0.1));
    let phase_a = 0.6 * jitter(0.2);
    let phase_b = -0.4 * jitter(0.2);

    let mut image = Array3::<Complex32>::zeros((h, w, t));
    for it in 0..t {
        let cycle = 2.0 * PI * it as f64 / t as f64;
        let squeeze = 1.0 - spec.contraction * (0.5 - 0.5 * cycle.cos());
        let du = spec.motion_amplitude * cycle.sin();
        let myocardium = Ellipse {
            cu: heart_u + du,
            cv: heart_v,
            au: outer_u * (1.0 - 0.3 * (1.0 - squeeze)),
            av: outer_v * (1.0 - 0.3 * (1.0 - squeeze)),
            value: 0.15,
        };
        let blood = Ellipse { cu: heart_u + du, cv: heart_v, au: 0.62 * outer_u * squeeze, av: 0.62 * outer_v * squeeze, value: 0.7 };
        for ih in 0..h {
            let u = (ih as f64 - (h / 2) as f64) / (h as f64 / 2.0);
            for iw in 0..w {
                let v = (iw as f64 - (w / 2) as f64) / (w as f64 / 2.0);
                let mut mag = body.eval(u, v, edge) + spine.eval(u, v, edge) + myocardium.eval(u, v, edge) + blood.eval(u, v, edge);
                for l in &lungs {
                    mag += l.eval(u, v, edge);
                }
                let mag = mag.max(0.0);
                let phase = phase_a * u + phase_b * v + 0.3 * u * v;
                image[[ih, iw, it]] = Complex32::from_polar(mag as f32, phase as f32);
            }
        }
    }

    let mut raw = Array3::<Complex32>::zeros((h, w, c));
    let spin = rng.random::<f64>() * 2.0 * PI / c as f64;
    for ic in 0..c {
        let theta = spin + 2.0 * PI * ic as f64 / c as f64;
        let (pu, pv) = (1.1 * theta.cos(), 1.1 * theta.sin());
        let width = if c == 1 { 2.0 } else { 0.9 };
        for ih in 0..h {
            let u = (ih as f64 - (h / 2) as f64) / (h as f64 / 2.0);
            for iw in 0..w {
                let v = (iw as f64 - (w / 2) as f64) / (w as f64 / 2.0);
                let d2 = (u - pu).powi(2) + (v - pv).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = theta + 0.5 * (u * theta.cos() + v * theta.sin());
                raw[[ih, iw, ic]] = Complex32::from_polar(mag as f32, phase as f32);
            }
        }
    }
    let csm = CoilSensitivityMaps::normalized(raw, CsmSource::GroundTruth);

    let mut coil_imgs = Array4::<Complex32>::zeros((h, w, c, t));
    for ((ih, iw, ic, it), v) in coil_imgs.indexed_iter_mut() {
        *v = csm.maps[[ih, iw, ic]] * image[[ih, iw, it]];
    }
    let mut ksp = fft2_centered(&coil_imgs)?;
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("std validated");
        for v in ksp.iter_mut() {
            *v += Complex32::new(normal.sample(&mut rng) as f32, normal.sample(&mut rng) as f32);
        }
    }
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("subject".to_string(), format!("phantom-{}", spec.seed));
    meta.insert("view".to_string(), "synthetic".to_string());
    Ok(Phantom {
        ksp_full: KSpaceVolume::new(ksp)?.with_meta(meta),
        csm,
        image: CineImageSeries { data: image },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::ifft2_centered;
    use crate::volume::coil_combine;

    #[test]
    fn static_phantom_frames_identical() {
        let ph = generate_phantom(&PhantomSpec { motion_amplitude: 0.0, contraction: 0.0, ..Default::default() }).unwrap();
        let img = &ph.image.data;
        for it in 1..img.dim().2 {
            for ih in 0..img.dim().0 {
                for iw in 0..img.dim().1 {
                    assert_eq!(img[[ih, iw, it]], img[[ih, iw, 0]]);
                }
            }
        }
    }

    #[test]
    fn combine_of_kspace_reproduces_image() {
        let ph = generate_phantom(&PhantomSpec::default()).unwrap();
        let imgs = ifft2_centered(ph.ksp_full.data()).unwrap();
        let comb = coil_combine(&imgs, &ph.csm).unwrap();
        for (a, b) in comb.data.iter().zip(ph.image.data.iter()) {
            assert!((a - b).norm() < 1e-5, "{a} vs {b}");
        }
        let dims = ph.ksp_full.dims();
        assert_eq!(dims, (64, 64, 4, 8));
        let rss = ph.csm.rss();
        assert!(rss.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = PhantomSpec { noise_std: 1e-3, seed: 11, h: 16, w: 16, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.ksp_full, b.ksp_full);
        assert_eq!(a.csm, b.csm);
        let c = generate_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.ksp_full, c.ksp_full);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(generate_phantom(&PhantomSpec { coils: 0, ..Default::default() }).is_err());
        assert!(generate_phantom(&PhantomSpec { h: 2, ..Default::default() }).is_err());
    }
}
