//! Cropping and pixel metrics on magnitude sequences `[H, W, T]`.

use kpinr_core::CineImageSeries;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::dists::{dists, PerceptualBackend};
use crate::error::{EvalError, Result};

/// Keeps rows `[H/4, 3H/4)` (floor division), dropping the first and last
/// quarters along the height.
pub fn crop_eval_region(img: &Array3<f32>) -> Result<Array3<f32>> {
    let h = img.dim().0;
    if h < 4 {
        return Err(EvalError::Invalid(format!("height {h} is too small to crop (needs >= 4)")));
    }
    Ok(img.slice(s![h / 4..3 * h / 4, .., ..]).to_owned())
}

fn check_same(x: &Array3<f32>, reference: &Array3<f32>) -> Result<()> {
    if x.dim() != reference.dim() {
        return Err(EvalError::Shape(x.shape().to_vec(), reference.shape().to_vec()));
    }
    if x.is_empty() {
        return Err(EvalError::Invalid("empty image sequence".into()));
    }
    Ok(())
}

fn peak(reference: &Array3<f32>) -> f64 {
    reference.iter().fold(0.0f32, |m, &v| m.max(v)) as f64
}

/// `10 log10(max(ref)^2 / MSE)` over the whole sequence; `+inf` when the
/// sequences are identical.
pub fn psnr(x: &Array3<f32>, reference: &Array3<f32>) -> Result<f64> {
    check_same(x, reference)?;
    let peak = peak(reference);
    if peak <= 0.0 {
        return Err(EvalError::Invalid("reference has no positive peak".into()));
    }
    let mse = x.iter().zip(reference.iter()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized `SSIM_WINDOW x SSIM_WINDOW` Gaussian.
pub fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let (di, dj) = (i as f64 - r, j as f64 - r);
        (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = g.sum();
    g / total
}

/// Mean SSIM of one frame over all fully contained window positions.
fn ssim_frame(x: ArrayView2<f32>, y: ArrayView2<f32>, win: &Array2<f64>, range: f64) -> f64 {
    let (h, w) = x.dim();
    let n = SSIM_WINDOW;
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let mut total = 0.0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let g = win[[a, b]];
                    let (p, q) = (x[[i + a, j + b]] as f64, y[[i + a, j + b]] as f64);
                    mx += g * p;
                    my += g * q;
                    xx += g * p * p;
                    yy += g * q * q;
                    xy += g * p * q;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / ((h - n + 1) * (w - n + 1)) as f64
}

/// Gaussian-window SSIM per frame, averaged over frames. The dynamic range
/// is the reference maximum over the whole sequence.
pub fn ssim(x: &Array3<f32>, reference: &Array3<f32>) -> Result<f64> {
    check_same(x, reference)?;
    let (h, w, t) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::Invalid(format!("{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window exceeds the {h}x{w} image")));
    }
    let range = peak(reference);
    if range <= 0.0 {
        return Err(EvalError::Invalid("reference has no positive peak".into()));
    }
    let win = gaussian_window();
    let sum: f64 = (0..t)
        .map(|it| ssim_frame(x.index_axis(Axis(2), it), reference.index_axis(Axis(2), it), &win, range))
        .sum();
    Ok(sum / t as f64)
}

/// Central phase-encode column over time, `[H, T]`.
pub fn xt_strip(img: &Array3<f32>) -> Array2<f32> {
    let w = img.dim().1;
    img.index_axis(Axis(1), w / 2).to_owned()
}

/// Cropped PSNR, SSIM and (when a backend is given) perceptual similarity
/// of `x` against `reference`, both uncropped magnitude sequences.
pub fn evaluate_series(
    x: &Array3<f32>,
    reference: &Array3<f32>,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<SequenceMetrics> {
    check_same(x, reference)?;
    let (xc, rc) = (crop_eval_region(x)?, crop_eval_region(reference)?);
    Ok(SequenceMetrics { psnr_db: psnr(&xc, &rc)?, ssim: ssim(&xc, &rc)?, dists: dists(&xc, &rc, backend)? })
}

/// Same as [`evaluate_series`] on coil-combined complex series.
pub fn evaluate_images(x: &CineImageSeries, reference: &CineImageSeries, backend: Option<&dyn PerceptualBackend>) -> Result<SequenceMetrics> {
    evaluate_series(&x.magnitude(), &reference.magnitude(), backend)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    /// `None` when no perceptual backend is registered.
    pub dists: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, t: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, t), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn crop_rows() {
        let img = Array3::from_shape_fn((8, 3, 2), |(h, _, _)| h as f32);
        let c = crop_eval_region(&img).unwrap();
        assert_eq!(c.dim(), (4, 3, 2));
        assert_eq!(c[[0, 0, 0]], 2.0);
        assert_eq!(c[[3, 0, 0]], 5.0);
        let big = Array3::from_shape_fn((100, 1, 1), |(h, _, _)| h as f32);
        let c = crop_eval_region(&big).unwrap();
        assert_eq!((c[[0, 0, 0]], c[[c.dim().0 - 1, 0, 0]]), (25.0, 74.0));
        assert!(crop_eval_region(&Array3::zeros((3, 4, 1))).is_err());
    }

    #[test]
    fn crop_composes() {
        let img = Array3::from_shape_fn((32, 2, 1), |(h, _, _)| h as f32);
        let twice = crop_eval_region(&crop_eval_region(&img).unwrap()).unwrap();
        let direct = img.slice(s![8 + 4..8 + 12, .., ..]).to_owned();
        assert_eq!(twice, direct);
    }

    #[test]
    fn psnr_examples() {
        let r = random(4, 4, 2, 1);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let mut reference = Array3::<f32>::zeros((10, 10, 1));
        reference[[0, 0, 0]] = 1.0;
        let x = &reference + 0.01;
        assert!((psnr(&x, &reference).unwrap() - 40.0).abs() < 1e-4);
        let a = random(5, 6, 3, 2);
        let b = random(5, 6, 3, 3);
        let peak = b.iter().cloned().fold(0.0f32, f32::max) as f64;
        let mse: f64 = a.iter().zip(b.iter()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / 90.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (peak * peak / mse).log10()).abs() < 1e-9);
        assert!(psnr(&a, &Array3::zeros((5, 6, 3))).is_err());
    }

    #[test]
    fn ssim_identity_and_sign_flip() {
        let r = random(12, 10, 2, 4);
        assert_eq!(ssim(&r, &r).unwrap(), 1.0);
        // zero local mean, so the luminance term stays near 1 and the flipped
        // structure drives the score negative
        let checker = Array3::from_shape_fn((12, 12, 2), |(i, j, _)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        let v = ssim(&checker.mapv(|x| -x), &checker).unwrap();
        assert!(v.is_finite() && v < 0.0, "{v}");
        assert!(ssim(&random(6, 10, 1, 0), &random(6, 10, 1, 1)).is_err());
    }

    /// Independent per-pixel SSIM: explicit windowed means and variances
    /// using a freshly built kernel and two-pass statistics.
    fn oracle(x: &Array2<f64>, y: &Array2<f64>, range: f64) -> f64 {
        let mut k = [[0.0f64; 7]; 7];
        let mut tot = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-(((i as f64 - 3.0).powi(2) + (j as f64 - 3.0).powi(2)) / 4.5)).exp();
                tot += *v;
            }
        }
        let (h, w) = x.dim();
        let mut acc = 0.0;
        let mut count = 0;
        for i in 3..h - 3 {
            for j in 3..w - 3 {
                let wsum = |f: &dyn Fn(f64, f64) -> f64| {
                    let mut s = 0.0;
                    for a in 0..7 {
                        for b in 0..7 {
                            s += k[a][b] / tot * f(x[[i + a - 3, j + b - 3]], y[[i + a - 3, j + b - 3]]);
                        }
                    }
                    s
                };
                let mx = wsum(&|p, _| p);
                let my = wsum(&|_, q| q);
                let vx = wsum(&|p, _| (p - mx) * (p - mx));
                let vy = wsum(&|_, q| (q - my) * (q - my));
                let cxy = wsum(&|p, q| (p - mx) * (q - my));
                let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_scalar_oracle() {
        let x = Array3::from_shape_fn((16, 16, 1), |(i, j, _)| ((i * 3 + j) % 7) as f32 / 6.0);
        let y = Array3::from_shape_fn((16, 16, 1), |(i, j, _)| (((i * 3 + j) % 7) as f32 / 6.0 + 0.1 * ((i * j) % 3) as f32).min(1.0));
        let want = oracle(&x.index_axis(Axis(2), 0).mapv(|v| v as f64), &y.index_axis(Axis(2), 0).mapv(|v| v as f64), peak(&y));
        let got = ssim(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn xt_strip_of_static_sequence_has_identical_columns() {
        let frame = random(6, 5, 1, 7);
        let seq = Array3::from_shape_fn((6, 5, 4), |(h, w, _)| frame[[h, w, 0]]);
        let strip = xt_strip(&seq);
        assert_eq!(strip.dim(), (6, 4));
        for t in 1..4 {
            assert_eq!(strip.column(t), strip.column(0));
        }
    }

    #[test]
    fn only_the_central_half_is_scored() {
        let reference = random(16, 12, 2, 8);
        let x = &reference + &random(16, 12, 2, 9).mapv(|v| 0.05 * v);
        let clean = evaluate_series(&x, &reference, None).unwrap();
        let (mut px, mut pr) = (x.clone(), reference.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for ((h, w, t), v) in px.indexed_iter_mut() {
            if !(4..12).contains(&h) {
                *v = rng.random_range(0.0..50.0);
                pr[[h, w, t]] = rng.random_range(0.0..50.0);
            }
        }
        let dirty = evaluate_series(&px, &pr, None).unwrap();
        assert_eq!(clean, dirty);
        assert!(clean.dists.is_none());
    }

    proptest! {
        #[test]
        fn psnr_is_scale_invariant(seed in 0u64..1000, c in 0.1f32..10.0) {
            let a = random(4, 5, 2, seed);
            let b = random(4, 5, 2, seed + 1);
            let p1 = psnr(&a, &b).unwrap();
            let p2 = psnr(&a.mapv(|v| v * c), &b.mapv(|v| v * c)).unwrap();
            prop_assert!((p1 - p2).abs() < 1e-3);
        }
    }
}
