//! Perceptual similarity in the DISTS orientation (higher is better).
//!
//! A real DISTS score needs a pretrained VGG feature extractor, which is not
//! bundled. Callers register one through [`PerceptualBackend`]; without a
//! backend the metric is reported as unavailable. [`StructureTexture`] is a
//! small handcrafted backend with the same structure/texture form, useful
//! for tests and relative comparisons but not comparable to learned
//! DISTS values.

use ndarray::{Array2, ArrayView2, Array3, Axis};

use crate::error::{EvalError, Result};

pub trait PerceptualBackend {
    fn name(&self) -> &str;

    /// Distance between two magnitude frames; 0 for identical frames.
    fn distance(&self, x: ArrayView2<f32>, reference: ArrayView2<f32>) -> Result<f64>;
}

/// Frame-averaged `1 - distance`, clamped to `[0, 1]`. `None` means no
/// backend was registered.
pub fn dists(x: &Array3<f32>, reference: &Array3<f32>, backend: Option<&dyn PerceptualBackend>) -> Result<Option<f64>> {
    let Some(backend) = backend else {
        return Ok(None);
    };
    if x.dim() != reference.dim() {
        return Err(EvalError::Shape(x.shape().to_vec(), reference.shape().to_vec()));
    }
    let t = x.dim().2;
    if t == 0 {
        return Err(EvalError::Invalid("empty image sequence".into()));
    }
    let mut total = 0.0;
    for it in 0..t {
        let d = backend.distance(x.index_axis(Axis(2), it), reference.index_axis(Axis(2), it))?;
        total += (1.0 - d).clamp(0.0, 1.0);
    }
    Ok(Some(total / t as f64))
}

/// Handcrafted stand-in: global mean (texture) and covariance (structure)
/// comparisons over a pyramid of intensity and gradient-magnitude maps.
#[derive(Debug, Clone)]
pub struct StructureTexture {
    pub levels: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for StructureTexture {
    fn default() -> Self {
        Self { levels: 3, alpha: 0.5, beta: 0.5 }
    }
}

const C1: f64 = 1e-6;
const C2: f64 = 1e-6;

fn pool(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (img[[2 * i, 2 * j]] + img[[2 * i + 1, 2 * j]] + img[[2 * i, 2 * j + 1]] + img[[2 * i + 1, 2 * j + 1]])
    })
}

fn gradients(img: &Array2<f64>) -> [Array2<f64>; 2] {
    let (h, w) = img.dim();
    let gy = Array2::from_shape_fn((h - 1, w), |(i, j)| (img[[i + 1, j]] - img[[i, j]]).abs());
    let gx = Array2::from_shape_fn((h, w - 1), |(i, j)| (img[[i, j + 1]] - img[[i, j]]).abs());
    [gy, gx]
}

fn compare(a: &Array2<f64>, b: &Array2<f64>, alpha: f64, beta: f64) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b.iter()) {
        va += (p - ma) * (p - ma);
        vb += (q - mb) * (q - mb);
        cov += (p - ma) * (q - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let texture = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    let structure = (2.0 * cov + C2) / (va + vb + C2);
    alpha * texture + beta * structure
}

impl PerceptualBackend for StructureTexture {
    fn name(&self) -> &str {
        "structure-texture"
    }

    fn distance(&self, x: ArrayView2<f32>, reference: ArrayView2<f32>) -> Result<f64> {
        if x.dim() != reference.dim() {
            return Err(EvalError::Shape(x.shape().to_vec(), reference.shape().to_vec()));
        }
        let peak = reference.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
        if peak <= 0.0 {
            return Err(EvalError::Invalid("reference has no positive peak".into()));
        }
        let mut a = x.mapv(|v| v as f64 / peak);
        let mut b = reference.mapv(|v| v as f64 / peak);
        let (mut score, mut maps) = (0.0, 0usize);
        for level in 0..self.levels {
            let (h, w) = a.dim();
            if h < 2 || w < 2 {
                break;
            }
            score += compare(&a, &b, self.alpha, self.beta);
            for (ga, gb) in gradients(&a).iter().zip(gradients(&b).iter()) {
                score += compare(ga, gb, self.alpha, self.beta);
            }
            maps += 3;
            if level + 1 < self.levels {
                a = pool(&a);
                b = pool(&b);
            }
        }
        if maps == 0 {
            return Err(EvalError::Invalid(format!("frame {:?} is too small for the perceptual pyramid", x.dim())));
        }
        Ok(1.0 - score / maps as f64)
    }
}
