//! Cartesian undersampling masks with a fully sampled autocalibration (ACS)
//! block, and conversion between masks and k-space coordinate sets.
//!
//! Masks are `[H, W, T]`: a sampled phase-encode line `w` in frame `t` is
//! sampled along the whole readout `H`.

use std::collections::HashSet;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPattern {
    UniformCartesian,
    GaussianCartesian,
}

impl MaskPattern {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPattern::UniformCartesian => "uniform-cartesian",
            MaskPattern::GaussianCartesian => "gaussian-cartesian",
        }
    }
}

impl std::str::FromStr for MaskPattern {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-cartesian" | "uniform" => Ok(Self::UniformCartesian),
            "gaussian-cartesian" | "gaussian" => Ok(Self::GaussianCartesian),
            other => Err(CoreError::InvalidArgument(format!("unknown mask pattern {other:?}"))),
        }
    }
}

fn default_acs() -> usize {
    16
}
fn default_true() -> bool {
    true
}

/// Parameters of a generated mask. The seed fixes the Gaussian draws and the
/// interleave phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    #[serde(rename = "r")]
    pub r: f64,
    #[serde(default = "default_acs")]
    pub acs_lines: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub interleave: bool,
    /// Gaussian pattern only: whether ACS lines count toward the `ceil(W/R)`
    /// line budget or are added on top of it.
    #[serde(default = "default_true")]
    pub acs_in_budget: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            pattern: MaskPattern::UniformCartesian,
            r: 4.0,
            acs_lines: 16,
            seed: 0,
            interleave: true,
            acs_in_budget: true,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self, w: usize) -> Result<()> {
        if !(self.r.is_finite() && self.r >= 1.0) {
            return Err(CoreError::InvalidArgument(format!("acceleration R must be >= 1, got {}", self.r)));
        }
        if self.r > w as f64 {
            return Err(CoreError::InvalidArgument(format!("acceleration R={} exceeds W={w}", self.r)));
        }
        if self.acs_lines > w {
            return Err(CoreError::InvalidArgument(format!("acs_lines={} exceeds W={w}", self.acs_lines)));
        }
        Ok(())
    }
}

/// Binary `[H, W, T]` sampling mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    mask: Array3<u8>,
    pub acs_lines: usize,
    pub pattern: MaskPattern,
    pub nominal_r: f64,
}

/// Half-open range of the central ACS phase-encode lines.
pub fn acs_range(w: usize, acs_lines: usize) -> std::ops::Range<usize> {
    let start = (w / 2).saturating_sub(acs_lines / 2);
    start..(start + acs_lines).min(w)
}

impl SamplingMask {
    /// Wraps a raw mask. Entries must be 0/1 and the central `acs_lines`
    /// lines must be sampled in every frame and readout row.
    pub fn from_raw(mask: Array3<u8>, acs_lines: usize, pattern: MaskPattern, nominal_r: f64) -> Result<Self> {
        let (h, w, t) = mask.dim();
        if h == 0 || w == 0 || t == 0 {
            return Err(CoreError::InvalidArgument(format!("mask dims must be >= 1, got {:?}", mask.shape())));
        }
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(CoreError::InvalidArgument(format!("mask entries must be 0 or 1, found {v}")));
        }
        if acs_lines > w {
            return Err(CoreError::InvalidArgument(format!("acs_lines={acs_lines} exceeds W={w}")));
        }
        for it in 0..t {
            for iw in acs_range(w, acs_lines) {
                for ih in 0..h {
                    if mask[[ih, iw, it]] != 1 {
                        return Err(CoreError::InvalidArgument(format!(
                            "ACS line {iw} not sampled at readout {ih}, frame {it}"
                        )));
                    }
                }
            }
        }
        Ok(Self { mask, acs_lines, pattern, nominal_r })
    }

    pub fn mask(&self) -> &Array3<u8> {
        &self.mask
    }

    /// `(H, W, T)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.mask.dim()
    }

    #[inline]
    pub fn is_sampled(&self, h: usize, w: usize, t: usize) -> bool {
        self.mask[[h, w, t]] == 1
    }

    /// Whether the phase-encode line `w` is sampled in frame `t` (readout row 0).
    pub fn line_sampled(&self, w: usize, t: usize) -> bool {
        self.mask[[0, w, t]] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    /// True when every phase-encode line is either fully sampled or empty
    /// along the readout.
    pub fn is_cartesian(&self) -> bool {
        let (h, w, t) = self.dims();
        (0..t).all(|it| (0..w).all(|iw| (1..h).all(|ih| self.mask[[ih, iw, it]] == self.mask[[0, iw, it]])))
    }

    pub fn acs_range(&self) -> std::ops::Range<usize> {
        acs_range(self.dims().1, self.acs_lines)
    }

    pub(crate) fn check_dims(&self, h: usize, w: usize, t: usize, op: &'static str) -> Result<()> {
        if self.dims() != (h, w, t) {
            return Err(CoreError::ShapeMismatch {
                op,
                expected: vec![h, w, t],
                got: self.mask.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn lines_to_mask(lines: &[Vec<bool>], h: usize) -> Array3<u8> {
    let t = lines.len();
    let w = lines.first().map_or(0, |l| l.len());
    Array3::from_shape_fn((h, w, t), |(_, iw, it)| lines[it][iw] as u8)
}

/// Uniform Cartesian mask: every `R`-th line, shifted by one line per frame
/// when interleaved, plus the ACS block.
pub fn make_uniform_mask(spec: &MaskSpec, h: usize, w: usize, t: usize) -> Result<SamplingMask> {
    if spec.pattern != MaskPattern::UniformCartesian {
        return Err(CoreError::InvalidArgument("make_uniform_mask needs a uniform-cartesian spec".into()));
    }
    spec.validate(w)?;
    if spec.r.fract() != 0.0 {
        return Err(CoreError::InvalidArgument(format!("uniform masks need an integer R, got {}", spec.r)));
    }
    let r = spec.r as usize;
    let phase = (spec.seed % r as u64) as usize;
    let acs = acs_range(w, spec.acs_lines);
    let lines: Vec<Vec<bool>> = (0..t)
        .map(|it| {
            let offset = if spec.interleave { (it + phase) % r } else { phase };
            (0..w).map(|iw| iw % r == offset || acs.contains(&iw)).collect()
        })
        .collect();
    SamplingMask::from_raw(lines_to_mask(&lines, h), spec.acs_lines, spec.pattern, spec.r)
}

/// Gaussian-density Cartesian mask: per frame, `ceil(W/R)` distinct lines
/// drawn without replacement with weight `exp(-(w - W/2)^2 / (2 (W/6)^2))`.
pub fn make_gaussian_mask(spec: &MaskSpec, h: usize, w: usize, t: usize) -> Result<SamplingMask> {
    if spec.pattern != MaskPattern::GaussianCartesian {
        return Err(CoreError::InvalidArgument("make_gaussian_mask needs a gaussian-cartesian spec".into()));
    }
    spec.validate(w)?;
    let budget = (w as f64 / spec.r).ceil() as usize;
    let acs = acs_range(w, spec.acs_lines);
    let extra = if spec.acs_in_budget {
        if budget < spec.acs_lines {
            return Err(CoreError::InvalidArgument(format!(
                "line budget {budget} (W={w}, R={}) is smaller than acs_lines={}",
                spec.r, spec.acs_lines
            )));
        }
        budget - spec.acs_lines
    } else {
        budget
    };
    let sigma = w as f64 / 6.0;
    let centre = (w / 2) as f64;
    let weights: Vec<f64> = (0..w)
        .map(|iw| {
            let d = iw as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw_frame = |rng: &mut ChaCha8Rng| -> Vec<bool> {
        let mut picked: Vec<bool> = (0..w).map(|iw| acs.contains(&iw)).collect();
        let mut remaining: Vec<usize> = (0..w).filter(|iw| !acs.contains(iw)).collect();
        for _ in 0..extra.min(remaining.len()) {
            let total: f64 = remaining.iter().map(|&iw| weights[iw]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pos = remaining.len() - 1;
            for (k, &iw) in remaining.iter().enumerate() {
                u -= weights[iw];
                if u < 0.0 {
                    pos = k;
                    break;
                }
            }
            picked[remaining.swap_remove(pos)] = true;
        }
        picked
    };
    let lines: Vec<Vec<bool>> = if spec.interleave {
        (0..t).map(|_| draw_frame(&mut rng)).collect()
    } else {
        let one = draw_frame(&mut rng);
        vec![one; t]
    };
    SamplingMask::from_raw(lines_to_mask(&lines, h), spec.acs_lines, spec.pattern, spec.r)
}

pub fn make_mask(spec: &MaskSpec, h: usize, w: usize, t: usize) -> Result<SamplingMask> {
    match spec.pattern {
        MaskPattern::UniformCartesian => make_uniform_mask(spec, h, w, t),
        MaskPattern::GaussianCartesian => make_gaussian_mask(spec, h, w, t),
    }
}

/// `H*W*T / ones` over the full 3-D mask.
pub fn effective_acceleration(mask: &SamplingMask) -> Result<f64> {
    let ones = mask.count_ones();
    if ones == 0 {
        return Err(CoreError::Empty("sampling mask"));
    }
    Ok(mask.mask.len() as f64 / ones as f64)
}

/// Maps index `i` of an axis with `n` entries onto `[-1, 1]`.
pub fn normalize_index(i: usize, n: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        (-1.0 + 2.0 * i as f64 / (n - 1) as f64) as f32
    }
}

/// k-space coordinates `(t, x, y)`: `t` frame, `x` readout row (over H),
/// `y` phase-encode line (over W); grid and `[-1, 1]^3` forms in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSet {
    /// `(T, H, W)`
    pub dims: (usize, usize, usize),
    pub grid: Vec<[usize; 3]>,
    pub norm: Vec<[f32; 3]>,
}

impl CoordinateSet {
    pub fn from_grid(grid: Vec<[usize; 3]>, dims: (usize, usize, usize)) -> Result<Self> {
        let (t, h, w) = dims;
        let mut seen = HashSet::with_capacity(grid.len());
        for p in &grid {
            if p[0] >= t || p[1] >= h || p[2] >= w {
                return Err(CoreError::InvalidArgument(format!("coordinate {p:?} outside grid {dims:?}")));
            }
            if !seen.insert(*p) {
                return Err(CoreError::InvalidArgument(format!("duplicate coordinate {p:?}")));
            }
        }
        let norm = grid
            .iter()
            .map(|p| [normalize_index(p[0], t), normalize_index(p[1], h), normalize_index(p[2], w)])
            .collect();
        Ok(Self { dims, grid, norm })
    }

    /// Every `(t, x, y)` of a `T x H x W` grid in row-major order.
    pub fn full_grid(h: usize, w: usize, t: usize) -> Self {
        let mut grid = Vec::with_capacity(h * w * t);
        for it in 0..t {
            for ih in 0..h {
                for iw in 0..w {
                    grid.push([it, ih, iw]);
                }
            }
        }
        Self::from_grid(grid, (t, h, w)).expect("full grid is valid")
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Subset by positions into this set.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            dims: self.dims,
            grid: idx.iter().map(|&i| self.grid[i]).collect(),
            norm: idx.iter().map(|&i| self.norm[i]).collect(),
        }
    }
}

/// One coordinate per sampled `(t, x, y)`, ordered by frame, then readout,
/// then phase-encode.
pub fn mask_to_coordinates(mask: &SamplingMask) -> CoordinateSet {
    let (h, w, t) = mask.dims();
    let mut grid = Vec::with_capacity(mask.count_ones());
    for it in 0..t {
        for ih in 0..h {
            for iw in 0..w {
                if mask.is_sampled(ih, iw, it) {
                    grid.push([it, ih, iw]);
                }
            }
        }
    }
    CoordinateSet::from_grid(grid, (t, h, w)).expect("mask coordinates are unique and in range")
}

/// Inverse of [`mask_to_coordinates`]: the raw `[H, W, T]` occupancy.
pub fn mask_from_coordinates(coords: &CoordinateSet) -> Array3<u8> {
    let (t, h, w) = coords.dims;
    let mut m = Array3::<u8>::zeros((h, w, t));
    for p in &coords.grid {
        m[[p[1], p[2], p[0]]] = 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(r: f64, acs: usize, seed: u64) -> MaskSpec {
        MaskSpec { pattern: MaskPattern::UniformCartesian, r, acs_lines: acs, seed, ..Default::default() }
    }

    fn gaussian(r: f64, acs: usize, seed: u64, in_budget: bool) -> MaskSpec {
        MaskSpec {
            pattern: MaskPattern::GaussianCartesian,
            r,
            acs_lines: acs,
            seed,
            acs_in_budget: in_budget,
            ..Default::default()
        }
    }

    fn sampled_lines(m: &SamplingMask, t: usize) -> Vec<usize> {
        (0..m.dims().1).filter(|&w| m.line_sampled(w, t)).collect()
    }

    #[test]
    fn uniform_r1_is_full() {
        let m = make_uniform_mask(&uniform(1.0, 4, 0), 3, 10, 4).unwrap();
        assert!(m.mask().iter().all(|&v| v == 1));
    }

    #[test]
    fn uniform_interleave_congruence() {
        let m = make_uniform_mask(&uniform(4.0, 0, 0), 2, 8, 4).unwrap();
        assert_eq!(sampled_lines(&m, 0), vec![0, 4]);
        assert_eq!(sampled_lines(&m, 1), vec![1, 5]);
        assert_eq!(sampled_lines(&m, 2), vec![2, 6]);
        assert_eq!(sampled_lines(&m, 3), vec![3, 7]);
        assert!(m.is_cartesian());
    }

    #[test]
    fn uniform_w204_counts_against_counting_oracle() {
        let (w, r, acs) = (204usize, 4usize, 16usize);
        let m = make_uniform_mask(&uniform(r as f64, acs, 0), 2, w, 4).unwrap();
        let block = acs_range(w, acs);
        assert_eq!(block, 94..110);
        for t in 0..4 {
            let on_grid_in_acs = block.clone().filter(|iw| iw % r == t % r).count();
            assert_eq!(sampled_lines(&m, t).len(), 51 + (acs - on_grid_in_acs));
        }
        let eff = effective_acceleration(&m).unwrap();
        assert!((3.0..=4.0).contains(&eff), "effective R {eff}");
    }

    #[test]
    fn uniform_rejects_bad_specs() {
        assert!(make_uniform_mask(&uniform(9.0, 0, 0), 2, 8, 2).is_err());
        assert!(make_uniform_mask(&uniform(2.5, 0, 0), 2, 8, 2).is_err());
        assert!(make_uniform_mask(&uniform(2.0, 10, 0), 2, 8, 2).is_err());
        assert!(make_uniform_mask(&gaussian(2.0, 0, 0, true), 2, 8, 2).is_err());
    }

    #[test]
    fn gaussian_r1_full_and_deterministic() {
        let full = make_gaussian_mask(&gaussian(1.0, 16, 3, true), 2, 32, 3).unwrap();
        assert!(full.mask().iter().all(|&v| v == 1));
        let a = make_gaussian_mask(&gaussian(4.0, 8, 42, true), 4, 64, 6).unwrap();
        let b = make_gaussian_mask(&gaussian(4.0, 8, 42, true), 4, 64, 6).unwrap();
        assert_eq!(a, b);
        let c = make_gaussian_mask(&gaussian(4.0, 8, 43, true), 4, 64, 6).unwrap();
        assert_ne!(a, c);
        for t in 0..6 {
            assert_eq!(sampled_lines(&a, t).len(), 16);
        }
    }

    #[test]
    fn gaussian_budget_below_acs_rejected() {
        assert!(make_gaussian_mask(&gaussian(8.0, 16, 0, true), 2, 64, 2).is_err());
        assert!(make_gaussian_mask(&gaussian(8.0, 16, 0, false), 2, 64, 2).is_ok());
    }

    /// Monte-Carlo density histogram over many seeds.
    fn line_density(spec_of: impl Fn(u64) -> MaskSpec, w: usize, seeds: u64) -> Vec<f64> {
        let mut hist = vec![0.0; w];
        for seed in 0..seeds {
            let m = make_gaussian_mask(&spec_of(seed), 1, w, 1).unwrap();
            for (iw, hv) in hist.iter_mut().enumerate() {
                if m.line_sampled(iw, 0) {
                    *hv += 1.0;
                }
            }
        }
        hist.iter().map(|v| v / seeds as f64).collect()
    }

    #[test]
    fn gaussian_density_decreases_away_from_centre() {
        let w = 64;
        let acs = acs_range(w, 16);
        for in_budget in [true, false] {
            let dens = line_density(|s| gaussian(4.0, 16, s, in_budget), w, 10_000);
            for iw in acs.clone() {
                assert_eq!(dens[iw], 1.0);
            }
            // Walk outward from the ACS block on each side; consecutive lines
            // may only increase by noise (binomial std at 10k draws < 0.005).
            let left: Vec<f64> = (0..acs.start).rev().map(|iw| dens[iw]).collect();
            let right: Vec<f64> = (acs.end..w).map(|iw| dens[iw]).collect();
            for side in [left, right] {
                for pair in side.windows(2) {
                    assert!(pair[1] <= pair[0] + 0.02, "density not decreasing: {pair:?}");
                }
            }
            if !in_budget {
                // 16 extra lines out of 48 non-ACS: the nearest non-ACS lines
                // must be clearly denser than the edges.
                assert!(dens[w / 2 + 8] > 3.0 * dens[w - 1]);
            }
        }
    }

    #[test]
    fn coordinates_examples() {
        let zeros = SamplingMask::from_raw(Array3::zeros((3, 4, 2)), 0, MaskPattern::UniformCartesian, 1.0).unwrap();
        assert!(mask_to_coordinates(&zeros).is_empty());
        assert!(effective_acceleration(&zeros).is_err());

        let ones = SamplingMask::from_raw(Array3::ones((2, 2, 1)), 0, MaskPattern::UniformCartesian, 1.0).unwrap();
        let c = mask_to_coordinates(&ones);
        assert_eq!(c.len(), 4);
        assert_eq!(effective_acceleration(&ones).unwrap(), 1.0);
        assert_eq!(c.norm[0], [0.0, -1.0, -1.0]);
        assert_eq!(c.norm[3], [0.0, 1.0, 1.0]);

        let mut raw = Array3::<u8>::zeros((4, 6, 2));
        for h in 0..4 {
            raw[[h, 3, 1]] = 1;
        }
        let single = SamplingMask::from_raw(raw, 0, MaskPattern::UniformCartesian, 12.0).unwrap();
        let c = mask_to_coordinates(&single);
        assert_eq!(c.grid, vec![[1, 0, 3], [1, 1, 3], [1, 2, 3], [1, 3, 3]]);
    }

    #[test]
    fn half_lines_is_r2() {
        let m = make_uniform_mask(&MaskSpec { interleave: false, ..uniform(2.0, 0, 0) }, 4, 8, 3).unwrap();
        assert_eq!(effective_acceleration(&m).unwrap(), 2.0);
    }

    #[test]
    fn coordinate_set_rejects_duplicates_and_out_of_range() {
        assert!(CoordinateSet::from_grid(vec![[0, 0, 0], [0, 0, 0]], (1, 1, 1)).is_err());
        assert!(CoordinateSet::from_grid(vec![[0, 2, 0]], (1, 2, 2)).is_err());
        let g = CoordinateSet::full_grid(3, 5, 2);
        assert_eq!(g.len(), 30);
        // normalization: 0 -> -1, dim-1 -> +1, per axis
        assert_eq!(g.norm[0], [-1.0, -1.0, -1.0]);
        assert_eq!(g.norm[29], [1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn generated_masks_hold_invariants(
            seed in 0u64..500,
            r in 1usize..6,
            w in 12usize..40,
            t in 1usize..7,
            gaussian_pattern in proptest::bool::ANY,
        ) {
            let acs = 4.min(w);
            let spec = if gaussian_pattern {
                gaussian(r as f64, acs, seed, false)
            } else {
                uniform(r as f64, acs, seed)
            };
            let m = make_mask(&spec, 3, w, t).unwrap();
            // determinism
            prop_assert_eq!(&make_mask(&spec, 3, w, t).unwrap(), &m);
            prop_assert!(m.is_cartesian());
            // ACS always sampled
            for it in 0..t {
                for iw in acs_range(w, acs) {
                    prop_assert!(m.line_sampled(iw, it));
                }
            }
            // coordinate round trip
            let coords = mask_to_coordinates(&m);
            prop_assert_eq!(coords.len(), m.count_ones());
            prop_assert_eq!(&mask_from_coordinates(&coords), m.mask());
            // interleave coverage for uniform masks
            if !gaussian_pattern && t >= r {
                for start in 0..=(t - r) {
                    let mut classes = vec![false; r];
                    for it in start..start + r {
                        for iw in 0..w {
                            if m.line_sampled(iw, it) && !acs_range(w, acs).contains(&iw) {
                                classes[iw % r] = true;
                            }
                        }
                    }
                    // every residue class that has a non-ACS line must be hit
                    for (class, hit) in classes.iter().enumerate() {
                        let exists = (0..w).any(|iw| iw % r == class && !acs_range(w, acs).contains(&iw));
                        prop_assert!(*hit || !exists);
                    }
                }
            }
        }
    }
}
