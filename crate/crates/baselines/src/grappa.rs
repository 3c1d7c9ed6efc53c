//! k-t GRAPPA on Cartesian line masks.
//!
//! Every unacquired point is predicted from acquired neighbours in time and
//! phase-encode: for each source frame the nearest acquired lines on both
//! sides of the target line, at a few readout offsets, across all coils.
//! Targets sharing the same relative source geometry form an offset class
//! with its own kernel, fitted by ridge regression on the fully sampled
//! ACS block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use kpinr_core::{CineImageSeries, CoilSensitivityMaps, KSpaceVolume, SamplingMask};
use nalgebra::DMatrix;
use ndarray::Array4;
use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::{BaselineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KtGrappaSpec {
    /// Source frames relative to the target frame, cyclic in time.
    pub frame_offsets: Vec<i32>,
    /// Readout offsets sampled on every source line.
    pub readout_offsets: Vec<i32>,
    /// Acquired lines taken on each side of the target per source frame.
    pub lines_per_side: usize,
    /// Tikhonov weight relative to the mean diagonal of the normal matrix.
    pub rho: f64,
}

impl Default for KtGrappaSpec {
    fn default() -> Self {
        Self { frame_offsets: vec![-1, 0, 1], readout_offsets: vec![-1, 0, 1], lines_per_side: 1, rho: 1e-4 }
    }
}

impl KtGrappaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_offsets.is_empty() || self.readout_offsets.is_empty() || self.lines_per_side == 0 {
            return Err(BaselineError::Config("k-t GRAPPA kernel needs source frames, readout offsets and lines".into()));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(BaselineError::Config(format!("ridge weight must be finite and >= 0, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Source lines of a target as `(frame offset mod T, phase-encode offset)`,
/// sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OffsetClass(pub Vec<(usize, i32)>);

impl fmt::Display for OffsetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(dt, dw)| format!("t+{dt}:y{dw:+}")).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

impl OffsetClass {
    /// Phase-encode extent covered by sources and target, `(min, max)`.
    fn extent(&self) -> (i32, i32) {
        self.0.iter().fold((0, 0), |(lo, hi), &(_, dw)| (lo.min(dw), hi.max(dw)))
    }
}

fn source_frames(spec: &KtGrappaSpec, frames: usize) -> BTreeSet<usize> {
    spec.frame_offsets.iter().map(|&dt| dt.rem_euclid(frames as i32) as usize).collect()
}

/// Offset class of the unacquired line `(w, t)` and whether every source
/// frame contributed the full number of lines on both sides.
pub fn offset_class(mask: &SamplingMask, spec: &KtGrappaSpec, w: usize, t: usize) -> (OffsetClass, bool) {
    let (_, nw, nt) = mask.dims();
    let mut lines = BTreeSet::new();
    let mut complete = true;
    for dt in source_frames(spec, nt) {
        let tt = (t + dt) % nt;
        let below: Vec<usize> = (0..=w).rev().filter(|&y| mask.line_sampled(y, tt)).take(spec.lines_per_side).collect();
        let above: Vec<usize> = (w + 1..nw).filter(|&y| mask.line_sampled(y, tt)).take(spec.lines_per_side).collect();
        complete &= below.len() == spec.lines_per_side && above.len() == spec.lines_per_side;
        for y in below.into_iter().chain(above) {
            lines.insert((dt, y as i32 - w as i32));
        }
    }
    (OffsetClass(lines.into_iter().collect()), complete)
}

/// Calibrated kernels, one `[sources, coils]` matrix per offset class.
/// Source order is line-major, then readout offset, then coil.
#[derive(Debug, Clone)]
pub struct GrappaKernels {
    pub spec: KtGrappaSpec,
    pub coils: usize,
    pub weights: BTreeMap<OffsetClass, DMatrix<Complex64>>,
    /// Edge classes without enough calibration data; their targets use the
    /// view-sharing fallback.
    pub uncalibrated: Vec<OffsetClass>,
}

/// How the missing lines were filled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub kernel_lines: usize,
    /// Lines copied from the nearest frame that acquired them.
    pub fallback_lines: usize,
    /// Lines acquired in no frame at all, left at zero.
    pub unfilled_lines: usize,
    pub fallback_classes: Vec<String>,
}

fn c64(v: Complex32) -> Complex64 {
    Complex64::new(v.re as f64, v.im as f64)
}

/// Source values of target `(h, w, t)` laid out in kernel order. Readout
/// offsets that leave the grid read as zero.
fn gather_sources(data: &Array4<Complex32>, class: &OffsetClass, readout: &[i32], h: usize, w: usize, t: usize, out: &mut [Complex64]) {
    let (nh, _, nc, nt) = data.dim();
    let mut k = 0;
    for &(dt, dw) in &class.0 {
        let (y, tt) = ((w as i32 + dw) as usize, (t + dt) % nt);
        for &dh in readout {
            let x = h as i32 + dh;
            for c in 0..nc {
                out[k] = if (0..nh as i32).contains(&x) { c64(data[[x as usize, y, c, tt]]) } else { Complex64::new(0.0, 0.0) };
                k += 1;
            }
        }
    }
}

/// Ridge solution of `min ||A W - B||^2 + lambda ||W||^2` with
/// `lambda = rho * trace(A^H A) / n`.
pub fn solve_ridge(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>, rho: f64) -> Result<DMatrix<Complex64>> {
    if a.nrows() != b.nrows() {
        return Err(BaselineError::Config(format!("ridge rows differ: {} vs {}", a.nrows(), b.nrows())));
    }
    let ah = a.adjoint();
    let mut normal = &ah * a;
    let n = normal.ncols();
    let lambda = rho * normal.trace().re / n.max(1) as f64;
    for i in 0..n {
        normal[(i, i)] += Complex64::new(lambda, 0.0);
    }
    let rhs = &ah * b;
    let chol = normal
        .cholesky()
        .ok_or_else(|| BaselineError::Solve(format!("normal matrix of size {n} is not positive definite")))?;
    Ok(chol.solve(&rhs))
}

fn check_cartesian(mask: &SamplingMask, ksp: &KSpaceVolume) -> Result<()> {
    let (h, w, _, t) = ksp.dims();
    if mask.dims() != (h, w, t) {
        return Err(BaselineError::Config(format!("mask {:?} does not match k-space {:?}", mask.dims(), ksp.dims())));
    }
    if !mask.is_cartesian() {
        return Err(BaselineError::Config("k-t GRAPPA needs a Cartesian line mask".into()));
    }
    Ok(())
}

/// Fits one kernel per offset class present in `mask` from the ACS block
/// of `acs_ksp`. Only ACS entries of `acs_ksp` are read.
pub fn kt_grappa_calibrate(acs_ksp: &KSpaceVolume, spec: &KtGrappaSpec, mask: &SamplingMask) -> Result<GrappaKernels> {
    kt_grappa_calibrate_on(acs_ksp, spec, mask, mask.acs_range())
}

/// As [`kt_grappa_calibrate`], with the phase-encode lines `acs` (sampled in
/// every frame of `acs_ksp`) as the calibration region.
pub fn kt_grappa_calibrate_on(
    acs_ksp: &KSpaceVolume,
    spec: &KtGrappaSpec,
    mask: &SamplingMask,
    acs: Range<usize>,
) -> Result<GrappaKernels> {
    spec.validate()?;
    check_cartesian(mask, acs_ksp)?;
    let (nh, nw, nc, nt) = acs_ksp.dims();
    if acs.end > nw {
        return Err(BaselineError::Config(format!("calibration lines {acs:?} exceed W={nw}")));
    }
    let (ro_lo, ro_hi) = spec.readout_offsets.iter().fold((0, 0), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let interior_h: Vec<usize> = (0..nh).filter(|&x| x as i32 + ro_lo >= 0 && x as i32 + ro_hi < nh as i32).collect();

    let mut classes = BTreeMap::new();
    for t in 0..nt {
        for w in 0..nw {
            if !mask.line_sampled(w, t) {
                let (class, complete) = offset_class(mask, spec, w, t);
                classes.entry(class).or_insert(complete);
            }
        }
    }

    let data = acs_ksp.data();
    let mut weights = BTreeMap::new();
    let mut uncalibrated = Vec::new();
    for (class, complete) in classes {
        let n_src = class.0.len() * spec.readout_offsets.len() * nc;
        let (lo, hi) = class.extent();
        let in_acs = |y: i32| y >= 0 && acs.contains(&(y as usize));
        let target_lines: Vec<usize> = acs.clone().filter(|&w| in_acs(w as i32 + lo) && in_acs(w as i32 + hi)).collect();
        let rows = target_lines.len() * interior_h.len() * nt;
        if n_src == 0 || rows < n_src {
            if complete {
                let per_line = (interior_h.len() * nt).max(1);
                return Err(BaselineError::Underdetermined {
                    class: class.to_string(),
                    rows,
                    unknowns: n_src,
                    required_acs: (hi - lo) as usize + n_src.div_ceil(per_line),
                    acs_lines: acs.len(),
                });
            }
            uncalibrated.push(class);
            continue;
        }
        let mut a = DMatrix::<Complex64>::zeros(rows, n_src);
        let mut b = DMatrix::<Complex64>::zeros(rows, nc);
        let mut src = vec![Complex64::new(0.0, 0.0); n_src];
        let mut r = 0;
        for &w in &target_lines {
            for t in 0..nt {
                for &h in &interior_h {
                    gather_sources(data, &class, &spec.readout_offsets, h, w, t, &mut src);
                    for (k, v) in src.iter().enumerate() {
                        a[(r, k)] = *v;
                    }
                    for c in 0..nc {
                        b[(r, c)] = c64(data[[h, w, c, t]]);
                    }
                    r += 1;
                }
            }
        }
        weights.insert(class, solve_ridge(&a, &b, spec.rho)?);
    }
    Ok(GrappaKernels { spec: spec.clone(), coils: nc, weights, uncalibrated })
}

/// Fills unacquired lines of `ksp_under` with the calibrated kernels.
/// Acquired entries are copied untouched; lines whose class has no kernel
/// are copied from the nearest frame that acquired them.
pub fn kt_grappa_apply(
    ksp_under: &KSpaceVolume,
    mask: &SamplingMask,
    kernels: &GrappaKernels,
) -> Result<(KSpaceVolume, CoverageReport)> {
    check_cartesian(mask, ksp_under)?;
    let (nh, nw, nc, nt) = ksp_under.dims();
    if nc != kernels.coils {
        return Err(BaselineError::Config(format!("kernels fitted for {} coils, data has {nc}", kernels.coils)));
    }
    let data = KSpaceVolume::from_measured(ksp_under.data(), mask)?.into_data();
    let mut out = data.clone();
    let mut report = CoverageReport::default();
    let mut fallback_classes = BTreeSet::new();
    for t in 0..nt {
        for w in 0..nw {
            if mask.line_sampled(w, t) {
                continue;
            }
            let (class, _) = offset_class(mask, &kernels.spec, w, t);
            match kernels.weights.get(&class) {
                Some(wts) => {
                    let mut src = vec![Complex64::new(0.0, 0.0); wts.nrows()];
                    for h in 0..nh {
                        gather_sources(&data, &class, &kernels.spec.readout_offsets, h, w, t, &mut src);
                        for c in 0..nc {
                            let v: Complex64 = src.iter().enumerate().map(|(k, s)| s * wts[(k, c)]).sum();
                            out[[h, w, c, t]] = Complex32::new(v.re as f32, v.im as f32);
                        }
                    }
                    report.kernel_lines += 1;
                }
                None => {
                    fallback_classes.insert(class.to_string());
                    let nearest = (1..=nt / 2)
                        .flat_map(|d| [(t + nt - d) % nt, (t + d) % nt])
                        .find(|&tt| mask.line_sampled(w, tt));
                    match nearest {
                        Some(tt) => {
                            for h in 0..nh {
                                for c in 0..nc {
                                    out[[h, w, c, t]] = data[[h, w, c, tt]];
                                }
                            }
                            report.fallback_lines += 1;
                        }
                        None => report.unfilled_lines += 1,
                    }
                }
            }
        }
    }
    report.fallback_classes = fallback_classes.into_iter().collect();
    let filled = KSpaceVolume::new(out)?.with_norm_scale(ksp_under.norm_scale)?.with_meta(ksp_under.meta.clone());
    Ok((filled, report))
}

#[derive(Debug, Clone)]
pub struct KtGrappaOutput {
    pub image: CineImageSeries,
    pub kspace: KSpaceVolume,
    pub coverage: CoverageReport,
}

/// Calibrate on the measurement's own ACS block, fill, then inverse FFT and
/// coil-combine.
pub fn kt_grappa_reconstruct(
    meas: &KSpaceVolume,
    mask: &SamplingMask,
    csm: &CoilSensitivityMaps,
    spec: &KtGrappaSpec,
) -> Result<KtGrappaOutput> {
    let kernels = kt_grappa_calibrate(meas, spec, mask)?;
    let (kspace, coverage) = kt_grappa_apply(meas, mask, &kernels)?;
    let image = kpinr_nn::reconstruct_image(&kspace, csm)?;
    Ok(KtGrappaOutput { image, kspace, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use kpinr_core::{make_uniform_mask, MaskPattern, MaskSpec};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<Complex64> {
        DMatrix::from_fn(r, c, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn uniform(h: usize, w: usize, t: usize, acs: usize) -> SamplingMask {
        let spec = MaskSpec { r: 4.0, acs_lines: acs, seed: 0, ..MaskSpec::default() };
        make_uniform_mask(&spec, h, w, t).unwrap()
    }

    fn random_volume(h: usize, w: usize, c: usize, t: usize, seed: u64) -> KSpaceVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KSpaceVolume::new(Array4::from_shape_fn((h, w, c, t), |_| {
            Complex32::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        }))
        .unwrap()
    }

    #[test]
    fn ridge_recovers_exact_linear_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(60, 8, &mut rng);
        let b = DMatrix::from_fn(60, 1, |r, _| a[(r, 3)]);
        let w = solve_ridge(&a, &b, 1e-8).unwrap();
        for i in 0..8 {
            let want = if i == 3 { 1.0 } else { 0.0 };
            assert!((w[(i, 0)] - Complex64::new(want, 0.0)).norm() < 1e-6, "{i}: {}", w[(i, 0)]);
        }
    }

    #[test]
    fn heavy_ridge_drives_weights_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(40, 6, &mut rng);
        let b = random_matrix(40, 2, &mut rng);
        let small = solve_ridge(&a, &b, 1e3).unwrap().norm();
        let tiny = solve_ridge(&a, &b, 1e9).unwrap().norm();
        assert!(tiny < 1e-6 * small.max(1.0) + 1e-8, "{tiny} vs {small}");
        assert!(small > tiny);
    }

    #[test]
    fn duplicated_rows_give_the_same_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(30, 5, &mut rng);
        let b = random_matrix(30, 2, &mut rng);
        let a2 = DMatrix::from_fn(60, 5, |r, c| a[(r % 30, c)]);
        let b2 = DMatrix::from_fn(60, 2, |r, c| b[(r % 30, c)]);
        for rho in [0.0, 1e-4, 1e-1] {
            let w1 = solve_ridge(&a, &b, rho).unwrap();
            let w2 = solve_ridge(&a2, &b2, rho).unwrap();
            assert!((w1 - w2).norm() < 1e-10);
        }
    }

    #[test]
    fn offset_class_uses_nearest_lines_per_frame() {
        let mask = uniform(6, 16, 4, 0);
        // frame t samples lines congruent to t mod 4
        assert!(mask.line_sampled(0, 0) && mask.line_sampled(1, 1) && !mask.line_sampled(1, 0));
        let (class, complete) = offset_class(&mask, &KtGrappaSpec::default(), 6, 0);
        // frame t samples 4, 8; frame t+1 samples 5, 9; frame t-1 = 3 samples 3, 7
        assert_eq!(class.0, vec![(0, -2), (0, 2), (1, -1), (1, 3), (3, -3), (3, 1)]);
        assert!(complete);
        let (edge, complete) = offset_class(&mask, &KtGrappaSpec::default(), 15, 0);
        assert!(!complete);
        assert!(edge.0.iter().all(|&(_, dw)| dw <= 0));
    }

    #[test]
    fn fully_sampled_input_is_returned_unchanged() {
        let ksp = random_volume(6, 8, 2, 3, 4);
        let mask = SamplingMask::from_raw(Array3::from_elem((6, 8, 3), 1), 8, MaskPattern::UniformCartesian, 1.0).unwrap();
        let kernels = kt_grappa_calibrate(&ksp, &KtGrappaSpec::default(), &mask).unwrap();
        assert!(kernels.weights.is_empty());
        let (out, report) = kt_grappa_apply(&ksp, &mask, &kernels).unwrap();
        assert_eq!(out.data(), ksp.data());
        assert_eq!(report.kernel_lines + report.fallback_lines + report.unfilled_lines, 0);
    }

    #[test]
    fn kernel_is_indicator_for_a_static_series() {
        // every frame equal: line 3 of frame 0 is acquired verbatim in
        // frame 3, no other source carries that information
        let (h, w, c, t) = (8, 24, 2, 4);
        let base = random_volume(h, w, c, 1, 5);
        let ksp = KSpaceVolume::new(Array4::from_shape_fn((h, w, c, t), |(a, b, cc, _)| base.data()[[a, b, cc, 0]])).unwrap();
        let mask = uniform(h, w, t, 16);
        let spec = KtGrappaSpec { rho: 1e-9, ..KtGrappaSpec::default() };
        let kernels = kt_grappa_calibrate(&ksp, &spec, &mask).unwrap();
        let (class, _) = offset_class(&mask, &spec, 3, 0);
        assert!(class.0.contains(&(3, 0)), "{class}");
        let wts = &kernels.weights[&class];
        let line = class.0.iter().position(|&l| l == (3, 0)).unwrap();
        let nro = spec.readout_offsets.len();
        for k in 0..wts.nrows() {
            for coil in 0..c {
                let want = if k == (line * nro + 1) * c + coil { 1.0 } else { 0.0 };
                assert!((wts[(k, coil)].re - want).abs() < 1e-4 && wts[(k, coil)].im.abs() < 1e-4, "{k},{coil}");
            }
        }
    }

    #[test]
    fn acquired_entries_are_bit_identical() {
        let ksp = random_volume(6, 16, 2, 4, 6);
        let mask = uniform(6, 16, 4, 8);
        let kernels = kt_grappa_calibrate(&ksp, &KtGrappaSpec::default(), &mask).unwrap();
        let under = kpinr_core::zero_fill(&ksp, &mask).unwrap();
        let (out, report) = kt_grappa_apply(&under, &mask, &kernels).unwrap();
        for ((a, b, cc, d), v) in out.data().indexed_iter() {
            if mask.is_sampled(a, b, d) {
                assert_eq!(v.re.to_bits(), ksp.data()[[a, b, cc, d]].re.to_bits());
                assert_eq!(v.im.to_bits(), ksp.data()[[a, b, cc, d]].im.to_bits());
            }
        }
        let missing = (0..4).map(|t| (0..16).filter(|&w| !mask.line_sampled(w, t)).count()).sum::<usize>();
        assert_eq!(report.kernel_lines + report.fallback_lines + report.unfilled_lines, missing);
    }

    #[test]
    fn small_acs_is_rejected_with_a_diagnostic() {
        let ksp = random_volume(6, 32, 4, 2, 7);
        let spec = MaskSpec { r: 4.0, acs_lines: 2, seed: 0, ..MaskSpec::default() };
        let mask = make_uniform_mask(&spec, 6, 32, 2).unwrap();
        match kt_grappa_calibrate(&ksp, &KtGrappaSpec::default(), &mask) {
            Err(BaselineError::Underdetermined { required_acs, acs_lines, .. }) => {
                assert_eq!(acs_lines, 2);
                assert!(required_acs > 2);
            }
            other => panic!("expected underdetermined, got {other:?}"),
        }
    }
}
