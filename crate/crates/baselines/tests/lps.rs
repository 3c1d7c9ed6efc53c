use kpinr_baselines::{lps_reconstruct, LpsSpec};
use kpinr_core::{generate_phantom, make_uniform_mask, normalize_kspace, zero_fill, MaskSpec, PhantomSpec};

fn energy(x: &kpinr_core::CineImageSeries) -> f64 {
    x.data.iter().map(|v| v.norm_sqr() as f64).sum()
}

#[test]
fn static_phantom_is_captured_by_the_low_rank_part() {
    let spec = PhantomSpec { h: 32, w: 32, coils: 4, frames: 8, motion_amplitude: 0.0, contraction: 0.0, seed: 2, ..PhantomSpec::default() };
    let ph = generate_phantom(&spec).unwrap();
    let first = ph.image.data.index_axis(ndarray::Axis(2), 0).to_owned();
    for t in 1..8 {
        assert_eq!(ph.image.data.index_axis(ndarray::Axis(2), t), first);
    }
    let mask = make_uniform_mask(&MaskSpec { r: 4.0, acs_lines: 8, seed: 2, ..MaskSpec::default() }, 32, 32, 8).unwrap();
    let meas = normalize_kspace(&zero_fill(&ph.ksp_full, &mask).unwrap()).unwrap();
    let out = lps_reconstruct(&meas, &mask, &ph.csm, &LpsSpec::default()).unwrap();
    let (el, es) = (energy(&out.low_rank), energy(&out.sparse));
    let ratio = (es / el).sqrt();
    println!("iterations {} converged {} |S|/|L| {ratio:.4e} L share {:.6}", out.iterations, out.converged, el / (el + es));
    assert!(ratio <= 0.05, "{ratio}");
    assert!(el / (el + es) >= 0.99);

    let err: f64 = out.image.data.iter().zip(ph.image.data.iter()).map(|(a, b)| (a - b).norm_sqr() as f64).sum();
    let zf = kpinr_nn::reconstruct_image(&meas, &ph.csm).unwrap();
    let zf_err: f64 = zf.data.iter().zip(ph.image.data.iter()).map(|(a, b)| (a - b).norm_sqr() as f64).sum();
    assert!(err < zf_err, "{err} vs {zf_err}");
}

#[test]
fn cine_phantom_objective_settles() {
    let ph = generate_phantom(&PhantomSpec { h: 32, w: 32, coils: 4, frames: 8, seed: 3, ..PhantomSpec::default() }).unwrap();
    let mask = make_uniform_mask(&MaskSpec { r: 4.0, acs_lines: 8, seed: 3, ..MaskSpec::default() }, 32, 32, 8).unwrap();
    let meas = normalize_kspace(&zero_fill(&ph.ksp_full, &mask).unwrap()).unwrap();
    let out = lps_reconstruct(&meas, &mask, &ph.csm, &LpsSpec::default()).unwrap();
    assert_eq!(out.objective.len(), out.iterations);
    let obj = &out.objective;
    assert!(obj.last().unwrap() < &obj[0], "{obj:?}");
    let err: f64 = out.image.data.iter().zip(ph.image.data.iter()).map(|(a, b)| (a - b).norm_sqr() as f64).sum();
    let zf = kpinr_nn::reconstruct_image(&meas, &ph.csm).unwrap();
    let zf_err: f64 = zf.data.iter().zip(ph.image.data.iter()).map(|(a, b)| (a - b).norm_sqr() as f64).sum();
    println!("L+S error {err:.4e} zero-filled {zf_err:.4e} after {} iterations", out.iterations);
    assert!(err < zf_err);
}
