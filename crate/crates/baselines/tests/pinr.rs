use kpinr_baselines::{pinr_config, pinr_reconstruct};
use kpinr_core::{generate_phantom, make_uniform_mask, normalize_kspace, zero_fill, CineImageSeries, MaskSpec, PhantomSpec};
use kpinr_nn::{reconstruct_image, NoObserver, TrainConfig, Trainer};

fn psnr(x: &CineImageSeries, truth: &CineImageSeries) -> f64 {
    let (a, b) = (x.magnitude(), truth.magnitude());
    let peak = b.iter().fold(0.0f32, |m, v| m.max(*v)) as f64;
    let mse = a.iter().zip(b.iter()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

#[test]
fn desk_phantom_beats_zero_filling() {
    let ph = generate_phantom(&PhantomSpec { h: 32, w: 32, coils: 4, frames: 8, seed: 0, ..PhantomSpec::default() }).unwrap();
    let mask = make_uniform_mask(&MaskSpec { r: 4.0, acs_lines: 8, seed: 0, ..MaskSpec::default() }, 32, 32, 8).unwrap();
    let meas = normalize_kspace(&zero_fill(&ph.ksp_full, &mask).unwrap()).unwrap();
    let out = pinr_reconstruct(&TrainConfig::desk(), &meas, &mask, &ph.csm, &mut NoObserver).unwrap();
    let zf = psnr(&reconstruct_image(&meas, &ph.csm).unwrap(), &ph.image);
    let p = psnr(&out.image, &ph.image);
    println!("P-INR {p:.2} dB, zero-filled {zf:.2} dB");
    assert!(p > zf + 2.0, "{p} vs {zf}");
}

#[test]
fn deterministic_under_seed_and_positional_only() {
    let ph = generate_phantom(&PhantomSpec { h: 16, w: 16, coils: 2, frames: 4, seed: 1, ..PhantomSpec::default() }).unwrap();
    let mask = make_uniform_mask(&MaskSpec { r: 4.0, acs_lines: 4, seed: 1, ..MaskSpec::default() }, 16, 16, 4).unwrap();
    let meas = normalize_kspace(&zero_fill(&ph.ksp_full, &mask).unwrap()).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.schedule.total_epochs = 30;
    cfg.schedule.refine_every = 10;
    cfg.schedule.decay_every = 10;
    let a = pinr_reconstruct(&cfg, &meas, &mask, &ph.csm, &mut NoObserver).unwrap();
    let b = pinr_reconstruct(&cfg, &meas, &mask, &ph.csm, &mut NoObserver).unwrap();
    assert_eq!(a.image, b.image);
    assert!(a.history.iter().all(|r| r.components[0] == 0.0 && r.components[2] == 0.0 && r.components[3] == 0.0));

    let trainer = Trainer::new(pinr_config(&cfg), &meas, &mask).unwrap();
    assert!(trainer.model.unet.is_none() && trainer.model.kinr.is_empty() && trainer.model.fusion.is_empty());
    assert!(trainer.model.exchange_k_to_p.is_none() && trainer.model.exchange_p_to_k.is_none());
}
