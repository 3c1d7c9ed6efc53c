//! Method dispatch shared by the `reconstruct` command and the test suites.

use std::collections::BTreeMap;
use std::time::Instant;

use kpinr_baselines::{kt_grappa_reconstruct, lps_reconstruct, pinr_config};
use kpinr_core::{
    effective_acceleration, estimate_csm_from_acs, normalize_kspace, zero_fill, CineImageSeries, CoilSensitivityMaps,
    KSpaceVolume, SamplingMask,
};
use kpinr_nn::{reconstruct_image, LossRecord, NoObserver, TrainObserver, Trainer};

use crate::archive::read_state;
use crate::config::{CsmChoice, Method, ReconConfig};
use crate::container::{csm_data, image_data, kspace_data, mask_data};
use crate::error::Result;
use crate::rundir::{dump_failure, RunDir, RunInfo, RunObserver, CHECKPOINT, CONFIG, CONFIG_SOURCE, CSM, IMAGE, KSPACE, MASK, REFERENCE};

pub struct Inputs {
    /// Fully sampled (meta `acquisition = full`) or already undersampled.
    pub kspace: KSpaceVolume,
    pub mask: SamplingMask,
    pub csm: Option<CoilSensitivityMaps>,
}

impl Inputs {
    pub fn fully_sampled(&self) -> bool {
        self.kspace.meta.get("acquisition").is_some_and(|v| v == "full")
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub image: CineImageSeries,
    /// Final normalized k-space, when the method produces one.
    pub kspace: Option<KSpaceVolume>,
    /// Coil-combined fully sampled data with the same maps.
    pub reference: Option<CineImageSeries>,
    pub csm: CoilSensitivityMaps,
    pub history: Vec<LossRecord>,
    pub generations: usize,
    pub notes: BTreeMap<String, String>,
}

fn choose_csm(cfg: &ReconConfig, inputs: &Inputs, meas: &KSpaceVolume) -> Result<CoilSensitivityMaps> {
    Ok(match (&inputs.csm, cfg.data.csm) {
        (Some(c), CsmChoice::Auto) => c.clone(),
        _ => estimate_csm_from_acs(meas, &inputs.mask)?,
    })
}

/// Runs the configured method. With a run directory, training streams its
/// losses and refinements there, resumes from the stored checkpoint when
/// `resume` is set, and dumps its state if it fails.
pub fn reconstruct(cfg: &ReconConfig, inputs: &Inputs, run: Option<&RunDir>, resume: bool) -> Result<Outcome> {
    let meas = normalize_kspace(&zero_fill(&inputs.kspace, &inputs.mask)?)?;
    let csm = choose_csm(cfg, inputs, &meas)?;
    let reference = if inputs.fully_sampled() { Some(reconstruct_image(&inputs.kspace, &csm)?) } else { None };
    let mut notes = BTreeMap::new();
    let (image, kspace, history, generations) = match cfg.method {
        Method::Zerofill => (reconstruct_image(&meas, &csm)?, Some(meas.clone()), Vec::new(), 0),
        Method::Kpinr | Method::Pinr => {
            let tc = if cfg.method == Method::Pinr { pinr_config(&cfg.train) } else { cfg.train.clone() };
            let mut trainer = Trainer::new(tc, &meas, &inputs.mask)?;
            let mut resumed_at = None;
            if let (true, Some(dir)) = (resume, run) {
                let p = dir.path(CHECKPOINT);
                if p.exists() {
                    let state = read_state(&p)?;
                    trainer.restore(&state)?;
                    resumed_at = Some(state.epoch);
                    notes.insert("resumed_from_epoch".into(), state.epoch.to_string());
                }
            }
            let result = match run {
                Some(dir) => {
                    let mut obs = RunObserver::new(dir, cfg.output.save_generations, cfg.output.checkpoint, resumed_at)?;
                    let r = trainer.run(&csm, &mut obs as &mut dyn TrainObserver);
                    obs.flush()?;
                    r
                }
                None => trainer.run(&csm, &mut NoObserver),
            };
            match result {
                Ok(out) => (out.image, Some(out.kspace), out.history, trainer.generation()),
                Err(e) => {
                    if let Some(dir) = run {
                        dump_failure(dir, &trainer.checkpoint())?;
                    }
                    return Err(e.into());
                }
            }
        }
        Method::Ktgrappa => {
            let out = kt_grappa_reconstruct(&meas, &inputs.mask, &csm, &cfg.grappa)?;
            let c = &out.coverage;
            notes.insert("kernel_lines".into(), c.kernel_lines.to_string());
            notes.insert("fallback_lines".into(), c.fallback_lines.to_string());
            notes.insert("unfilled_lines".into(), c.unfilled_lines.to_string());
            (out.image, Some(out.kspace), Vec::new(), 0)
        }
        Method::Lps => {
            let out = lps_reconstruct(&meas, &inputs.mask, &csm, &cfg.lps)?;
            notes.insert("iterations".into(), out.iterations.to_string());
            notes.insert("converged".into(), out.converged.to_string());
            notes.insert("lambda_l".into(), out.thresholds.0.to_string());
            notes.insert("lambda_s".into(), out.thresholds.1.to_string());
            (out.image, None, Vec::new(), 0)
        }
    };
    Ok(Outcome { image, kspace, reference, csm, history, generations, notes })
}

/// Full `reconstruct` command body: snapshot, run, persist outputs.
pub fn run_into(
    cfg: &ReconConfig,
    source: Option<&str>,
    inputs: &Inputs,
    dir: &RunDir,
    resume: bool,
) -> Result<(Outcome, RunInfo)> {
    let started = Instant::now();
    dir.write_text(CONFIG, &cfg.to_toml())?;
    if let Some(s) = source {
        dir.write_text(CONFIG_SOURCE, s)?;
    }
    let mut info = RunInfo {
        method: cfg.method.as_str().into(),
        pattern: inputs.mask.pattern.as_str().into(),
        r: inputs.mask.nominal_r,
        effective_r: effective_acceleration(&inputs.mask)?,
        subject: inputs.kspace.meta.get("subject").cloned().unwrap_or_else(|| cfg.data.subject.clone()),
        view: inputs.kspace.meta.get("view").cloned().unwrap_or_else(|| cfg.data.view.clone()),
        seed: cfg.seed,
        config_hash: dir.config_hash.clone(),
        status: "running".into(),
        elapsed_s: 0.0,
        epochs: 0,
        generations: 0,
        has_reference: inputs.fully_sampled(),
        notes: BTreeMap::new(),
    };
    dir.write_info(&info)?;
    let (d, i) = mask_data(&inputs.mask);
    dir.write_tensor(MASK, &d, i)?;
    let outcome = match reconstruct(cfg, inputs, Some(dir), resume) {
        Ok(o) => o,
        Err(e) => {
            info.status = "failed".into();
            info.elapsed_s = started.elapsed().as_secs_f64();
            info.notes.insert("error".into(), e.to_string());
            dir.write_info(&info)?;
            return Err(e);
        }
    };
    let (d, i) = image_data(&outcome.image);
    dir.write_tensor(IMAGE, &d, i.with_meta("method", cfg.method.as_str()))?;
    let (d, i) = csm_data(&outcome.csm);
    dir.write_tensor(CSM, &d, i)?;
    if let Some(k) = &outcome.kspace {
        let (d, i) = kspace_data(k);
        dir.write_tensor(KSPACE, &d, i)?;
    }
    if let Some(r) = &outcome.reference {
        let (d, i) = image_data(r);
        dir.write_tensor(REFERENCE, &d, i.with_meta("role", "reference"))?;
    }
    info.status = "complete".into();
    info.elapsed_s = started.elapsed().as_secs_f64();
    info.epochs = outcome.history.last().map_or(0, |r| r.epoch + 1);
    info.generations = outcome.generations;
    info.notes = outcome.notes.clone();
    dir.write_info(&info)?;
    Ok((outcome, info))
}
