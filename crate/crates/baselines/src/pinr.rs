//! Positional-only INR: the dual-branch trainer with the k-space branch,
//! U-Net, exchange and fusion switched off.

use kpinr_core::{CoilSensitivityMaps, KSpaceVolume, SamplingMask};
use kpinr_nn::{BranchMode, ReconOutput, TrainConfig, TrainObserver, Trainer};

use crate::error::Result;

/// The ablated configuration. Only the branch set and the two
/// autoencoder weights differ from `kp`.
pub fn pinr_config(kp: &TrainConfig) -> TrainConfig {
    let mut cfg = kp.clone();
    cfg.model.mode = BranchMode::PositionalOnly;
    cfg.loss.ae_acq = 0.0;
    cfg.loss.ae_zf = 0.0;
    cfg
}

/// Trains the positional branch alone on the normalized measurement `meas`.
pub fn pinr_reconstruct(
    kp: &TrainConfig,
    meas: &KSpaceVolume,
    mask: &SamplingMask,
    csm: &CoilSensitivityMaps,
    observer: &mut dyn TrainObserver,
) -> Result<ReconOutput> {
    let mut trainer = Trainer::new(pinr_config(kp), meas, mask)?;
    Ok(trainer.run(csm, observer)?)
}
