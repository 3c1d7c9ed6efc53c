//! Losses, learning-rate schedule and the alternating optimize/refine loop.
//!
//! An "epoch" is one optimizer step on a batch of acquired coordinates. Every
//! `refine_every` epochs the whole grid is predicted, averaged over the
//! branches, made data consistent and fed back as the next U-Net input.

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kpinr_core::{
    coil_combine, hard_dc, ifft2_centered, mask_to_coordinates, CineImageSeries, CoilSensitivityMaps,
    CoordinateSet, KSpaceVolume, SamplingMask,
};

use crate::denormal::FlushToZero;
use crate::error::{NnError, Result};
use crate::model::{BranchMode, KpinrModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::{Graph, NodeId, ParamStore};
use crate::unet::volume_to_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub kv: f64,
    pub pv: f64,
    pub ae_acq: f64,
    pub ae_zf: f64,
    pub hdr_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kv: 1.0, pv: 1.0, ae_acq: 0.05, ae_zf: 0.025, hdr_eps: 1e-2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.kv, self.pv, self.ae_acq, self.ae_zf].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(NnError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.hdr_eps > 0.0) {
            return Err(NnError::Config(format!("HDR epsilon must be positive, got {}", self.hdr_eps)));
        }
        Ok(())
    }

    /// `kv*c1 + pv*c2 + ae_acq*c3 + ae_zf*c4`.
    pub fn combine(&self, c: [f64; 4]) -> f64 {
        self.kv * c[0] + self.pv * c[1] + self.ae_acq * c[2] + self.ae_zf * c[3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub refine_every: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_coords: usize,
    /// Queries per chunk during full-grid inference.
    pub inference_chunk: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 6000,
            refine_every: 500,
            lr: 5e-5,
            lr_decay: 0.95,
            decay_every: 500,
            lr_min: 2e-6,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_coords: 65536,
            inference_chunk: 16384,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.refine_every == 0 || self.decay_every == 0 || self.decay_every % self.refine_every != 0 {
            return bad(format!(
                "refinement interval {} must divide the decay interval {}",
                self.refine_every, self.decay_every
            ));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning rate settings out of range".into());
        }
        if self.batch_coords == 0 || self.inference_chunk == 0 {
            return bad("batch and chunk sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam moments out of range".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Step-decayed learning rate for a 0-based epoch index.
pub fn lr_at(epoch: usize, sched: &TrainSchedule) -> f64 {
    let k = (epoch / sched.decay_every) as i32;
    (sched.lr * sched.lr_decay.powi(k)).max(sched.lr_min)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub loss: LossWeights,
}

impl TrainConfig {
    /// Reduced profile for 32x32-class phantoms on a CPU: narrow networks,
    /// 1500 steps of 4096 queries, a higher learning rate, and a WIRE
    /// frequency and width matched to the encoding's input scale.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.unet.channels = 8;
        cfg.model.hidden = 64;
        cfg.model.fusion_width = 64;
        cfg.model.kinr_initial_width = 16;
        cfg.model.wire_omega = 0.5;
        cfg.model.wire_sigma = 0.25;
        cfg.schedule.total_epochs = 1500;
        cfg.schedule.lr = 1e-3;
        cfg.schedule.lr_min = 4e-5;
        cfg.schedule.batch_coords = 4096;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.loss.validate()
    }
}

fn complex_rows(a: &Array2<f32>) -> Result<usize> {
    if a.ncols() % 2 != 0 {
        return Err(NnError::Shape(format!("[N, 2C] expected, got {:?}", a.dim())));
    }
    Ok(a.ncols() / 2)
}

/// Per-entry weights `1 / ((|pred| + eps)^2 N C)` of the HDR loss, shared by
/// the real and imaginary entries of each complex value. Computed from the
/// prediction values only, so no gradient flows through them.
pub fn hdr_weights(pred: &Array2<f32>, eps: f64) -> Result<Array2<f32>> {
    if !(eps > 0.0) {
        return Err(NnError::Config(format!("HDR epsilon must be positive, got {eps}")));
    }
    let c = complex_rows(pred)?;
    let n = pred.nrows();
    let norm = (n * c) as f64;
    let mut w = Array2::<f32>::zeros(pred.raw_dim());
    for i in 0..n {
        for k in 0..c {
            let mag = (pred[[i, k]] as f64).hypot(pred[[i, k + c]] as f64);
            let v = (1.0 / ((mag + eps).powi(2) * norm)) as f32;
            w[[i, k]] = v;
            w[[i, k + c]] = v;
        }
    }
    Ok(w)
}

/// Mean over points and coils of `|(pred - target) / (|pred| + eps)|^2`.
pub fn hdr_loss(pred: &Array2<f32>, target: &Array2<f32>, eps: f64) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(NnError::Shape(format!("hdr_loss: {:?} vs {:?}", pred.dim(), target.dim())));
    }
    let w = hdr_weights(pred, eps)?;
    Ok(pred
        .iter()
        .zip(target.iter())
        .zip(w.iter())
        .map(|((p, t), w)| *w as f64 * (*p as f64 - *t as f64).powi(2))
        .sum())
}

/// Mean of `|out - target|^2` over region entries and coils.
pub fn masked_mse(out: &Array4<Complex32>, target: &Array4<Complex32>, region: &Array3<u8>) -> Result<f64> {
    let (h, w, c, t) = out.dim();
    if target.dim() != out.dim() || region.dim() != (h, w, t) {
        return Err(NnError::Shape(format!(
            "masked_mse: {:?}, {:?}, region {:?}",
            out.dim(),
            target.dim(),
            region.dim()
        )));
    }
    let count = region.iter().filter(|v| **v != 0).count();
    if count == 0 {
        return Err(NnError::Config("masked_mse over an empty region".into()));
    }
    let mut acc = 0.0f64;
    for ((ih, iw, ic, it), v) in out.indexed_iter() {
        if region[[ih, iw, it]] != 0 {
            acc += (v - target[[ih, iw, ic, it]]).norm_sqr() as f64;
        }
    }
    Ok(acc / (count * c) as f64)
}

/// Weight tensor `[T, 2C, H, W]` equal to `1 / (count C)` inside `region`.
fn region_weights(region: &Array3<u8>, coils: usize) -> Option<ArrayD<f32>> {
    let (h, w, t) = region.dim();
    let count = region.iter().filter(|v| **v != 0).count();
    if count == 0 {
        return None;
    }
    let v = 1.0 / (count * coils) as f32;
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[t, 2 * coils, h, w]));
    for ((ih, iw, it), r) in region.indexed_iter() {
        if *r != 0 {
            for ch in 0..2 * coils {
                out[[it, ch, ih, iw]] = v;
            }
        }
    }
    Some(out)
}

/// One optimizer step's loss record. `epoch` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    /// `[feature branch, positional branch, acquired auto-encoding, zero-filled auto-encoding]`
    pub components: [f64; 4],
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub generation: usize,
    pub adam_step: u64,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    /// Current U-Net input `[H, W, C, T]` as interleaved `(re, im)` pairs.
    pub ksp_in: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Callbacks invoked by [`Trainer::run`].
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// After each refinement; `trainer.checkpoint()` gives a resumable state.
    fn on_refine(&mut self, _trainer: &Trainer, _refined: &KSpaceVolume) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores every event.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub image: CineImageSeries,
    /// Final data-consistent k-space in the normalized scale.
    pub kspace: KSpaceVolume,
    pub history: Vec<LossRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: KpinrModel,
    pub store: ParamStore<f32>,
    optimizer: AdamW<f32>,
    /// Zero-filled measurement in the normalized scale.
    meas: KSpaceVolume,
    mask: SamplingMask,
    sampled: CoordinateSet,
    /// Encodings of every grid point, row `(t H + x) W + y`.
    encodings: Array2<f32>,
    acq_weights: Option<ArrayD<f32>>,
    zf_weights: Option<ArrayD<f32>>,
    ksp_in: KSpaceVolume,
    epoch: usize,
    generation: usize,
    perm_cache: Option<(usize, Vec<usize>)>,
    history: Vec<LossRecord>,
}

impl Trainer {
    /// `meas` is the normalized measurement; only its `mask = 1` entries are
    /// ever read.
    pub fn new(config: TrainConfig, meas: &KSpaceVolume, mask: &SamplingMask) -> Result<Self> {
        let mut trainer = Self::from_measured(config, meas.data(), meas.norm_scale, mask)?;
        trainer.meas.meta = meas.meta.clone();
        trainer.ksp_in.meta = meas.meta.clone();
        Ok(trainer)
    }

    /// As [`Trainer::new`] from raw normalized data. Entries where
    /// `mask = 0` may hold anything, including NaN; they are never read.
    pub fn from_measured(
        config: TrainConfig,
        data: &Array4<Complex32>,
        norm_scale: f32,
        mask: &SamplingMask,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w, c, t) = data.dim();
        if mask.dims() != (h, w, t) {
            return Err(NnError::Shape(format!("mask {:?} does not match k-space {:?}", mask.dims(), data.dim())));
        }
        if mask.count_ones() == 0 {
            return Err(NnError::Config("no acquired samples to train on".into()));
        }
        let meas = KSpaceVolume::from_measured(data, mask)?.with_norm_scale(norm_scale)?;
        let (model, store) = KpinrModel::new::<f32>(&config.model, c, config.schedule.seed)?;
        let optimizer = AdamW::new(&store, config.schedule.optimizer());
        let encodings = model.encoding.encode(&CoordinateSet::full_grid(h, w, t))?;
        let acq = mask.mask().clone();
        let zf = acq.mapv(|v| 1 - v);
        Ok(Self {
            optimizer,
            sampled: mask_to_coordinates(mask),
            encodings,
            acq_weights: region_weights(&acq, c),
            zf_weights: region_weights(&zf, c),
            ksp_in: meas.clone(),
            meas,
            mask: mask.clone(),
            model,
            store,
            config,
            epoch: 0,
            generation: 0,
            perm_cache: None,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn ksp_in(&self) -> &KSpaceVolume {
        &self.ksp_in
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn sampled(&self) -> &CoordinateSet {
        &self.sampled
    }

    /// Indices into the sampled set used by 0-based `epoch`. Each pass over
    /// the sampled set is a fresh permutation derived from `(seed, pass)`.
    pub fn batch_indices(&mut self, epoch: usize) -> Vec<usize> {
        let n = self.sampled.len();
        let b = self.config.schedule.batch_coords.min(n);
        let per_pass = n.div_ceil(b);
        let (pass, idx) = (epoch / per_pass, epoch % per_pass);
        if self.perm_cache.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.schedule.seed);
            rng.set_stream(pass as u64 + 1);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            self.perm_cache = Some((pass, perm));
        }
        let perm = &self.perm_cache.as_ref().unwrap().1;
        perm[idx * b..((idx + 1) * b).min(n)].to_vec()
    }

    fn grid_row(&self, p: &[usize; 3]) -> usize {
        let (h, w, _, _) = self.meas.dims();
        (p[0] * h + p[1]) * w + p[2]
    }

    /// Measured `[N, 2C]` values at acquired coordinates.
    fn targets(&self, coords: &[[usize; 3]]) -> Array2<f32> {
        let c = self.meas.dims().2;
        let data = self.meas.data();
        let mut out = Array2::<f32>::zeros((coords.len(), 2 * c));
        for (n, p) in coords.iter().enumerate() {
            debug_assert!(self.mask.is_sampled(p[1], p[2], p[0]));
            for k in 0..c {
                let v = data[[p[1], p[2], k, p[0]]];
                out[[n, k]] = v.re;
                out[[n, k + c]] = v.im;
            }
        }
        out
    }

    /// Builds the four-term objective on a batch; returns the loss node and
    /// the component nodes (absent terms are `None`).
    fn build_loss(&self, g: &mut Graph<f32>, coords: &[[usize; 3]]) -> Result<(NodeId, [Option<NodeId>; 4])> {
        let rows: Vec<usize> = coords.iter().map(|p| self.grid_row(p)).collect();
        let pe = g.input(self.encodings.select(Axis(0), &rows).into_dyn());
        let target = self.targets(coords).into_dyn();
        let lw = self.config.loss;

        let (kf, auto, ksp_in_t) = match &self.model.unet {
            Some(unet) => {
                let ksp_in_t = volume_to_tensor::<f32>(self.ksp_in.data());
                let x = g.input(ksp_in_t.clone());
                let out = unet.forward(g, &self.store, x)?;
                (Some(g.gather(out.features, coords)?), Some(out.auto), Some(ksp_in_t))
            }
            None => (None, None, None),
        };
        let nodes = self.model.branches(g, &self.store, pe, kf)?;

        let mut comps: [Option<NodeId>; 4] = [None; 4];
        let hdr = |g: &mut Graph<f32>, pred: NodeId| -> Result<NodeId> {
            let p = g.value(pred).clone().into_dimensionality::<ndarray::Ix2>().expect("2-D prediction");
            let w = hdr_weights(&p, lw.hdr_eps)?.into_dyn();
            g.weighted_sse(pred, target.clone(), w)
        };
        if let Some(y_kv) = nodes.y_kv {
            comps[0] = Some(hdr(g, y_kv)?);
        }
        comps[1] = Some(hdr(g, nodes.y_pv)?);
        if let (Some(auto), Some(t)) = (auto, ksp_in_t) {
            if let Some(w) = &self.acq_weights {
                comps[2] = Some(g.weighted_sse(auto, t.clone(), w.clone())?);
            }
            if let Some(w) = &self.zf_weights {
                comps[3] = Some(g.weighted_sse(auto, t, w.clone())?);
            }
        }
        let weights = [lw.kv, lw.pv, lw.ae_acq, lw.ae_zf];
        let terms: Vec<(NodeId, f32)> =
            comps.iter().zip(weights).filter_map(|(c, w)| c.map(|c| (c, w as f32))).collect();
        let total = g.weighted_sum(&terms)?;
        Ok((total, comps))
    }

    /// Loss of the current parameters on a batch without updating anything.
    pub fn evaluate_loss(&self, coords: &[[usize; 3]]) -> Result<LossRecord> {
        let mut g = Graph::new();
        let (total, comps) = self.build_loss(&mut g, coords)?;
        Ok(LossRecord {
            epoch: self.epoch,
            lr: lr_at(self.epoch, &self.config.schedule),
            total: g.scalar(total) as f64,
            components: comps.map(|c| c.map_or(0.0, |c| g.scalar(c) as f64)),
        })
    }

    /// One optimizer step on the batch of the current epoch.
    pub fn optimize_epoch(&mut self) -> Result<LossRecord> {
        let _ftz = FlushToZero::enable();
        let idx = self.batch_indices(self.epoch);
        let coords: Vec<[usize; 3]> = idx.iter().map(|&i| self.sampled.grid[i]).collect();
        let mut g = Graph::new();
        let (total, comps) = self.build_loss(&mut g, &coords)?;
        let lr = lr_at(self.epoch, &self.config.schedule);
        let record = LossRecord {
            epoch: self.epoch,
            lr,
            total: g.scalar(total) as f64,
            components: comps.map(|c| c.map_or(0.0, |c| g.scalar(c) as f64)),
        };
        if !record.total.is_finite() {
            return Err(NnError::NonFinite(format!("loss at epoch {}", self.epoch)));
        }
        let grads = g.backward(total, self.store.len());
        drop(g);
        self.optimizer.step(&mut self.store, &grads, lr);
        self.epoch += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Branch-averaged prediction over the full grid, made data consistent.
    pub fn inference_full_grid(&self) -> Result<KSpaceVolume> {
        self.inference_with_chunk(self.config.schedule.inference_chunk)
    }

    pub fn inference_with_chunk(&self, chunk: usize) -> Result<KSpaceVolume> {
        let _ftz = FlushToZero::enable();
        if chunk == 0 {
            return Err(NnError::Config("inference chunk must be positive".into()));
        }
        let (h, w, c, t) = self.meas.dims();
        let feats = match &self.model.unet {
            Some(unet) => {
                let mut g = Graph::new();
                let x = g.input(volume_to_tensor::<f32>(self.ksp_in.data()));
                let out = unet.forward(&mut g, &self.store, x)?;
                Some(g.value(out.features).clone())
            }
            None => None,
        };
        let grid = CoordinateSet::full_grid(h, w, t);
        let mut pred = Array4::<Complex32>::zeros((h, w, c, t));
        for start in (0..grid.len()).step_by(chunk) {
            let end = (start + chunk).min(grid.len());
            let pts = &grid.grid[start..end];
            let mut g = Graph::new();
            let pe = g.input(self.encodings.slice(ndarray::s![start..end, ..]).to_owned().into_dyn());
            let kf = match &feats {
                Some(f) => {
                    let fi = g.input(f.clone());
                    Some(g.gather(fi, pts)?)
                }
                None => None,
            };
            let nodes = self.model.branches(&mut g, &self.store, pe, kf)?;
            let mut avg = g.value(nodes.y_pv).clone();
            if let Some(k) = nodes.y_kv {
                avg = (avg + g.value(k)) * 0.5;
            }
            for (n, p) in pts.iter().enumerate() {
                for k in 0..c {
                    pred[[p[1], p[2], k, p[0]]] = Complex32::new(avg[[n, k]], avg[[n, k + c]]);
                }
            }
        }
        let pred = KSpaceVolume::new(pred)?.with_norm_scale(self.meas.norm_scale)?;
        Ok(hard_dc(&pred, &self.meas, &self.mask)?.with_meta(self.meas.meta.clone()))
    }

    /// Replaces the U-Net input with a fresh full-grid prediction.
    pub fn refine(&mut self) -> Result<&KSpaceVolume> {
        self.ksp_in = self.inference_full_grid()?;
        self.generation += 1;
        Ok(&self.ksp_in)
    }

    /// Trains until the epoch budget is spent, refining at every boundary,
    /// and reconstructs the coil-combined image series.
    pub fn run(&mut self, csm: &CoilSensitivityMaps, observer: &mut dyn TrainObserver) -> Result<ReconOutput> {
        let sched = self.config.schedule.clone();
        while self.epoch < sched.total_epochs {
            let record = self.optimize_epoch()?;
            observer.on_epoch(&record)?;
            if self.epoch % sched.refine_every == 0 {
                self.refine()?;
                observer.on_refine(self, &self.ksp_in)?;
            }
        }
        let final_ksp = if sched.total_epochs == 0 || sched.total_epochs % sched.refine_every == 0 {
            self.ksp_in.clone()
        } else {
            self.inference_full_grid()?
        };
        let image = reconstruct_image(&final_ksp, csm)?;
        Ok(ReconOutput { image, kspace: final_ksp, history: self.history.clone() })
    }

    pub fn checkpoint(&self) -> TrainState {
        let named = |store: &ParamStore<f32>, arrays: Option<&[ArrayD<f32>]>| -> Vec<NamedTensor> {
            store
                .iter()
                .map(|(id, p)| {
                    let a = arrays.map_or(&p.value, |a| &a[id.0]);
                    NamedTensor { name: p.name.clone(), shape: a.shape().to_vec(), data: a.iter().copied().collect() }
                })
                .collect()
        };
        TrainState {
            epoch: self.epoch,
            generation: self.generation,
            adam_step: self.optimizer.step,
            params: named(&self.store, None),
            adam_m: named(&self.store, Some(&self.optimizer.m)),
            adam_v: named(&self.store, Some(&self.optimizer.v)),
            ksp_in: self.ksp_in.data().iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    /// Restores a state produced by [`Trainer::checkpoint`] for the same
    /// configuration and data.
    pub fn restore(&mut self, state: &TrainState) -> Result<()> {
        let load = |dst: &mut ArrayD<f32>, src: &NamedTensor, name: &str| -> Result<()> {
            if src.name != name || src.shape != dst.shape() || src.data.len() != dst.len() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {} {:?} does not match {name} {:?}",
                    src.name,
                    src.shape,
                    dst.shape()
                )));
            }
            *dst = ArrayD::from_shape_vec(IxDyn(&src.shape), src.data.clone()).expect("length checked");
            Ok(())
        };
        let n = self.store.len();
        if state.params.len() != n || state.adam_m.len() != n || state.adam_v.len() != n {
            return Err(NnError::Checkpoint(format!("expected {n} tensors, found {}", state.params.len())));
        }
        let (h, w, c, t) = self.meas.dims();
        if state.ksp_in.len() != 2 * h * w * c * t {
            return Err(NnError::Checkpoint("stored U-Net input has the wrong size".into()));
        }
        let mut store = self.store.clone();
        let mut opt = self.optimizer.clone();
        for id in self.store.ids() {
            let name = self.store.name(id).to_string();
            load(store.get_mut(id), &state.params[id.0], &name)?;
            load(&mut opt.m[id.0], &state.adam_m[id.0], &name)?;
            load(&mut opt.v[id.0], &state.adam_v[id.0], &name)?;
        }
        opt.step = state.adam_step;
        let pairs: Vec<Complex32> = state.ksp_in.chunks_exact(2).map(|p| Complex32::new(p[0], p[1])).collect();
        let ksp = Array4::from_shape_vec((h, w, c, t), pairs).expect("length checked");
        let ksp_in = KSpaceVolume::new(ksp)?.with_norm_scale(self.meas.norm_scale)?.with_meta(self.meas.meta.clone());
        self.store = store;
        self.optimizer = opt;
        self.ksp_in = ksp_in;
        self.epoch = state.epoch;
        self.generation = state.generation;
        self.perm_cache = None;
        Ok(())
    }

    pub fn mode(&self) -> BranchMode {
        self.config.model.mode
    }
}

/// Inverse FFT of the (de-normalized) k-space and conjugate coil combination.
pub fn reconstruct_image(ksp: &KSpaceVolume, csm: &CoilSensitivityMaps) -> Result<CineImageSeries> {
    let imgs = ifft2_centered(&ksp.denormalized())?;
    Ok(coil_combine(&imgs, csm)?)
}
