//! Run directories: a lock file, the configuration snapshot, loss history,
//! checkpoints, refined k-space generations and the final outputs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kpinr_core::KSpaceVolume;
use kpinr_nn::{LossRecord, TrainObserver, TrainState, Trainer};
use serde::{Deserialize, Serialize};

use crate::archive::write_state;
use crate::container::{atomic_write, kspace_data, write_container, TensorData, TensorInfo};
use crate::error::{CliError, Result};

pub const LOCK: &str = ".lock";
pub const CONFIG: &str = "config.toml";
pub const CONFIG_SOURCE: &str = "config.source.toml";
pub const INFO: &str = "run.json";
pub const LOSS: &str = "loss.csv";
pub const IMAGE: &str = "image.kpt";
pub const KSPACE: &str = "kspace.kpt";
pub const REFERENCE: &str = "reference.kpt";
pub const MASK: &str = "mask.kpt";
pub const CSM: &str = "csm.kpt";
pub const CHECKPOINT: &str = "checkpoints/latest.kpa";
pub const FAILURE: &str = "checkpoints/failure.kpa";

/// Exclusive handle on a run directory; the lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

impl RunDir {
    pub fn open(root: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        for sub in ["", "checkpoints", "generations"] {
            fs::create_dir_all(root.join(sub)).map_err(|e| CliError::io(root.join(sub), e))?;
        }
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(root.to_path_buf())),
            Err(e) => return Err(CliError::io(lock, e)),
        }
        Ok(Self { root: root.to_path_buf(), config_hash: config_hash.into(), seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn info(&self, axes: &[&str]) -> TensorInfo {
        TensorInfo::new(axes).with_provenance(&self.config_hash, self.seed)
    }

    pub fn write_tensor(&self, name: &str, data: &TensorData, mut info: TensorInfo) -> Result<()> {
        info.config_hash = self.config_hash.clone();
        info.seed = self.seed;
        write_container(&self.path(name), data, &info)?;
        Ok(())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        atomic_write(&self.path(name), text.as_bytes())
    }

    pub fn write_info(&self, info: &RunInfo) -> Result<()> {
        let text = serde_json::to_string_pretty(info).expect("run info serializes");
        self.write_text(INFO, &text)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: String,
    pub pattern: String,
    #[serde(rename = "R")]
    pub r: f64,
    pub effective_r: f64,
    pub subject: String,
    pub view: String,
    pub seed: u64,
    pub config_hash: String,
    /// `running`, `complete` or `failed`.
    pub status: String,
    pub elapsed_s: f64,
    pub epochs: usize,
    pub generations: usize,
    pub has_reference: bool,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

pub fn read_info(root: &Path) -> Result<RunInfo> {
    let p = root.join(INFO);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(&p, e.to_string()))
}

pub const LOSS_HEADER: &str = "epoch,lr,total,kv,pv,ae_acq,ae_zf";

fn loss_line(r: &LossRecord) -> String {
    let c = r.components;
    format!("{},{},{},{},{},{},{}", r.epoch, r.lr, r.total, c[0], c[1], c[2], c[3])
}

/// Streams losses to `loss.csv` and persists every refinement.
pub struct RunObserver<'a> {
    dir: &'a RunDir,
    loss: BufWriter<File>,
    save_generations: bool,
    checkpoint: bool,
}

impl<'a> RunObserver<'a> {
    /// Starts `loss.csv`, keeping rows before `resume_epoch` when resuming.
    pub fn new(dir: &'a RunDir, save_generations: bool, checkpoint: bool, resume_epoch: Option<usize>) -> Result<Self> {
        let path = dir.path(LOSS);
        let mut kept = Vec::new();
        if let (Some(epoch), Ok(f)) = (resume_epoch, File::open(&path)) {
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| CliError::io(&path, e))?;
                let e: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if e.is_some_and(|e| e < epoch) {
                    kept.push(line);
                }
            }
        }
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut loss = BufWriter::new(f);
        let io = |e| CliError::io(&path, e);
        writeln!(loss, "{LOSS_HEADER}").map_err(io)?;
        for l in kept {
            writeln!(loss, "{l}").map_err(io)?;
        }
        Ok(Self { dir, loss, save_generations, checkpoint })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.loss.flush().map_err(|e| CliError::io(self.dir.path(LOSS), e))
    }
}

fn nn_err(e: CliError) -> kpinr_nn::NnError {
    kpinr_nn::NnError::Config(format!("run directory: {e}"))
}

impl TrainObserver for RunObserver<'_> {
    fn on_epoch(&mut self, record: &LossRecord) -> kpinr_nn::Result<()> {
        writeln!(self.loss, "{}", loss_line(record)).map_err(|e| nn_err(CliError::io(self.dir.path(LOSS), e)))
    }

    fn on_refine(&mut self, trainer: &Trainer, refined: &KSpaceVolume) -> kpinr_nn::Result<()> {
        self.flush().map_err(nn_err)?;
        if self.save_generations {
            let (data, info) = kspace_data(refined);
            let name = format!("generations/gen_{:03}.kpt", trainer.generation());
            self.dir.write_tensor(&name, &data, info.with_meta("generation", trainer.generation())).map_err(nn_err)?;
        }
        if self.checkpoint {
            write_state(&self.dir.path(CHECKPOINT), &trainer.checkpoint()).map_err(nn_err)?;
        }
        Ok(())
    }
}

/// Dumps the trainer state after a failure, for post-mortem inspection.
pub fn dump_failure(dir: &RunDir, state: &TrainState) -> Result<()> {
    write_state(&dir.path(FAILURE), state)
}
