//! Reconstruction configuration: TOML with dotted `--set` overrides layered
//! over a named profile.

use std::path::Path;

use kpinr_baselines::{KtGrappaSpec, LpsSpec};
use kpinr_core::{MaskSpec, PhantomSpec};
use kpinr_nn::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kpinr,
    Pinr,
    Ktgrappa,
    Lps,
    Zerofill,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kpinr => "kpinr",
            Method::Pinr => "pinr",
            Method::Ktgrappa => "ktgrappa",
            Method::Lps => "lps",
            Method::Zerofill => "zerofill",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Reference hyperparameters (64x64 phantom or real data, GPU-scale budget).
    Full,
    /// Reduced networks and budget for 32x32 phantoms on a CPU.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsmChoice {
    /// Use the maps stored next to the k-space when given, else estimate.
    Auto,
    /// Always estimate from the ACS block.
    Acs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub subject: String,
    pub view: String,
    pub csm: CsmChoice,
    /// HDF5 variable holding k-space; empty picks the first known name.
    pub variable: String,
    /// Axis letters of the stored array in file order, e.g. `t,z,c,w,h`;
    /// empty means the documented default.
    pub axes: String,
    /// Slice index along `z` for multi-slice stacks.
    pub slice: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            subject: "phantom".into(),
            view: "sax".into(),
            csm: CsmChoice::Auto,
            variable: String::new(),
            axes: String::new(),
            slice: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Write every refined k-space generation.
    pub save_generations: bool,
    /// Atomically rewrite the resumable checkpoint at every refinement.
    pub checkpoint: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { save_generations: true, checkpoint: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub profile: Profile,
    pub method: Method,
    /// Master seed; module seeds below are derived from it unless set
    /// explicitly.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub mask: MaskSpec,
    pub train: TrainConfig,
    pub grappa: KtGrappaSpec,
    pub lps: LpsSpec,
    pub data: DataConfig,
    pub output: OutputConfig,
}

/// SplitMix64 of `master` on stream `stream`, kept within TOML's signed
/// integer range.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) & (i64::MAX as u64)
}

pub const SEED_PHANTOM: u64 = 0;
pub const SEED_MASK: u64 = 1;
pub const SEED_TRAIN: u64 = 2;

impl ReconConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            method: Method::Kpinr,
            seed: 0,
            phantom: PhantomSpec::default(),
            mask: MaskSpec::default(),
            train: TrainConfig::default(),
            grappa: KtGrappaSpec::default(),
            lps: LpsSpec::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        };
        if profile == Profile::Desk {
            cfg.train = TrainConfig::desk();
            cfg.phantom.h = 32;
            cfg.phantom.w = 32;
            cfg.mask.acs_lines = 8;
        }
        cfg.apply_seed(0);
        cfg
    }

    /// Sets the master seed and every module seed derived from it.
    pub fn apply_seed(&mut self, master: u64) {
        self.seed = master;
        self.phantom.seed = derive_seed(master, SEED_PHANTOM);
        self.mask.seed = derive_seed(master, SEED_MASK);
        self.train.schedule.seed = derive_seed(master, SEED_TRAIN);
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.mask.validate(self.phantom.w.max(1))?;
        self.train.validate()?;
        self.grappa.validate()?;
        self.lps.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value`; the value is read as a TOML literal, falling
/// back to a bare string.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {key:?}")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is a value, not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn has_path(t: &toml::Table, path: &[&str]) -> bool {
    match path {
        [] => true,
        [last] => t.contains_key(*last),
        [head, rest @ ..] => t.get(*head).and_then(|v| v.as_table()).is_some_and(|s| has_path(s, rest)),
    }
}

/// Builds the configuration from an optional TOML text, `--set`
/// assignments and an optional master seed. Unknown keys are rejected.
pub fn resolve(source: Option<&str>, sets: &[String], seed: Option<u64>) -> Result<ReconConfig> {
    let mut user: toml::Table = match source {
        Some(text) => text.parse().map_err(|e| CliError::Config(format!("config: {e}")))?,
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut user, s)?;
    }
    let profile = match user.get("profile") {
        None => Profile::Full,
        Some(v) => v.clone().try_into().map_err(|e| CliError::Config(format!("profile: {e}")))?,
    };
    let explicit: Vec<bool> = [["phantom", "seed"].as_slice(), &["mask", "seed"], &["train", "schedule", "seed"]]
        .iter()
        .map(|p| has_path(&user, p))
        .collect();
    let defaults = ReconConfig::profile(profile);
    let mut base = toml::Table::try_from(&defaults).map_err(|e| CliError::Config(e.to_string()))?;
    let master = seed.or_else(|| user.get("seed").and_then(|v| v.as_integer()).map(|s| s as u64));
    merge(&mut base, user);
    let mut cfg: ReconConfig = base.try_into().map_err(|e| CliError::Config(format!("config: {e}")))?;
    if let Some(m) = master {
        let kept = (cfg.phantom.seed, cfg.mask.seed, cfg.train.schedule.seed);
        cfg.apply_seed(m);
        // explicit module seeds in the file win unless --seed was given
        if seed.is_none() {
            if explicit[0] {
                cfg.phantom.seed = kept.0;
            }
            if explicit[1] {
                cfg.mask.seed = kept.1;
            }
            if explicit[2] {
                cfg.train.schedule.seed = kept.2;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<(ReconConfig, Option<String>)> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    Ok((resolve(text.as_deref(), sets, seed)?, text))
}
