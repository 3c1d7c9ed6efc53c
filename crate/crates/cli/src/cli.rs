//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use kpinr_core::{generate_phantom, make_mask};
use kpinr_eval::{
    evaluate_images, make_report, write_gray_png, write_metrics_csv, xt_strip, MetricRecord, PerceptualBackend,
    StructureTexture,
};

use crate::archive::read_index;
use crate::config::{load, Method, ReconConfig};
use crate::container::{csm_data, image_data, kspace_data, mask_data, read_csm, read_header, read_image, read_kspace, read_mask, split, write_container};
use crate::error::{CliError, Result};
use crate::loader::{load_cmrxrecon, LoadOptions};
use crate::pipeline::{run_into, Inputs};
use crate::rundir::{read_info, RunDir, IMAGE, REFERENCE};

pub const DEVICE_ENV: &str = "KPINR_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "kpinr", version, about = "Dynamic MRI reconstruction with k-space and image-space implicit networks")]
pub struct Cli {
    /// TOML configuration layered over the selected profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.schedule.total_epochs=200`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; overrides every module seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Perceptual {
    None,
    StructureTexture,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cardiac phantom (k-space, maps, ground truth).
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a sampling mask.
    Mask {
        #[arg(long)]
        out: PathBuf,
        /// Take H, W and T from this k-space container.
        #[arg(long, conflicts_with = "dims", required_unless_present = "dims")]
        like: Option<PathBuf>,
        /// Explicit `H,W,T`.
        #[arg(long)]
        dims: Option<String>,
    },
    /// Reconstruct undersampled k-space into a run directory.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// `.kpt` container, or a MATLAB v7.3 `.mat`/`.h5` file.
        #[arg(long)]
        kspace: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        csm: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
        /// Continue from the run's stored checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score run directories against their references and tabulate.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Method the significance tests compare against; defaults to
        /// `kpinr` when present.
        #[arg(long)]
        reference_method: Option<String>,
        #[arg(long, value_enum, default_value = "none")]
        perceptual: Perceptual,
    },
    /// Print the header of a tensor container or checkpoint archive.
    Inspect { file: PathBuf },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            if !e.to_string().contains("Usage:") {
                use clap::CommandFactory;
                eprintln!("\n{}", Cli::command().render_usage());
            }
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.diagnostic());
            return err.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let (mut cfg, source) = load(cli.config.as_deref(), &cli.set, cli.seed)?;
    match &cli.command {
        Command::Phantom { out } => phantom(&cfg, out),
        Command::Mask { out, like, dims } => mask(&cfg, out, like.as_deref(), dims.as_deref()),
        Command::Reconstruct { method, kspace, mask, csm, run, resume } => {
            if let Some(m) = method {
                cfg.method = *m;
            }
            check_device()?;
            reconstruct(&cfg, source.as_deref(), kspace, mask, csm.as_deref(), run, *resume)
        }
        Command::Evaluate { runs, out, reference_method, perceptual } => {
            evaluate(runs, out, reference_method.as_deref(), *perceptual)
        }
        Command::Inspect { file } => inspect(file),
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(v) if !v.is_empty() && !v.eq_ignore_ascii_case("cpu") => Err(CliError::Device(v)),
        _ => Ok(()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn phantom(cfg: &ReconConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let ph = generate_phantom(&cfg.phantom)?;
    let (hash, seed) = (cfg.hash(), cfg.phantom.seed);
    let mut full = ph.ksp_full.clone();
    full.meta.insert("acquisition".into(), "full".into());
    full.meta.insert("view".into(), cfg.data.view.clone());
    let (d, i) = kspace_data(&full);
    write_container(&out.join("ksp_full.kpt"), &d, &i.with_provenance(&hash, seed))?;
    let (d, i) = csm_data(&ph.csm);
    write_container(&out.join("csm.kpt"), &d, &i.with_provenance(&hash, seed))?;
    let (d, i) = image_data(&ph.image);
    write_container(&out.join("image.kpt"), &d, &i.with_provenance(&hash, seed).with_meta("role", "ground-truth"))?;
    crate::container::atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let (h, w, c, t) = full.dims();
    println!("phantom {h}x{w} coils={c} frames={t} -> {}", out.display());
    Ok(())
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("--dims expects H,W,T, got {s:?}"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [h, w, t] => Ok((h, w, t)),
        _ => Err(CliError::Usage(format!("--dims expects H,W,T, got {s:?}"))),
    }
}

fn mask(cfg: &ReconConfig, out: &Path, like: Option<&Path>, dims: Option<&str>) -> Result<()> {
    let (h, w, t) = match (like, dims) {
        (Some(p), _) => {
            let hd = read_header(p)?;
            match hd.shape[..] {
                [h, w, _, t] => (h, w, t),
                _ => return Err(CliError::format(p, format!("expected [H,W,coil,T], found {:?}", hd.shape))),
            }
        }
        (None, Some(d)) => parse_dims(d)?,
        (None, None) => return Err(CliError::Usage("mask needs --like or --dims".into())),
    };
    let m = make_mask(&cfg.mask, h, w, t)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let (d, i) = mask_data(&m);
    write_container(out, &d, &i.with_provenance(&cfg.hash(), cfg.mask.seed))?;
    println!(
        "mask {} R={} acs={} effective_R={:.3} -> {}",
        m.pattern.as_str(),
        m.nominal_r,
        m.acs_lines,
        kpinr_core::effective_acceleration(&m)?,
        out.display()
    );
    Ok(())
}

fn is_matlab(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "mat" | "h5" | "hdf5"))
}

fn reconstruct(
    cfg: &ReconConfig,
    source: Option<&str>,
    kspace: &Path,
    mask: &Path,
    csm: Option<&Path>,
    run: &Path,
    resume: bool,
) -> Result<()> {
    let kspace = if is_matlab(kspace) {
        let opts = LoadOptions { variable: cfg.data.variable.clone(), axes: cfg.data.axes.clone(), slice: cfg.data.slice };
        load_cmrxrecon(kspace, &opts)?
    } else {
        read_kspace(kspace)?
    };
    let mask = read_mask(mask)?;
    let csm = csm.map(read_csm).transpose()?;
    let dir = RunDir::open(run, &cfg.hash(), cfg.seed)?;
    let (_, info) = run_into(cfg, source, &Inputs { kspace, mask, csm }, &dir, resume)?;
    println!(
        "{} {} R={} epochs={} generations={} elapsed={:.1}s -> {}",
        info.method,
        info.pattern,
        info.r,
        info.epochs,
        info.generations,
        info.elapsed_s,
        run.display()
    );
    Ok(())
}

fn evaluate(runs: &[PathBuf], out: &Path, reference: Option<&str>, perceptual: Perceptual) -> Result<()> {
    let figures = out.join("figures");
    create_dir(&figures)?;
    let texture = StructureTexture::default();
    let backend: Option<&dyn PerceptualBackend> = match perceptual {
        Perceptual::None => None,
        Perceptual::StructureTexture => Some(&texture),
    };
    let mut records = Vec::new();
    for run in runs {
        let info = read_info(run)?;
        if info.status != "complete" {
            return Err(CliError::format(run, format!("run status is {:?}", info.status)));
        }
        let reference_path = run.join(REFERENCE);
        if !reference_path.exists() {
            return Err(CliError::format(run, "run has no fully sampled reference to score against"));
        }
        let img = read_image(&run.join(IMAGE))?;
        let refimg = read_image(&reference_path)?;
        let m = evaluate_images(&img, &refimg, backend)?;
        let stem = format!("{}_{}_{}_R{}_{}", info.subject, info.view, info.pattern, info.r, info.method);
        write_gray_png(&figures.join(format!("{stem}_xt.png")), &xt_strip(&img.magnitude()))?;
        let ref_png = figures.join(format!("{}_{}_reference_xt.png", info.subject, info.view));
        if !ref_png.exists() {
            write_gray_png(&ref_png, &xt_strip(&refimg.magnitude()))?;
        }
        records.push(MetricRecord {
            method: info.method,
            subject: info.subject,
            view: info.view,
            pattern: info.pattern,
            r: info.r,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            dists: m.dists,
        });
    }
    let reference = reference
        .map(str::to_string)
        .or_else(|| records.iter().any(|r| r.method == Method::Kpinr.as_str()).then(|| Method::Kpinr.as_str().to_string()));
    write_metrics_csv(&out.join("metrics.csv"), &records)?;
    let table = make_report(&records, reference.as_deref())?;
    crate::container::atomic_write(&out.join("table.md"), table.to_markdown().as_bytes())?;
    table.write_csv(&out.join("table.csv"))?;
    for r in &records {
        println!("{} {} {} {} R={} psnr={:.3} ssim={:.4}", r.method, r.subject, r.view, r.pattern, r.r, r.psnr_db, r.ssim);
    }
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn inspect(file: &Path) -> Result<()> {
    let bytes = fs::read(file).map_err(|e| CliError::io(file, e))?;
    if bytes.starts_with(crate::archive::MAGIC) {
        let (index, _) = read_index(file, &bytes)?;
        println!("archive checkpoint");
        println!("epoch {}", index.epoch);
        println!("generation {}", index.generation);
        println!("adam_step {}", index.adam_step);
        for e in &index.entries {
            println!("{} {} [{}]", e.group, e.name, join(&e.shape));
        }
        return Ok(());
    }
    let (_, h, _) = split(file, &bytes)?;
    let dtype = serde_json::to_value(h.dtype).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    println!("dtype {dtype}");
    println!("shape [{}]", join(&h.shape));
    println!("axes [{}]", h.axes.join(","));
    println!("endianness {}", h.endianness);
    println!("norm_scale {}", h.norm_scale);
    println!("config_hash {}", h.provenance.config_hash);
    println!("seed {}", h.provenance.seed);
    println!("content_id {}", h.provenance.content_id);
    for (k, v) in &h.meta {
        println!("meta.{k} {v}");
    }
    Ok(())
}
