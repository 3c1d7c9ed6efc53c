//! CMRxRecon-style MATLAB v7.3 (HDF5) k-space loader.
//!
//! MATLAB stores complex arrays as a compound of `real` and `imag`, and the
//! HDF5 view lists dimensions in reverse MATLAB order. For the cine files a
//! `kx, ky, coil, slice, time` MATLAB array therefore appears as
//! `t, z, c, w, h` here, with `h` the readout and `w` the phase-encode axis.

use std::collections::BTreeMap;
use std::path::Path;

use kpinr_core::{Complex32, KSpaceVolume};
use ndarray::{ArrayD, Axis, Ix4};

use crate::error::{CliError, Result};

pub const KNOWN_VARIABLES: [&str; 3] = ["kspace_full", "kspace", "kspace_single_full"];
pub const DEFAULT_AXES: &str = "t,z,c,w,h";
pub const DEFAULT_AXES_4D: &str = "t,c,w,h";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    /// Empty picks the first of [`KNOWN_VARIABLES`] present.
    pub variable: String,
    /// Comma-separated letters from `h, w, c, t, z` in file order; empty uses
    /// [`DEFAULT_AXES`] (or [`DEFAULT_AXES_4D`] for rank-4 data).
    pub axes: String,
    pub slice: usize,
}

/// Parses an axis string and checks it against the stored shape.
pub fn parse_axes(spec: &str, shape: &[usize]) -> Result<Vec<char>> {
    let axes: Vec<char> = spec
        .split(',')
        .map(|s| {
            let s = s.trim();
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if "hwctz".contains(c) => Ok(c),
                _ => Err(CliError::Load(format!("unknown axis {s:?} in {spec:?}; use letters h,w,c,t,z"))),
            }
        })
        .collect::<Result<_>>()?;
    let report = || format!("stored shape {shape:?} vs axes {spec:?}");
    if axes.len() != shape.len() {
        return Err(CliError::Load(format!("axis count differs from rank: {}", report())));
    }
    for c in ['h', 'w', 'c', 't'] {
        if axes.iter().filter(|&&a| a == c).count() != 1 {
            return Err(CliError::Load(format!("axis {c} must appear exactly once: {}", report())));
        }
    }
    if axes.iter().filter(|&&a| a == 'z').count() > 1 {
        return Err(CliError::Load(format!("axis z repeated: {}", report())));
    }
    Ok(axes)
}

/// Reorders a stored complex array into `[H, W, C, T]`, selecting `slice`
/// along `z` when present.
pub fn to_canonical(data: ArrayD<Complex32>, axes: &[char], slice: usize) -> Result<ArrayD<Complex32>> {
    let shape = data.shape().to_vec();
    let (mut data, mut axes) = (data, axes.to_vec());
    if let Some(z) = axes.iter().position(|&a| a == 'z') {
        if slice >= shape[z] {
            return Err(CliError::Load(format!("slice {slice} out of range for {} slices (shape {shape:?})", shape[z])));
        }
        data = data.index_axis_move(Axis(z), slice);
        axes.remove(z);
    }
    let order: Vec<usize> = ['h', 'w', 'c', 't'].iter().map(|c| axes.iter().position(|a| a == c).unwrap()).collect();
    Ok(data.permuted_axes(order).as_standard_layout().into_owned())
}

#[cfg(feature = "cmrxrecon")]
mod h5 {
    use super::*;
    use hdf5::types::{FloatSize, TypeDescriptor};

    #[derive(hdf5::H5Type, Clone, Copy, Debug)]
    #[repr(C)]
    struct C32 {
        real: f32,
        imag: f32,
    }

    #[derive(hdf5::H5Type, Clone, Copy, Debug)]
    #[repr(C)]
    struct C64 {
        real: f64,
        imag: f64,
    }

    fn err(path: &Path, e: hdf5::Error) -> CliError {
        CliError::Load(format!("{}: {e}", path.display()))
    }

    fn float_size(t: &TypeDescriptor) -> Option<FloatSize> {
        match t {
            TypeDescriptor::Float(s) => Some(*s),
            _ => None,
        }
    }

    pub fn read(path: &Path, variable: &str) -> Result<(String, ArrayD<Complex32>)> {
        let file = hdf5::File::open(path).map_err(|e| err(path, e))?;
        let names = file.member_names().map_err(|e| err(path, e))?;
        let name = if variable.is_empty() {
            KNOWN_VARIABLES.iter().find(|v| names.iter().any(|n| n == *v)).map(|v| v.to_string()).ok_or_else(|| {
                CliError::Load(format!("{}: no k-space variable among {names:?} (looked for {KNOWN_VARIABLES:?})", path.display()))
            })?
        } else if names.iter().any(|n| n == variable) {
            variable.to_string()
        } else {
            return Err(CliError::Load(format!("{}: variable {variable:?} not found; available: {names:?}", path.display())));
        };
        let ds = file.dataset(&name).map_err(|e| err(path, e))?;
        let desc = ds.dtype().and_then(|t| t.to_descriptor()).map_err(|e| err(path, e))?;
        let TypeDescriptor::Compound(ct) = &desc else {
            return Err(CliError::Load(format!("{}: {name} is {desc:?}, not a real/imag compound", path.display())));
        };
        let field = |n: &str| ct.fields.iter().find(|f| f.name == n).and_then(|f| float_size(&f.ty));
        let data = match (field("real"), field("imag")) {
            (Some(FloatSize::U4), Some(FloatSize::U4)) => {
                ds.read_dyn::<C32>().map_err(|e| err(path, e))?.mapv(|z| Complex32::new(z.real, z.imag))
            }
            (Some(FloatSize::U8), Some(FloatSize::U8)) => {
                ds.read_dyn::<C64>().map_err(|e| err(path, e))?.mapv(|z| Complex32::new(z.real as f32, z.imag as f32))
            }
            _ => {
                let fields: Vec<_> = ct.fields.iter().map(|f| (&f.name, &f.ty)).collect();
                return Err(CliError::Load(format!("{}: {name} has compound fields {fields:?}", path.display())));
            }
        };
        Ok((name, data))
    }

    pub fn write(path: &Path, variable: &str, data: &ArrayD<Complex32>) -> Result<()> {
        let file = hdf5::File::create(path).map_err(|e| err(path, e))?;
        let packed = data.mapv(|z| C32 { real: z.re, imag: z.im });
        file.new_dataset_builder().with_data(&packed).create(variable).map_err(|e| err(path, e))?;
        Ok(())
    }
}

/// Writes `data` (already in file axis order) as a single-precision
/// `real`/`imag` compound dataset, the layout [`load_cmrxrecon`] reads.
#[cfg(feature = "cmrxrecon")]
pub fn write_cmrxrecon(path: &Path, variable: &str, data: &ArrayD<Complex32>) -> Result<()> {
    h5::write(path, variable, data)
}

#[cfg(feature = "cmrxrecon")]
pub fn load_cmrxrecon(path: &Path, opts: &LoadOptions) -> Result<KSpaceVolume> {
    let (name, raw) = h5::read(path, &opts.variable)?;
    let spec = match (opts.axes.is_empty(), raw.ndim()) {
        (false, _) => opts.axes.clone(),
        (true, 5) => DEFAULT_AXES.into(),
        (true, 4) => DEFAULT_AXES_4D.into(),
        (true, n) => {
            return Err(CliError::Load(format!(
                "{}: {name} has rank {n} (shape {:?}); pass data.axes to describe it",
                path.display(),
                raw.shape()
            )))
        }
    };
    let axes = parse_axes(&spec, raw.shape()).map_err(|e| CliError::Load(format!("{}: {name}: {e}", path.display())))?;
    let canonical = to_canonical(raw, &axes, opts.slice)?.into_dimensionality::<Ix4>().expect("rank 4 after reordering");
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_lowercase()).unwrap_or_default();
    let view = if stem.contains("lax") {
        "lax"
    } else if stem.contains("sax") {
        "sax"
    } else {
        "unknown"
    };
    let meta = BTreeMap::from([
        ("acquisition".to_string(), "full".to_string()),
        ("source".into(), path.display().to_string()),
        ("variable".into(), name),
        ("axes".into(), spec),
        ("slice".into(), opts.slice.to_string()),
        ("view".into(), view.into()),
    ]);
    Ok(KSpaceVolume::new(canonical)?.with_meta(meta))
}

#[cfg(not(feature = "cmrxrecon"))]
pub fn load_cmrxrecon(path: &Path, _opts: &LoadOptions) -> Result<KSpaceVolume> {
    Err(CliError::Load(format!("{}: built without the cmrxrecon feature", path.display())))
}
