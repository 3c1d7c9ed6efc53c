//! Binary tensor container: an 8-byte magic, a little-endian `u32` header
//! length, a UTF-8 JSON header and a raw row-major little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use kpinr_core::{CineImageSeries, CoilSensitivityMaps, Complex32, CsmSource, KSpaceVolume, MaskPattern, SamplingMask};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"KPINRTC\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "complex64-interleaved")]
    Complex64,
    #[serde(rename = "float32")]
    Float32,
    #[serde(rename = "uint8")]
    Uint8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Complex64 => 8,
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the resolved configuration that produced the tensor.
    pub config_hash: String,
    pub seed: u64,
    /// `sha256:` of `"blob <len>\0" + payload`, in the manner of git object ids.
    pub content_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub endianness: String,
    pub norm_scale: f32,
    pub provenance: Provenance,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Complex64(ArrayD<Complex32>),
    Float32(ArrayD<f32>),
    Uint8(ArrayD<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::Complex64(_) => DType::Complex64,
            TensorData::Float32(_) => DType::Float32,
            TensorData::Uint8(_) => DType::Uint8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::Complex64(a) => a.shape(),
            TensorData::Float32(a) => a.shape(),
            TensorData::Uint8(a) => a.shape(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::Complex64(a) => a.iter().flat_map(|z| [z.re.to_le_bytes(), z.im.to_le_bytes()]).flatten().collect(),
            TensorData::Float32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::Uint8(a) => a.iter().copied().collect(),
        }
    }

    fn from_bytes(dtype: DType, shape: &[usize], bytes: &[u8]) -> Option<Self> {
        let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        let dim = IxDyn(shape);
        Some(match dtype {
            DType::Complex64 => TensorData::Complex64(
                ArrayD::from_shape_vec(dim, bytes.chunks_exact(8).map(|c| Complex32::new(f(&c[..4]), f(&c[4..]))).collect()).ok()?,
            ),
            DType::Float32 => TensorData::Float32(ArrayD::from_shape_vec(dim, bytes.chunks_exact(4).map(f).collect()).ok()?),
            DType::Uint8 => TensorData::Uint8(ArrayD::from_shape_vec(dim, bytes.to_vec()).ok()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub data: TensorData,
}

/// Descriptive fields supplied by the writer; dtype, shape and content id
/// are derived from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub axes: Vec<String>,
    pub norm_scale: f32,
    pub config_hash: String,
    pub seed: u64,
    pub meta: BTreeMap<String, String>,
}

impl TensorInfo {
    pub fn new(axes: &[&str]) -> Self {
        Self {
            axes: axes.iter().map(|a| a.to_string()).collect(),
            norm_scale: 1.0,
            config_hash: String::new(),
            seed: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_provenance(mut self, config_hash: &str, seed: u64) -> Self {
        self.config_hash = config_hash.into();
        self.seed = seed;
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }
}

pub fn content_id(payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", payload.len()).as_bytes());
    h.update(payload);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Writes through a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn encode(data: &TensorData, info: &TensorInfo) -> Result<(Header, Vec<u8>)> {
    if info.axes.len() != data.shape().len() {
        return Err(CliError::Config(format!("{} axis names for a rank-{} tensor", info.axes.len(), data.shape().len())));
    }
    let payload = data.to_bytes();
    let header = Header {
        dtype: data.dtype(),
        shape: data.shape().to_vec(),
        axes: info.axes.clone(),
        endianness: "little".into(),
        norm_scale: info.norm_scale,
        provenance: Provenance { config_hash: info.config_hash.clone(), seed: info.seed, content_id: content_id(&payload) },
        meta: info.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok((header, out))
}

pub fn write_container(path: &Path, data: &TensorData, info: &TensorInfo) -> Result<Header> {
    let (header, bytes) = encode(data, info)?;
    atomic_write(path, &bytes)?;
    Ok(header)
}

/// Splits a container into its header bytes and payload after checking the
/// framing.
pub fn split(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, Header, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CliError::format(path, "not a kpinr tensor container (bad magic)"));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let raw = bytes.get(12..12 + len).ok_or_else(|| CliError::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| CliError::format(path, format!("header: {e}")))?;
    if header.endianness != "little" {
        return Err(CliError::format(path, format!("unsupported endianness {:?}", header.endianness)));
    }
    if header.axes.len() != header.shape.len() {
        return Err(CliError::format(path, "axis names do not match the shape rank"));
    }
    Ok((raw.to_vec(), header, 12 + len))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(split(path, &bytes)?.1)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (_, header, start) = split(path, &bytes)?;
    let payload = &bytes[start..];
    let expected = header.shape.iter().product::<usize>() * header.dtype.size();
    if payload.len() != expected {
        return Err(CliError::format(path, format!("payload is {} bytes, shape needs {expected}", payload.len())));
    }
    if content_id(payload) != header.provenance.content_id {
        return Err(CliError::format(path, "payload does not match its content id"));
    }
    let data = TensorData::from_bytes(header.dtype, &header.shape, payload)
        .ok_or_else(|| CliError::format(path, "payload does not fit the shape"))?;
    Ok(Container { header, data })
}

pub const KSPACE_AXES: [&str; 4] = ["h", "w", "coil", "t"];
pub const MASK_AXES: [&str; 3] = ["h", "w", "t"];
pub const CSM_AXES: [&str; 3] = ["h", "w", "coil"];
pub const IMAGE_AXES: [&str; 3] = ["h", "w", "t"];

fn expect(path: &Path, c: &Container, dtype: DType, axes: &[&str]) -> Result<()> {
    if c.header.dtype != dtype || c.header.axes != axes {
        return Err(CliError::format(
            path,
            format!("expected {dtype:?} with axes {axes:?}, found {:?} with axes {:?}", c.header.dtype, c.header.axes),
        ));
    }
    Ok(())
}

pub fn kspace_data(ksp: &KSpaceVolume) -> (TensorData, TensorInfo) {
    let mut info = TensorInfo::new(&KSPACE_AXES);
    info.norm_scale = ksp.norm_scale;
    info.meta = ksp.meta.clone();
    (TensorData::Complex64(ksp.data().clone().into_dyn()), info)
}

pub fn read_kspace(path: &Path) -> Result<KSpaceVolume> {
    let c = read_container(path)?;
    expect(path, &c, DType::Complex64, &KSPACE_AXES)?;
    let TensorData::Complex64(a) = c.data else { unreachable!() };
    let a: Array4<Complex32> = a.into_dimensionality().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(KSpaceVolume::new(a)?.with_norm_scale(c.header.norm_scale)?.with_meta(c.header.meta))
}

pub fn mask_data(mask: &SamplingMask) -> (TensorData, TensorInfo) {
    let info = TensorInfo::new(&MASK_AXES)
        .with_meta("pattern", mask.pattern.as_str())
        .with_meta("acs_lines", mask.acs_lines)
        .with_meta("nominal_r", mask.nominal_r);
    (TensorData::Uint8(mask.mask().clone().into_dyn()), info)
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let c = read_container(path)?;
    expect(path, &c, DType::Uint8, &MASK_AXES)?;
    let meta = |k: &str| c.header.meta.get(k).cloned().ok_or_else(|| CliError::format(path, format!("mask meta lacks {k:?}")));
    let pattern: MaskPattern = meta("pattern")?.parse()?;
    let acs: usize = meta("acs_lines")?.parse().map_err(|_| CliError::format(path, "bad acs_lines"))?;
    let r: f64 = meta("nominal_r")?.parse().map_err(|_| CliError::format(path, "bad nominal_r"))?;
    let TensorData::Uint8(a) = c.data else { unreachable!() };
    let a: Array3<u8> = a.into_dimensionality().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(SamplingMask::from_raw(a, acs, pattern, r)?)
}

pub fn csm_data(csm: &CoilSensitivityMaps) -> (TensorData, TensorInfo) {
    let info = TensorInfo::new(&CSM_AXES).with_meta("source", csm.source.as_str());
    (TensorData::Complex64(csm.maps.clone().into_dyn()), info)
}

pub fn read_csm(path: &Path) -> Result<CoilSensitivityMaps> {
    let c = read_container(path)?;
    expect(path, &c, DType::Complex64, &CSM_AXES)?;
    let source = match c.header.meta.get("source").map(String::as_str) {
        Some("acs-estimated") => CsmSource::AcsEstimated,
        _ => CsmSource::GroundTruth,
    };
    let TensorData::Complex64(a) = c.data else { unreachable!() };
    let maps: Array3<Complex32> = a.into_dimensionality().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(CoilSensitivityMaps { maps, source })
}

pub fn image_data(img: &CineImageSeries) -> (TensorData, TensorInfo) {
    (TensorData::Complex64(img.data.clone().into_dyn()), TensorInfo::new(&IMAGE_AXES))
}

pub fn read_image(path: &Path) -> Result<CineImageSeries> {
    let c = read_container(path)?;
    expect(path, &c, DType::Complex64, &IMAGE_AXES)?;
    let TensorData::Complex64(a) = c.data else { unreachable!() };
    Ok(CineImageSeries { data: a.into_dimensionality().map_err(|e| CliError::format(path, e.to_string()))? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(data: TensorData, info: &TensorInfo) -> Container {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.kpt");
        let header = write_container(&p, &data, info).unwrap();
        let back = read_container(&p).unwrap();
        assert_eq!(back.header, header);
        back
    }

    #[test]
    fn all_dtypes_round_trip_bit_exactly() {
        let z = ArrayD::from_shape_fn(IxDyn(&[2, 3, 1]), |i| Complex32::new(i[1] as f32 - 0.5, f32::MIN_POSITIVE * i[0] as f32));
        let mut nanbox = ArrayD::from_elem(IxDyn(&[4]), -0.0f32);
        nanbox[1] = f32::from_bits(0x7fc0_1234);
        nanbox[2] = f32::INFINITY;
        let u = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |i| (i[0] * 2 + i[1]) as u8 * 40);
        let info3 = TensorInfo::new(&["a", "b", "c"]).with_provenance("abc", 9).with_meta("k", "v");
        match round_trip(TensorData::Complex64(z.clone()), &info3).data {
            TensorData::Complex64(b) => {
                assert!(b.iter().zip(z.iter()).all(|(p, q)| p.re.to_bits() == q.re.to_bits() && p.im.to_bits() == q.im.to_bits()))
            }
            _ => panic!(),
        }
        match round_trip(TensorData::Float32(nanbox.clone()), &TensorInfo::new(&["n"])).data {
            TensorData::Float32(b) => assert!(b.iter().zip(nanbox.iter()).all(|(p, q)| p.to_bits() == q.to_bits())),
            _ => panic!(),
        }
        assert_eq!(round_trip(TensorData::Uint8(u.clone()), &TensorInfo::new(&["a", "b"])).data, TensorData::Uint8(u));
    }

    #[test]
    fn header_bytes_reserialize_identically() {
        let mut info = TensorInfo::new(&["x"]).with_provenance("cfg", u64::MAX).with_meta("b", 1).with_meta("a", "two");
        info.norm_scale = 0.1 + 0.2;
        let (_, bytes) = encode(&TensorData::Float32(ArrayD::zeros(IxDyn(&[3]))), &info).unwrap();
        let (raw, header, _) = split(Path::new("mem"), &bytes).unwrap();
        assert_eq!(serde_json::to_vec(&header).unwrap(), raw);
        assert_eq!(header.norm_scale.to_bits(), (0.1f32 + 0.2).to_bits());
    }

    #[test]
    fn corruption_and_bad_framing_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.kpt");
        write_container(&p, &TensorData::Uint8(ArrayD::zeros(IxDyn(&[4]))), &TensorInfo::new(&["n"])).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() = 7;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_container(&p), Err(CliError::Format { .. })));
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(read_container(&p).is_err());
        fs::write(&p, b"garbage").unwrap();
        assert!(read_container(&p).is_err());
        assert!(encode(&TensorData::Uint8(ArrayD::zeros(IxDyn(&[4]))), &TensorInfo::new(&["a", "b"])).is_err());
    }

    #[test]
    fn domain_types_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ph = kpinr_core::generate_phantom(&kpinr_core::PhantomSpec { h: 8, w: 8, coils: 2, frames: 3, ..Default::default() }).unwrap();
        let mask = kpinr_core::make_uniform_mask(&kpinr_core::MaskSpec { acs_lines: 2, ..Default::default() }, 8, 8, 3).unwrap();
        let ksp = kpinr_core::normalize_kspace(&ph.ksp_full).unwrap();
        let p = dir.path().join("k.kpt");
        let (d, i) = kspace_data(&ksp);
        write_container(&p, &d, &i).unwrap();
        assert_eq!(read_kspace(&p).unwrap(), ksp);
        let (d, i) = mask_data(&mask);
        write_container(&p, &d, &i).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        assert!(read_kspace(&p).is_err());
        let (d, i) = csm_data(&ph.csm);
        write_container(&p, &d, &i).unwrap();
        assert_eq!(read_csm(&p).unwrap(), ph.csm);
        let (d, i) = image_data(&ph.image);
        write_container(&p, &d, &i).unwrap();
        assert_eq!(read_image(&p).unwrap(), ph.image);
    }

    proptest! {
        #[test]
        fn float_payloads_round_trip(bits in proptest::collection::vec(any::<u32>(), 1..40)) {
            let a = ArrayD::from_shape_vec(IxDyn(&[bits.len()]), bits.iter().map(|b| f32::from_bits(*b)).collect()).unwrap();
            let (_, bytes) = encode(&TensorData::Float32(a.clone()), &TensorInfo::new(&["n"])).unwrap();
            let (_, header, start) = split(Path::new("mem"), &bytes).unwrap();
            let back = TensorData::from_bytes(header.dtype, &header.shape, &bytes[start..]).unwrap();
            let TensorData::Float32(b) = back else { unreachable!() };
            prop_assert!(b.iter().zip(a.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
