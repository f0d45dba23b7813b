//! Volume data model and MAF file IO.
//!
//! Every volume is a dense 3D grid in x-fastest order: voxel (x, y, z)
//! lives at linear index x + nx*(y + ny*z). The MAF container is a fixed
//! magic, little-endian version and header-length words, a JSON header,
//! and the raw little-endian payload.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

/// Label id reserved for voxels where no atlas could be trusted.
/// Never valid in ground-truth or atlas inputs.
pub const UNASSIGNED: u16 = u16::MAX;

const MAGIC: [u8; 4] = *b"MAFV";
const VERSION: u32 = 1;

/// Grid dimensions. Each axis is at least 1 and the voxel count fits
/// the platform's addressable size; both are checked at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    nx: usize,
    ny: usize,
    nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Dims> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidValue(format!(
                "dims must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::InvalidValue(format!("voxel count {nx}x{ny}x{nz} overflows")))?;
        Ok(Dims { nx, ny, nz })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of (x, y, z), x-fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

fn check_len(dims: Dims, len: usize, what: &str) -> Result<()> {
    if len != dims.voxel_count() {
        return Err(Error::InvalidValue(format!(
            "{what}: data length {len} does not match dims {dims} ({} voxels)",
            dims.voxel_count()
        )));
    }
    Ok(())
}

/// Scalar image volume; every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl IntensityVolume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len(), "intensity volume")?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "intensity volume: non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_maf(path, self.dims, "f32", &payload_f32(&self.data))
    }
}

/// Segmentation volume of 16-bit label ids; 0 is background and
/// [`UNASSIGNED`] is produced only by plurality voting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u16>) -> Result<Self> {
        check_len(dims, data.len(), "label volume")?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn contains_unassigned(&self) -> bool {
        self.data.contains(&UNASSIGNED)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_maf(path, self.dims, "u16", &payload_u16(&self.data))
    }
}

/// Probability volume; every value lies in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len(), "probability volume")?;
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidValue(format!(
                "probability value outside [0, 1]: {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Constructor for internally computed data that is in range by
    /// construction (complements, sigmoid outputs, clamped noise).
    pub(crate) fn new_unchecked(dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.voxel_count());
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_maf(path, self.dims, "prob", &payload_f32(&self.data))
    }
}

/// Unnormalized non-negative error scores; values may exceed 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl ScoreVolume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        check_len(dims, data.len(), "score volume")?;
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue(format!(
                "score volume: negative or non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scores are stored with the plain "f32" dtype.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_maf(path, self.dims, "f32", &payload_f32(&self.data))
    }
}

/// Binary mask volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVolume {
    dims: Dims,
    data: Vec<bool>,
}

impl MaskVolume {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        check_len(dims, data.len(), "mask volume")?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<u8> = self.data.iter().map(|&b| b as u8).collect();
        write_maf(path, self.dims, "mask", &payload)
    }
}

/// A warped atlas image together with its segmentation.
#[derive(Clone, Debug)]
pub struct AtlasPair {
    pub image: IntensityVolume,
    pub labels: LabelVolume,
}

/// Per-voxel error values consumed by fusion and t-score analysis.
/// Implemented by both probability and score volumes.
pub trait ErrorField {
    fn dims(&self) -> Dims;
    fn values(&self) -> &[f32];
}

impl ErrorField for ProbabilityVolume {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn values(&self) -> &[f32] {
        &self.data
    }
}

impl ErrorField for ScoreVolume {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn values(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Serialize, Deserialize)]
struct MafHeader {
    dims: [usize; 3],
    dtype: String,
    order: String,
    endian: String,
}

/// A volume read back from a MAF file, tagged by the header dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32(IntensityVolume),
    U16(LabelVolume),
    Prob(ProbabilityVolume),
    Mask(MaskVolume),
}

impl Volume {
    pub fn dims(&self) -> Dims {
        match self {
            Volume::F32(v) => v.dims(),
            Volume::U16(v) => v.dims(),
            Volume::Prob(v) => v.dims(),
            Volume::Mask(v) => v.dims(),
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            Volume::F32(_) => "f32",
            Volume::U16(_) => "u16",
            Volume::Prob(_) => "prob",
            Volume::Mask(_) => "mask",
        }
    }

    pub fn into_intensity(self) -> Result<IntensityVolume> {
        match self {
            Volume::F32(v) => Ok(v),
            other => Err(Error::InvalidValue(format!(
                "expected an f32 volume, found dtype {}",
                other.dtype()
            ))),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::U16(v) => Ok(v),
            other => Err(Error::InvalidValue(format!(
                "expected a u16 label volume, found dtype {}",
                other.dtype()
            ))),
        }
    }

    pub fn into_prob(self) -> Result<ProbabilityVolume> {
        match self {
            Volume::Prob(v) => Ok(v),
            other => Err(Error::InvalidValue(format!(
                "expected a prob volume, found dtype {}",
                other.dtype()
            ))),
        }
    }

    pub fn into_mask(self) -> Result<MaskVolume> {
        match self {
            Volume::Mask(v) => Ok(v),
            other => Err(Error::InvalidValue(format!(
                "expected a mask volume, found dtype {}",
                other.dtype()
            ))),
        }
    }
}

fn payload_f32(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn payload_u16(data: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 2);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_maf(path: &Path, dims: Dims, dtype: &str, payload: &[u8]) -> Result<()> {
    let header = MafHeader {
        dims: [dims.nx, dims.ny, dims.nz],
        dtype: dtype.to_string(),
        order: "x-fastest".to_string(),
        endian: "little".to_string(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serialization is infallible");
    let mut out = Vec::with_capacity(12 + hjson.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write a volume in the MAF container; byte-for-byte deterministic
/// for a given volume.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    match volume {
        Volume::F32(v) => v.save(path),
        Volume::U16(v) => v.save(path),
        Volume::Prob(v) => v.save(path),
        Volume::Mask(v) => v.save(path),
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read any MAF volume; the header dtype selects the variant.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(
            path,
            "file shorter than the fixed 12-byte prefix",
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let Some(payload_start) = hlen.checked_add(12).filter(|&e| e <= bytes.len()) else {
        return Err(format_err(path, "header length exceeds file size"));
    };
    let header: MafHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| format_err(path, format!("invalid JSON header: {e}")))?;
    if header.order != "x-fastest" {
        return Err(format_err(
            path,
            format!("unsupported order {:?}", header.order),
        ));
    }
    if header.endian != "little" {
        return Err(format_err(
            path,
            format!("unsupported endianness {:?}", header.endian),
        ));
    }
    let dims = Dims::new(header.dims[0], header.dims[1], header.dims[2])
        .map_err(|e| format_err(path, e.to_string()))?;
    let payload = &bytes[payload_start..];
    let elem_size = match header.dtype.as_str() {
        "f32" | "prob" => 4,
        "u16" => 2,
        "mask" => 1,
        other => return Err(format_err(path, format!("unknown dtype {other:?}"))),
    };
    let expected = dims.voxel_count() * elem_size;
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!(
                "payload length mismatch: expected {expected} bytes for {dims} {}, found {}",
                header.dtype,
                payload.len()
            ),
        ));
    }
    let volume = match header.dtype.as_str() {
        "f32" => Volume::F32(
            IntensityVolume::new(dims, decode_f32(payload))
                .map_err(|e| format_err(path, e.to_string()))?,
        ),
        "prob" => Volume::Prob(
            ProbabilityVolume::new(dims, decode_f32(payload))
                .map_err(|e| format_err(path, e.to_string()))?,
        ),
        "u16" => Volume::U16(
            LabelVolume::new(dims, decode_u16(payload))
                .map_err(|e| format_err(path, e.to_string()))?,
        ),
        "mask" => {
            let mut data = Vec::with_capacity(payload.len());
            for (i, &b) in payload.iter().enumerate() {
                match b {
                    0 => data.push(false),
                    1 => data.push(true),
                    other => {
                        return Err(format_err(
                            path,
                            format!("mask byte must be 0 or 1, found {other} at index {i}"),
                        ))
                    }
                }
            }
            Volume::Mask(MaskVolume::new(dims, data).map_err(|e| format_err(path, e.to_string()))?)
        }
        _ => unreachable!(),
    };
    Ok(volume)
}

fn decode_f32(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn decode_u16(payload: &[u8]) -> Vec<u16> {
    payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
