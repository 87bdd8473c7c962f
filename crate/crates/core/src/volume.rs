//! Minimal single-file volume I/O (the 348-byte `n+1` header subset), tumour
//! compartment extraction and nearest-neighbour mask resampling.
//!
//! Only three datatypes are understood: `u8` (code 2), `i16` (code 4) and
//! `f32` (code 16). The affine comes from the `srow_*` fields when
//! `sform_code > 0`, otherwise it is `diag(spacing)`. Files whose first two
//! bytes are `1F 8B` are transparently gunzipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header bytes including the 4-byte extension flag; data starts here.
pub const HEADER_BYTES: usize = 352;
const SIZEOF_HDR: i32 = 348;

mod offsets {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    U8,
    I16,
    F32,
}

impl Dtype {
    pub fn code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Dtype::U8),
            4 => Ok(Dtype::I16),
            16 => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VolumeData {
    pub fn len(&self) -> usize {
        match self {
            VolumeData::U8(v) => v.len(),
            VolumeData::I16(v) => v.len(),
            VolumeData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VolumeData::U8(_) => Dtype::U8,
            VolumeData::I16(_) => Dtype::I16,
            VolumeData::F32(_) => Dtype::F32,
        }
    }

    #[inline]
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            VolumeData::U8(v) => v[i] as f64,
            VolumeData::I16(v) => v[i] as f64,
            VolumeData::F32(v) => v[i] as f64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get_f64(i)).collect()
    }
}

/// A 3-D grid with spacing (mm/voxel), a voxel-to-world affine and x-fastest data.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 4],
    pub data: VolumeData,
}

/// Geometry of a volume without its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 4],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Grid {
            dims,
            spacing,
            affine: diagonal_affine(spacing),
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn volume_f32(&self, data: Vec<f32>) -> Result<Volume> {
        let v = Volume {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
            data: VolumeData::F32(data),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn volume_u8(&self, data: Vec<u8>) -> Result<Volume> {
        let v = Volume {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
            data: VolumeData::U8(data),
        };
        v.validate()?;
        Ok(v)
    }
}

pub fn diagonal_affine(spacing: [f32; 3]) -> [[f32; 4]; 4] {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: VolumeData) -> Result<Self> {
        let v = Volume {
            dims,
            spacing,
            affine: diagonal_affine(spacing),
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros_u8(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        let n = dims.iter().product();
        Volume {
            dims,
            spacing,
            affine: diagonal_affine(spacing),
            data: VolumeData::U8(vec![0; n]),
        }
    }

    /// Same grid as `self`, new f32 data.
    pub fn with_f32(&self, data: Vec<f32>) -> Result<Self> {
        let v = Volume {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
            data: VolumeData::F32(data),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_f64(&self, data: &[f64]) -> Result<Self> {
        self.with_f32(data.iter().map(|&x| x as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grid(&self) -> Grid {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        let z = i / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::InvalidVolume(format!(
                "dims must be in 1..=32767, got {:?}",
                self.dims
            )));
        }
        let n: usize = self.dims.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidVolume(format!(
                "dims {:?} imply {} voxels but data has {}",
                self.dims,
                n,
                self.data.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidVolume(
                "affine last row must be (0,0,0,1)".into(),
            ));
        }
        if self.affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("affine has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn check_grid(&self, other: &Volume) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub fn count_nonzero(&self) -> usize {
        (0..self.len()).filter(|&i| self.data.get_f64(i) != 0.0).count()
    }
}

fn header_bytes(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_BYTES];
    h[0..4].copy_from_slice(&SIZEOF_HDR.to_le_bytes());
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for a in 0..3 {
        dim[a + 1] = v.dims[a] as i16;
    }
    for (k, d) in dim.iter().enumerate() {
        let o = offsets::DIM + 2 * k;
        h[o..o + 2].copy_from_slice(&d.to_le_bytes());
    }
    let dtype = v.data.dtype();
    h[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&dtype.code().to_le_bytes());
    let bitpix = (dtype.size() * 8) as i16;
    h[offsets::BITPIX..offsets::BITPIX + 2].copy_from_slice(&bitpix.to_le_bytes());
    let mut pixdim = [1f32; 8];
    pixdim[1..4].copy_from_slice(&v.spacing);
    for (k, p) in pixdim.iter().enumerate() {
        let o = offsets::PIXDIM + 4 * k;
        h[o..o + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]
        .copy_from_slice(&(HEADER_BYTES as f32).to_le_bytes());
    h[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&1f32.to_le_bytes());
    // mm + seconds
    h[offsets::XYZT_UNITS] = 2 | 8;
    h[offsets::QFORM_CODE..offsets::QFORM_CODE + 2].copy_from_slice(&0i16.to_le_bytes());
    h[offsets::SFORM_CODE..offsets::SFORM_CODE + 2].copy_from_slice(&1i16.to_le_bytes());
    for r in 0..3 {
        for c in 0..4 {
            let o = offsets::SROW_X + 16 * r + 4 * c;
            h[o..o + 4].copy_from_slice(&v.affine[r][c].to_le_bytes());
        }
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    h
}

/// Serialize a volume to bytes (uncompressed, little-endian).
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut out = header_bytes(v);
    out.reserve(v.len() * v.data.dtype().size());
    match &v.data {
        VolumeData::U8(d) => out.extend_from_slice(d),
        VolumeData::I16(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VolumeData::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, o: usize) -> i16 {
        let b = [self.buf[o], self.buf[o + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, o: usize) -> f32 {
        let b = [self.buf[o], self.buf[o + 1], self.buf[o + 2], self.buf[o + 3]];
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

/// Parse a volume from raw or gzip-compressed bytes.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let owned;
    let buf: &[u8] = if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse(format!("gzip: {e}")))?;
        owned = out;
        &owned
    } else {
        bytes
    };
    if buf.len() < SIZEOF_HDR as usize {
        let mut magic = [0u8; 4];
        let n = buf.len().min(4);
        magic[..n].copy_from_slice(&buf[..n]);
        return Err(Error::BadMagic(magic));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&buf[offsets::MAGIC..offsets::MAGIC + 4]);
    if &magic != b"n+1\0" {
        return Err(Error::BadMagic(magic));
    }
    let size_le = i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let endian = if size_le == SIZEOF_HDR {
        Endian::Little
    } else if i32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) == SIZEOF_HDR {
        Endian::Big
    } else {
        return Err(Error::Parse(format!("sizeof_hdr is {size_le}, expected 348")));
    };
    let r = Reader { buf, endian };

    let ndim = r.i16(offsets::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Parse(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if (a as i16) < ndim {
            let v = r.i16(offsets::DIM + 2 * (a + 1));
            if v <= 0 {
                return Err(Error::Parse(format!("dim[{}] = {v}", a + 1)));
            }
            *d = v as usize;
        }
    }
    for k in 4..=ndim as usize {
        if r.i16(offsets::DIM + 2 * k) > 1 {
            return Err(Error::Parse("more than 3 non-singleton dimensions".into()));
        }
    }
    let dtype = Dtype::from_code(r.i16(offsets::DATATYPE))?;
    let mut spacing = [1f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = r.f32(offsets::PIXDIM + 4 * (a + 1)).abs();
    }
    let sform_code = r.i16(offsets::SFORM_CODE);
    let affine = if sform_code > 0 {
        let mut aff = [[0f32; 4]; 4];
        for (row, out) in aff.iter_mut().take(3).enumerate() {
            for (c, cell) in out.iter_mut().enumerate() {
                *cell = r.f32(offsets::SROW_X + 16 * row + 4 * c);
            }
        }
        aff[3] = [0.0, 0.0, 0.0, 1.0];
        aff
    } else {
        diagonal_affine(spacing)
    };
    let vox_offset = r.f32(offsets::VOX_OFFSET);
    let offset = if vox_offset >= SIZEOF_HDR as f32 {
        vox_offset as usize
    } else {
        HEADER_BYTES
    };
    let n: usize = dims.iter().product();
    let expected = n * dtype.size();
    let found = buf.len().saturating_sub(offset);
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }
    let raw = &buf[offset..offset + expected];
    let data = match dtype {
        Dtype::U8 => VolumeData::U8(raw.to_vec()),
        Dtype::I16 => VolumeData::I16(
            raw.chunks_exact(2)
                .map(|b| match endian {
                    Endian::Little => i16::from_le_bytes([b[0], b[1]]),
                    Endian::Big => i16::from_be_bytes([b[0], b[1]]),
                })
                .collect(),
        ),
        Dtype::F32 => VolumeData::F32(
            raw.chunks_exact(4)
                .map(|b| {
                    let a = [b[0], b[1], b[2], b[3]];
                    match endian {
                        Endian::Little => f32::from_le_bytes(a),
                        Endian::Big => f32::from_be_bytes(a),
                    }
                })
                .collect(),
        ),
    };
    let v = Volume {
        dims,
        spacing,
        affine,
        data,
    };
    v.validate()?;
    Ok(v)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Write a volume; a `.gz` extension selects gzip compression.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Compartment {
    WT,
    NET,
    ET,
    OED,
}

impl Compartment {
    pub const ALL: [Compartment; 4] = [
        Compartment::WT,
        Compartment::NET,
        Compartment::ET,
        Compartment::OED,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Compartment::WT => "WT",
            Compartment::NET => "NET",
            Compartment::ET => "ET",
            Compartment::OED => "OED",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Compartment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Compartment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WT" => Ok(Compartment::WT),
            "NET" => Ok(Compartment::NET),
            "ET" => Ok(Compartment::ET),
            "OED" => Ok(Compartment::OED),
            other => Err(Error::Parse(format!("unknown compartment {other:?}"))),
        }
    }
}

/// Binary indicator volume for one compartment. Data is always `u8` in {0,1}.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentMask {
    pub compartment: Compartment,
    pub volume: Volume,
}

impl CompartmentMask {
    pub fn new(compartment: Compartment, volume: Volume) -> Result<Self> {
        let bits = match &volume.data {
            VolumeData::U8(d) => d.clone(),
            other => (0..other.len())
                .map(|i| {
                    let x = other.get_f64(i);
                    if x == 0.0 {
                        Ok(0u8)
                    } else if x == 1.0 {
                        Ok(1u8)
                    } else {
                        Err(Error::InvalidVolume(format!("mask value {x} is not 0/1")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?,
        };
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidVolume("mask values must be 0 or 1".into()));
        }
        Ok(CompartmentMask {
            compartment,
            volume: Volume {
                data: VolumeData::U8(bits),
                ..volume
            },
        })
    }

    pub fn bits(&self) -> &[u8] {
        match &self.volume.data {
            VolumeData::U8(d) => d,
            _ => unreachable!("mask data is always u8"),
        }
    }

    pub fn count(&self) -> usize {
        self.bits().iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits().iter().all(|&b| b == 0)
    }
}

/// Maps integer labels to the three primary compartments; WT is always derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap(pub BTreeMap<i64, Compartment>);

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap(BTreeMap::from([
            (1, Compartment::NET),
            (2, Compartment::OED),
            (4, Compartment::ET),
        ]))
    }
}

impl LabelMap {
    /// Parse `label=COMPARTMENT` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("label map line {}: missing '='", lineno + 1)))?;
            let label: i64 = k.trim().parse().map_err(|_| {
                Error::Parse(format!("label map line {}: {k:?} is not an integer", lineno + 1))
            })?;
            let comp: Compartment = v.parse()?;
            if comp == Compartment::WT {
                return Err(Error::Parse("WT is derived and cannot be mapped".into()));
            }
            if label == 0 {
                return Err(Error::Parse("label 0 is background".into()));
            }
            map.insert(label, comp);
        }
        Ok(LabelMap(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, label: i64) -> Option<Compartment> {
        self.0.get(&label).copied()
    }
}

fn label_at(data: &VolumeData, i: usize) -> Result<i64> {
    match data {
        VolumeData::U8(v) => Ok(v[i] as i64),
        VolumeData::I16(v) => Ok(v[i] as i64),
        VolumeData::F32(v) => {
            let x = v[i];
            if x.fract() != 0.0 || !x.is_finite() {
                Err(Error::InvalidVolume(format!("non-integer label {x}")))
            } else {
                Ok(x as i64)
            }
        }
    }
}

/// Split a label volume into `[WT, NET, ET, OED]` masks (in [`Compartment::ALL`] order).
pub fn extract_compartments(labels: &Volume, label_map: &LabelMap) -> Result<[CompartmentMask; 4]> {
    labels.validate()?;
    let n = labels.len();
    let mut bits = [vec![0u8; n], vec![0u8; n], vec![0u8; n], vec![0u8; n]];
    for i in 0..n {
        let l = label_at(&labels.data, i)?;
        if l == 0 {
            continue;
        }
        let comp = label_map.get(l).ok_or(Error::UnknownLabel(l))?;
        bits[comp.position()][i] = 1;
        bits[Compartment::WT.position()][i] = 1;
    }
    let make = |c: Compartment, b: Vec<u8>| CompartmentMask {
        compartment: c,
        volume: Volume {
            dims: labels.dims,
            spacing: labels.spacing,
            affine: labels.affine,
            data: VolumeData::U8(b),
        },
    };
    let [wt, net, et, oed] = bits;
    Ok([
        make(Compartment::WT, wt),
        make(Compartment::NET, net),
        make(Compartment::ET, et),
        make(Compartment::OED, oed),
    ])
}

/// Source index whose centre is nearest to target voxel `t`'s centre; ties go low.
#[inline]
fn pullback(t: usize, src: usize, dst: usize) -> usize {
    let num = (2 * t as i64 + 1) * src as i64 - 2 * dst as i64;
    let den = 2 * dst as i64;
    let q = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
    q.clamp(0, src as i64 - 1) as usize
}

pub fn resample_mask(m: &CompartmentMask, target_dims: [usize; 3]) -> Result<CompartmentMask> {
    if target_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidParameter(format!(
            "target dims must be positive, got {target_dims:?}"
        )));
    }
    let src = &m.volume;
    if src.dims == target_dims {
        return Ok(m.clone());
    }
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..target_dims[a])
                .map(|t| pullback(t, src.dims[a], target_dims[a]))
                .collect()
        })
        .collect();
    let bits = m.bits();
    let mut out = Vec::with_capacity(target_dims.iter().product());
    for z in 0..target_dims[2] {
        for y in 0..target_dims[1] {
            let row = src.dims[0] * (maps[1][y] + src.dims[1] * maps[2][z]);
            out.extend(maps[0].iter().map(|&x| bits[row + x]));
        }
    }
    let mut spacing = [0f32; 3];
    let mut affine = src.affine;
    for a in 0..3 {
        let ratio = src.dims[a] as f32 / target_dims[a] as f32;
        spacing[a] = src.spacing[a] * ratio;
        let shift = 0.5 * ratio - 0.5;
        for row in affine.iter_mut().take(3) {
            row[3] += row[a] * shift;
        }
        for row in affine.iter_mut().take(3) {
            row[a] *= ratio;
        }
    }
    Ok(CompartmentMask {
        compartment: m.compartment,
        volume: Volume {
            dims: target_dims,
            spacing,
            affine,
            data: VolumeData::U8(out),
        },
    })
}
