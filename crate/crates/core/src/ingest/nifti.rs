//! NIfTI-1 reading and writing.
//!
//! Supports single-file (`n+1`) and header/image pair (`ni1`) layouts, both
//! byte orders, and an optional gzip container detected from the stream's
//! magic bytes rather than the file extension.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{Orientation, Volume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NiftiDatatype {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl NiftiDatatype {
    pub const ALL: [NiftiDatatype; 8] = [
        NiftiDatatype::U8,
        NiftiDatatype::I8,
        NiftiDatatype::I16,
        NiftiDatatype::U16,
        NiftiDatatype::I32,
        NiftiDatatype::U32,
        NiftiDatatype::F32,
        NiftiDatatype::F64,
    ];

    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::U8 => 2,
            NiftiDatatype::I16 => 4,
            NiftiDatatype::I32 => 8,
            NiftiDatatype::F32 => 16,
            NiftiDatatype::F64 => 64,
            NiftiDatatype::I8 => 256,
            NiftiDatatype::U16 => 512,
            NiftiDatatype::U32 => 768,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.code() == code)
            .ok_or(Error::UnsupportedDatatype(code))
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::U8 | NiftiDatatype::I8 => 1,
            NiftiDatatype::I16 | NiftiDatatype::U16 => 2,
            NiftiDatatype::I32 | NiftiDatatype::U32 | NiftiDatatype::F32 => 4,
            NiftiDatatype::F64 => 8,
        }
    }
}

/// Typed voxel payload, x fastest (file order).
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    I32(Vec<i32>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn datatype(&self) -> NiftiDatatype {
        match self {
            VoxelData::U8(_) => NiftiDatatype::U8,
            VoxelData::I8(_) => NiftiDatatype::I8,
            VoxelData::I16(_) => NiftiDatatype::I16,
            VoxelData::U16(_) => NiftiDatatype::U16,
            VoxelData::I32(_) => NiftiDatatype::I32,
            VoxelData::U32(_) => NiftiDatatype::U32,
            VoxelData::F32(_) => NiftiDatatype::F32,
            VoxelData::F64(_) => NiftiDatatype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::U16(v) => v.len(),
            VoxelData::I32(v) => v.len(),
            VoxelData::U32(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::U16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::U32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F64(v) => v.clone(),
        }
    }

    fn decode<B: ByteOrder>(dtype: NiftiDatatype, bytes: &[u8]) -> VoxelData {
        let n = bytes.len() / dtype.bytes();
        match dtype {
            NiftiDatatype::U8 => VoxelData::U8(bytes.to_vec()),
            NiftiDatatype::I8 => VoxelData::I8(bytes.iter().map(|&b| b as i8).collect()),
            NiftiDatatype::I16 => {
                let mut v = vec![0; n];
                B::read_i16_into(bytes, &mut v);
                VoxelData::I16(v)
            }
            NiftiDatatype::U16 => {
                let mut v = vec![0; n];
                B::read_u16_into(bytes, &mut v);
                VoxelData::U16(v)
            }
            NiftiDatatype::I32 => {
                let mut v = vec![0; n];
                B::read_i32_into(bytes, &mut v);
                VoxelData::I32(v)
            }
            NiftiDatatype::U32 => {
                let mut v = vec![0; n];
                B::read_u32_into(bytes, &mut v);
                VoxelData::U32(v)
            }
            NiftiDatatype::F32 => {
                let mut v = vec![0.0; n];
                B::read_f32_into(bytes, &mut v);
                VoxelData::F32(v)
            }
            NiftiDatatype::F64 => {
                let mut v = vec![0.0; n];
                B::read_f64_into(bytes, &mut v);
                VoxelData::F64(v)
            }
        }
    }

    fn encode<B: ByteOrder>(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len() * self.datatype().bytes()];
        match self {
            VoxelData::U8(v) => out.copy_from_slice(v),
            VoxelData::I8(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = x as u8),
            VoxelData::I16(v) => B::write_i16_into(v, &mut out),
            VoxelData::U16(v) => B::write_u16_into(v, &mut out),
            VoxelData::I32(v) => B::write_i32_into(v, &mut out),
            VoxelData::U32(v) => B::write_u32_into(v, &mut out),
            VoxelData::F32(v) => B::write_f32_into(v, &mut out),
            VoxelData::F64(v) => B::write_f64_into(v, &mut out),
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// The header fields this toolkit reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub descrip: String,
    /// `true` for `n+1` (voxels follow the header), `false` for `ni1`.
    pub single_file: bool,
    pub endianness: Endianness,
}

impl NiftiHeader {
    pub fn spatial_shape(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::MalformedHeader(format!("dim[0] = {ndim} outside 1..=7")));
        }
        let mut shape = [1usize; 3];
        for i in 1..=ndim as usize {
            let d = self.dim[i];
            if d < 1 {
                return Err(Error::MalformedHeader(format!("dim[{i}] = {d}")));
            }
            if i <= 3 {
                shape[i - 1] = d as usize;
            }
        }
        Ok(shape)
    }

    pub fn spacing(&self) -> Result<[f32; 3]> {
        let s = [self.pixdim[1], self.pixdim[2], self.pixdim[3]].map(f32::abs);
        if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::MalformedHeader(format!(
                "invalid pixdim {:?}",
                &self.pixdim[1..4]
            )));
        }
        Ok(s)
    }

    /// Linear part of the voxel→world transform, following the usual
    /// precedence: sform, then qform, then bare pixdim scaling.
    pub fn linear_affine(&self) -> Result<[[f64; 3]; 3]> {
        if self.sform_code > 0 {
            return Ok([0, 1, 2].map(|r| [0, 1, 2].map(|c| self.srow[r][c] as f64)));
        }
        let spacing = [self.pixdim[1], self.pixdim[2], self.pixdim[3]].map(|v| v as f64);
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a2 = 1.0 - (b * b + c * c + d * d);
            let a = if a2 < -1e-6 {
                return Err(Error::CorruptAffine(format!("quaternion norm > 1 ({b}, {c}, {d})")));
            } else {
                a2.max(0.0).sqrt()
            };
            let r = [
                [
                    a * a + b * b - c * c - d * d,
                    2.0 * (b * c - a * d),
                    2.0 * (b * d + a * c),
                ],
                [
                    2.0 * (b * c + a * d),
                    a * a + c * c - b * b - d * d,
                    2.0 * (c * d - a * b),
                ],
                [
                    2.0 * (b * d - a * c),
                    2.0 * (c * d + a * b),
                    a * a + d * d - c * c - b * b,
                ],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = [spacing[0], spacing[1], spacing[2] * qfac];
            return Ok([0, 1, 2].map(|row| [0, 1, 2].map(|col| r[row][col] * scale[col])));
        }
        Ok([[spacing[0], 0.0, 0.0], [0.0, spacing[1], 0.0], [0.0, 0.0, spacing[2]]])
    }

    fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "header is {} bytes, expected {HEADER_SIZE}",
                bytes.len()
            )));
        }
        let endianness = if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
            Endianness::Little
        } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
            Endianness::Big
        } else {
            return Err(Error::MalformedHeader("sizeof_hdr is not 348".into()));
        };
        let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
        let single_file = match magic {
            b"n+1\0" => true,
            b"ni1\0" => false,
            other => {
                return Err(Error::MalformedHeader(format!(
                    "bad magic {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        match endianness {
            Endianness::Little => Ok(Self::parse_fields::<LittleEndian>(bytes, single_file, endianness)),
            Endianness::Big => Ok(Self::parse_fields::<BigEndian>(bytes, single_file, endianness)),
        }
    }

    fn parse_fields<B: ByteOrder>(bytes: &[u8], single_file: bool, endianness: Endianness) -> Self {
        let mut dim = [0i16; 8];
        B::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
        let mut pixdim = [0f32; 8];
        B::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
        let f = |off: usize| B::read_f32(&bytes[off..]);
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            B::read_f32_into(&bytes[offsets::SROW_X + 16 * r..offsets::SROW_X + 16 * (r + 1)], row);
        }
        let descrip_raw = &bytes[offsets::DESCRIP..offsets::DESCRIP + 80];
        let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
        NiftiHeader {
            dim,
            datatype: B::read_i16(&bytes[offsets::DATATYPE..]),
            pixdim,
            vox_offset: f(offsets::VOX_OFFSET),
            scl_slope: f(offsets::SCL_SLOPE),
            scl_inter: f(offsets::SCL_INTER),
            qform_code: B::read_i16(&bytes[offsets::QFORM_CODE..]),
            sform_code: B::read_i16(&bytes[offsets::SFORM_CODE..]),
            quatern: [0, 1, 2].map(|i| f(offsets::QUATERN_B + 4 * i)),
            qoffset: [0, 1, 2].map(|i| f(offsets::QOFFSET_X + 4 * i)),
            srow,
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
            single_file,
            endianness,
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self.endianness {
            Endianness::Little => self.encode_fields::<LittleEndian>(),
            Endianness::Big => self.encode_fields::<BigEndian>(),
        }
    }

    fn encode_fields<B: ByteOrder>(&self) -> Vec<u8> {
        let mut h = vec![0u8; HEADER_SIZE];
        B::write_i32(&mut h[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
        B::write_i16_into(&self.dim, &mut h[offsets::DIM..offsets::DIM + 16]);
        B::write_i16(&mut h[offsets::DATATYPE..], self.datatype);
        let bitpix = NiftiDatatype::from_code(self.datatype)
            .map(|d| d.bytes() * 8)
            .unwrap_or(0);
        B::write_i16(&mut h[offsets::BITPIX..], bitpix as i16);
        B::write_f32_into(&self.pixdim, &mut h[offsets::PIXDIM..offsets::PIXDIM + 32]);
        B::write_f32(&mut h[offsets::VOX_OFFSET..], self.vox_offset);
        B::write_f32(&mut h[offsets::SCL_SLOPE..], self.scl_slope);
        B::write_f32(&mut h[offsets::SCL_INTER..], self.scl_inter);
        h[offsets::XYZT_UNITS] = 2; // millimetres
        let d = self.descrip.as_bytes();
        let n = d.len().min(79);
        h[offsets::DESCRIP..offsets::DESCRIP + n].copy_from_slice(&d[..n]);
        B::write_i16(&mut h[offsets::QFORM_CODE..], self.qform_code);
        B::write_i16(&mut h[offsets::SFORM_CODE..], self.sform_code);
        for i in 0..3 {
            B::write_f32(&mut h[offsets::QUATERN_B + 4 * i..], self.quatern[i]);
            B::write_f32(&mut h[offsets::QOFFSET_X + 4 * i..], self.qoffset[i]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            B::write_f32_into(row, &mut h[offsets::SROW_X + 16 * r..offsets::SROW_X + 16 * (r + 1)]);
        }
        let magic: &[u8; 4] = if self.single_file { b"n+1\0" } else { b"ni1\0" };
        h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(magic);
        h
    }
}

/// A raw NIfTI image: header plus typed voxels in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub data: VoxelData,
}

impl NiftiImage {
    /// Wraps typed data in a fresh single-file header with an sform built from
    /// `orientation` and `spacing`.
    pub fn new(shape: [usize; 3], spacing: [f32; 3], orientation: Orientation, data: VoxelData) -> Result<Self> {
        if shape.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::MalformedHeader(format!("shape {shape:?} not representable")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::MalformedHeader(format!(
                "{} voxels for shape {shape:?}",
                data.len()
            )));
        }
        let aff = orientation.affine(spacing);
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for i in 0..3 {
            dim[i + 1] = shape[i] as i16;
        }
        let mut pixdim = [0f32; 8];
        pixdim[0] = 1.0;
        pixdim[1..4].copy_from_slice(&spacing);
        Ok(NiftiImage {
            header: NiftiHeader {
                dim,
                datatype: data.datatype().code(),
                pixdim,
                vox_offset: SINGLE_FILE_OFFSET as f32,
                scl_slope: 1.0,
                scl_inter: 0.0,
                qform_code: 0,
                sform_code: 1,
                quatern: [0.0; 3],
                qoffset: [0.0; 3],
                srow: [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| aff[r][c] as f32)),
                descrip: "planemeta".into(),
                single_file: true,
                endianness: Endianness::Little,
            },
            data,
        })
    }

    /// Reads a `.nii`, `.nii.gz`, or `.hdr`/`.img` pair.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_maybe_gz(path)?;
        let header = NiftiHeader::parse(&bytes)?;
        let dtype = NiftiDatatype::from_code(header.datatype)?;
        let shape = header.spatial_shape()?;
        let count: usize = shape.iter().product();
        let needed = count * dtype.bytes();
        let payload: Vec<u8>;
        let body: &[u8] = if header.single_file {
            let off = header.vox_offset;
            if !(off.is_finite() && off >= HEADER_SIZE as f32) {
                return Err(Error::MalformedHeader(format!("vox_offset {off}")));
            }
            let off = off as usize;
            bytes.get(off..off + needed).ok_or_else(|| {
                Error::MalformedHeader(format!("truncated: need {needed} voxel bytes at offset {off}"))
            })?
        } else {
            payload = read_maybe_gz(&image_path_for(path))?;
            let off = header.vox_offset.max(0.0) as usize;
            payload
                .get(off..off + needed)
                .ok_or_else(|| Error::MalformedHeader(format!("truncated image file: need {needed} bytes")))?
        };
        let data = match header.endianness {
            Endianness::Little => VoxelData::decode::<LittleEndian>(dtype, body),
            Endianness::Big => VoxelData::decode::<BigEndian>(dtype, body),
        };
        Ok(NiftiImage { header, data })
    }

    /// Writes the image; gzip is applied when the path ends in `.gz`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = self.header.clone();
        let payload = match header.endianness {
            Endianness::Little => self.data.encode::<LittleEndian>(),
            Endianness::Big => self.data.encode::<BigEndian>(),
        };
        if header.single_file {
            header.vox_offset = SINGLE_FILE_OFFSET as f32;
            let mut bytes = header.encode();
            bytes.extend_from_slice(&[0u8; 4]);
            bytes.extend_from_slice(&payload);
            write_maybe_gz(path, &bytes)
        } else {
            header.vox_offset = 0.0;
            write_maybe_gz(path, &header.encode())?;
            write_maybe_gz(&image_path_for(path), &payload)
        }
    }
}

fn image_path_for(hdr: &Path) -> PathBuf {
    let s = hdr.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else {
        hdr.with_extension("img")
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedHeader(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(bytes)
    };
    res.map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Orientation to assume instead of the header's affine.
    pub assume_orientation: Option<Orientation>,
}

/// Reads a NIfTI-1 file into a canonical, min-max normalized `Volume`.
///
/// Only the first 3D frame of 4D+ images is used. The returned
/// `source_id` is the file stem.
pub fn parse_nifti(path: &Path, opts: &ParseOptions) -> Result<Volume> {
    let img = NiftiImage::read(path)?;
    volume_from_image(&img, opts, source_id_for(path))
}

pub fn volume_from_image(img: &NiftiImage, opts: &ParseOptions, source_id: String) -> Result<Volume> {
    let shape = img.header.spatial_shape()?;
    let spacing = img.header.spacing()?;
    let orientation = match opts.assume_orientation {
        Some(o) => o,
        None => Orientation::from_affine(img.header.linear_affine()?)?,
    };
    let count: usize = shape.iter().product();
    let (slope, inter) = {
        let s = img.header.scl_slope as f64;
        let i = img.header.scl_inter as f64;
        if s == 0.0 || !s.is_finite() {
            (1.0, 0.0)
        } else {
            (s, if i.is_finite() { i } else { 0.0 })
        }
    };
    let mut values = img.data.to_f64();
    values.truncate(count);
    let scaled: Vec<f64> = values.into_iter().map(|v| v * slope + inter).collect();
    let normalized = normalize_f64(&scaled);
    let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), normalized)
        .expect("length checked against header")
        .as_standard_layout()
        .to_owned();
    let vol = Volume {
        voxels: arr,
        spacing,
        orientation,
        source_id,
    };
    Ok(vol.canonicalize())
}

fn normalize_f64(values: &[f64]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    let range = hi - lo;
    values
        .iter()
        .map(|&v| if v.is_finite() { ((v - lo) / range) as f32 } else { 0.0 })
        .collect()
}

fn source_id_for(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".hdr.gz", ".hdr"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Writes a volume. Float datatypes store intensities verbatim; integer
/// datatypes quantize [0,1] onto the type's non-negative range and record
/// the inverse scale in `scl_slope`.
pub fn serialize_nifti(volume: &Volume, path: &Path, datatype: NiftiDatatype) -> Result<()> {
    let file_order: Vec<f32> = volume.voxels().t().iter().copied().collect();
    let max_int = match datatype {
        NiftiDatatype::U8 => u8::MAX as f64,
        NiftiDatatype::I8 => i8::MAX as f64,
        NiftiDatatype::I16 => i16::MAX as f64,
        NiftiDatatype::U16 => u16::MAX as f64,
        NiftiDatatype::I32 => i32::MAX as f64,
        NiftiDatatype::U32 => u32::MAX as f64,
        NiftiDatatype::F32 | NiftiDatatype::F64 => 1.0,
    };
    let q = |v: f32| (v as f64 * max_int).round();
    let data = match datatype {
        NiftiDatatype::U8 => VoxelData::U8(file_order.iter().map(|&v| q(v) as u8).collect()),
        NiftiDatatype::I8 => VoxelData::I8(file_order.iter().map(|&v| q(v) as i8).collect()),
        NiftiDatatype::I16 => VoxelData::I16(file_order.iter().map(|&v| q(v) as i16).collect()),
        NiftiDatatype::U16 => VoxelData::U16(file_order.iter().map(|&v| q(v) as u16).collect()),
        NiftiDatatype::I32 => VoxelData::I32(file_order.iter().map(|&v| q(v) as i32).collect()),
        NiftiDatatype::U32 => VoxelData::U32(file_order.iter().map(|&v| q(v) as u32).collect()),
        NiftiDatatype::F32 => VoxelData::F32(file_order),
        NiftiDatatype::F64 => VoxelData::F64(file_order.iter().map(|&v| v as f64).collect()),
    };
    let mut img = NiftiImage::new(volume.shape(), volume.spacing(), volume.orientation(), data)?;
    img.header.scl_slope = (1.0 / max_int) as f32;
    img.write(path)
}
