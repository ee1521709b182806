//! Reader and writer for single-file NIfTI-1 volumes (`.nii`, `.nii.gz`).
//!
//! Only what the pipeline needs: 3-D scalar volumes (a trailing singleton
//! fourth dimension is accepted), the common integer and float datatypes,
//! `scl_slope`/`scl_inter` rescaling and either byte order. Orientation
//! matrices are written as a plain diagonal sform and ignored on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// On-disk voxel type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
    Int8,
    Uint16,
    Uint32,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
            Datatype::Int8 => 256,
            Datatype::Uint16 => 512,
            Datatype::Uint32 => 768,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            256 => Datatype::Int8,
            512 => Datatype::Uint16,
            768 => Datatype::Uint32,
            other => return Err(Error::Format(format!("unsupported datatype code {other}"))),
        })
    }

    fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 | Datatype::Int8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Int32 | Datatype::Uint32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// Voxels in `[x, y, z]` order plus the voxel size in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub voxels: Array3<f64>,
    pub spacing: [f64; 3],
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut inflated)
            .map_err(|e| Error::io(path, e))?;
        raw = inflated;
    }
    decode(&raw)
}

fn decode(raw: &[u8]) -> Result<NiftiImage> {
    if raw.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file is {} bytes, shorter than a header", raw.len())));
    }
    if LittleEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(raw)
    } else if BigEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(raw)
    } else {
        Err(Error::Format("sizeof_hdr is not 348 in either byte order".into()))
    }
}

fn decode_with<B: ByteOrder>(raw: &[u8]) -> Result<NiftiImage> {
    let magic = &raw[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::Format(format!("unrecognised magic {magic:?}")));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&raw[40 + 2 * i..42 + 2 * i]);
    }
    let ndim = dim[0] as usize;
    let trailing_singletons = (4..=ndim.min(7)).all(|i| dim[i] == 1);
    if !(3..=7).contains(&ndim) || (ndim > 3 && !trailing_singletons) {
        return Err(Error::Dimensionality(ndim));
    }
    let shape = [dim[1], dim[2], dim[3]];
    if shape.iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("non-positive extent in dim {dim:?}")));
    }
    let (nx, ny, nz) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
    let datatype = Datatype::from_code(B::read_i16(&raw[70..72]))?;
    let mut spacing = [0.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = B::read_f32(&raw[80 + 4 * i..84 + 4 * i]) as f64;
    }
    let vox_offset = B::read_f32(&raw[108..112]) as usize;
    let mut slope = B::read_f32(&raw[112..116]) as f64;
    let inter = B::read_f32(&raw[116..120]) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let count = nx * ny * nz;
    let offset = if magic == b"n+1\0" { vox_offset.max(HEADER_SIZE) } else { vox_offset };
    let needed = offset + count * datatype.bytes();
    if raw.len() < needed {
        return Err(Error::Format(format!(
            "voxel data truncated: need {needed} bytes, have {}",
            raw.len()
        )));
    }
    let mut cur = Cursor::new(&raw[offset..needed]);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let v = match datatype {
            Datatype::Uint8 => cur.read_u8().map(f64::from),
            Datatype::Int8 => cur.read_i8().map(f64::from),
            Datatype::Int16 => cur.read_i16::<B>().map(f64::from),
            Datatype::Uint16 => cur.read_u16::<B>().map(f64::from),
            Datatype::Int32 => cur.read_i32::<B>().map(f64::from),
            Datatype::Uint32 => cur.read_u32::<B>().map(f64::from),
            Datatype::Float32 => cur.read_f32::<B>().map(f64::from),
            Datatype::Float64 => cur.read_f64::<B>(),
        }
        .map_err(|e| Error::Format(e.to_string()))?;
        values.push(v * slope + inter);
    }
    let voxels = Array3::from_shape_vec((nx, ny, nz).f(), values)
        .map_err(|e| Error::Format(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok(NiftiImage { voxels, spacing })
}

/// Writes little-endian NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn write_nifti(path: &Path, voxels: &Array3<f64>, spacing: [f64; 3], datatype: Datatype) -> Result<()> {
    let bytes = encode(voxels, spacing, datatype)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn encode(voxels: &Array3<f64>, spacing: [f64; 3], datatype: Datatype) -> Result<Vec<u8>> {
    let (nx, ny, nz) = voxels.dim();
    for d in [nx, ny, nz] {
        if d > i16::MAX as usize {
            return Err(Error::Format(format!("extent {d} exceeds the NIfTI-1 limit")));
        }
    }
    let mut hdr = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut hdr[0..4], HEADER_SIZE as i32);
    hdr[38] = b'r';
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..72], datatype.code());
    LittleEndian::write_i16(&mut hdr[72..74], (datatype.bytes() * 8) as i16);
    let pixdim = [1.0f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..116], 1.0);
    hdr[123] = 2; // millimetres
    LittleEndian::write_i16(&mut hdr[254..256], 1);
    for (row, offset) in [280usize, 296, 312].into_iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[offset + 4 * row..offset + 4 * row + 4], spacing[row] as f32);
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut out = hdr;
    out.reserve(nx * ny * nz * datatype.bytes());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = voxels[[x, y, z]];
                let res = match datatype {
                    Datatype::Uint8 => out.write_u8(v.round().clamp(0.0, 255.0) as u8),
                    Datatype::Int8 => out.write_i8(v.round().clamp(-128.0, 127.0) as i8),
                    Datatype::Int16 => out.write_i16::<LittleEndian>(v.round() as i16),
                    Datatype::Uint16 => out.write_u16::<LittleEndian>(v.round() as u16),
                    Datatype::Int32 => out.write_i32::<LittleEndian>(v.round() as i32),
                    Datatype::Uint32 => out.write_u32::<LittleEndian>(v.round() as u32),
                    Datatype::Float32 => out.write_f32::<LittleEndian>(v as f32),
                    Datatype::Float64 => out.write_f64::<LittleEndian>(v),
                };
                res.map_err(|e| Error::Format(e.to_string()))?;
            }
        }
    }
    Ok(out)
}
