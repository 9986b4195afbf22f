//! NIfTI-1 single-file (`n+1`) and paired (`ni1`, `.hdr`/`.img`) I/O.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Volume;
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const WRITE_VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

const ORIENT_START: usize = 252;
const ORIENT_END: usize = 328;

/// qform/sform block (header bytes 252..328), kept uninterpreted in
/// little-endian layout: two `i16` codes followed by eighteen `f32`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub bytes: [u8; ORIENT_END - ORIENT_START],
}

impl Orientation {
    fn from_header(h: &[u8], big_endian: bool) -> Self {
        let mut bytes = [0u8; ORIENT_END - ORIENT_START];
        bytes.copy_from_slice(&h[ORIENT_START..ORIENT_END]);
        if big_endian {
            bytes[0..2].reverse();
            bytes[2..4].reverse();
            for field in bytes[4..].chunks_mut(4) {
                field.reverse();
            }
        }
        Self { bytes }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(Error::at(path))?;
    if !is_gzip(&raw) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::TruncatedFile(format!("{}: {e}", path.display())))?;
    Ok(out)
}

fn image_path_for(header: &Path) -> PathBuf {
    let s = header.to_string_lossy();
    for (from, to) in [(".hdr.gz", ".img.gz"), (".hdr", ".img")] {
        if let Some(stem) = s.strip_suffix(from) {
            return PathBuf::from(format!("{stem}{to}"));
        }
    }
    header.with_extension("img")
}

struct Header {
    big_endian: bool,
    dims: [usize; 3],
    datatype: i16,
    spacing: [f64; 3],
    vox_offset: usize,
    slope: f64,
    inter: f64,
    single_file: bool,
    orientation: Orientation,
}

fn parse_header(path: &Path, h: &[u8]) -> Result<Header> {
    if h.len() < HEADER_SIZE {
        return Err(Error::TruncatedFile(format!(
            "{}: {} header bytes",
            path.display(),
            h.len()
        )));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&h[344..348]);
    let single_file = match &magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::BadMagic(magic)),
    };
    let big_endian = if LittleEndian::read_i32(&h[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&h[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::BadMagic(magic));
    };
    let i16_at = |o: usize| {
        if big_endian {
            BigEndian::read_i16(&h[o..o + 2])
        } else {
            LittleEndian::read_i16(&h[o..o + 2])
        }
    };
    let f32_at = |o: usize| {
        if big_endian {
            BigEndian::read_f32(&h[o..o + 4])
        } else {
            LittleEndian::read_f32(&h[o..o + 4])
        }
    };

    let ndim = i16_at(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::DimensionOverflow(ndim));
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let v = i16_at(42 + 2 * k);
        if v < 1 {
            return Err(Error::DimensionOverflow(v));
        }
        *d = v as usize;
    }
    let datatype = i16_at(70);
    if ![DT_UINT8, DT_INT16, DT_INT32, DT_FLOAT32, DT_FLOAT64].contains(&datatype) {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let spacing = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64];
    let vox = f32_at(108);
    if !(vox.is_finite() && vox >= 0.0) {
        return Err(Error::TruncatedFile(format!(
            "{}: vox_offset {vox}",
            path.display()
        )));
    }
    Ok(Header {
        big_endian,
        dims,
        datatype,
        spacing,
        vox_offset: vox as usize,
        slope: f32_at(112) as f64,
        inter: f32_at(116) as f64,
        single_file,
        orientation: Orientation::from_header(h, big_endian),
    })
}

fn decode_values(h: &Header, payload: &[u8], n: usize) -> Vec<f64> {
    macro_rules! decode {
        ($width:expr, $read:ident) => {
            payload[..n * $width]
                .chunks_exact($width)
                .map(|c| {
                    if h.big_endian {
                        BigEndian::$read(c) as f64
                    } else {
                        LittleEndian::$read(c) as f64
                    }
                })
                .collect()
        };
    }
    match h.datatype {
        DT_UINT8 => payload[..n].iter().map(|&b| b as f64).collect(),
        DT_INT16 => decode!(2, read_i16),
        DT_INT32 => decode!(4, read_i32),
        DT_FLOAT32 => decode!(4, read_f32),
        _ => decode!(8, read_f64),
    }
}

fn bytes_per_voxel(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        _ => 8,
    }
}

/// Reads a NIfTI-1 volume, gzip-compressed or not.
///
/// Only the first 3-D volume of a 4-D file is returned. Values are scaled
/// by `scl_slope`/`scl_inter` when the slope is nonzero.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_header(path, &bytes)?;
    let n: usize = h.dims.iter().product();
    let need = n * bytes_per_voxel(h.datatype);

    let image;
    let payload: &[u8] = if h.single_file {
        bytes.get(h.vox_offset..).unwrap_or(&[])
    } else {
        image = read_maybe_gz(&image_path_for(path))?;
        image.get(h.vox_offset..).unwrap_or(&[])
    };
    if payload.len() < need {
        return Err(Error::TruncatedFile(format!(
            "{}: {} of {need} payload bytes",
            path.display(),
            payload.len()
        )));
    }

    let mut data = decode_values(&h, payload, n);
    if h.slope != 0.0 && h.slope.is_finite() {
        for v in &mut data {
            *v = *v * h.slope + h.inter;
        }
    }
    let mut volume = Volume::new(h.dims, h.spacing, data)?;
    volume.orientation = Some(h.orientation);
    Ok(volume)
}

/// Writes a single-file little-endian NIfTI-1 volume, gzip-compressed when
/// the path ends in `.gz`.
///
/// The payload is float32 when every value survives the round trip through
/// `f32`, float64 otherwise.
pub fn write_nifti(volume: &Volume, path: &Path) -> Result<()> {
    for &d in &volume.dims {
        if d == 0 || d > i16::MAX as usize {
            return Err(Error::DimensionOverflow(d.min(i16::MAX as usize) as i16));
        }
    }
    let as_f32 = volume
        .data
        .iter()
        .all(|&v| (v as f32) as f64 == v || v.is_nan());
    let (datatype, bitpix) = if as_f32 { (DT_FLOAT32, 32) } else { (DT_FLOAT64, 64) };

    let mut buf = vec![0u8; WRITE_VOX_OFFSET];
    LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
    let dim = [3, volume.dims[0], volume.dims[1], volume.dims[2], 1, 1, 1, 1];
    for (k, &d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[40 + 2 * k..42 + 2 * k], d as i16);
    }
    LittleEndian::write_i16(&mut buf[70..72], datatype);
    LittleEndian::write_i16(&mut buf[72..74], bitpix);
    let pixdim = [
        1.0,
        volume.spacing[0] as f32,
        volume.spacing[1] as f32,
        volume.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (k, &p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[76 + 4 * k..80 + 4 * k], p);
    }
    LittleEndian::write_f32(&mut buf[108..112], WRITE_VOX_OFFSET as f32);
    // scl_slope stays 0 so values are read back unscaled.
    buf[123] = 2; // xyzt_units: millimetres
    if let Some(o) = &volume.orientation {
        buf[ORIENT_START..ORIENT_END].copy_from_slice(&o.bytes);
    }
    buf[344..348].copy_from_slice(b"n+1\0");

    buf.reserve(volume.data.len() * (bitpix as usize / 8));
    for &v in &volume.data {
        if as_f32 {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        let mut enc = GzEncoder::new(fs::File::create(path).map_err(Error::at(path))?, Compression::fast());
        enc.write_all(&buf)?;
        enc.finish()?;
    } else {
        fs::write(path, &buf).map_err(Error::at(path))?;
    }
    Ok(())
}
