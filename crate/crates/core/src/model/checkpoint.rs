//! Chunked binary checkpoint format.
//!
//! ```text
//! magic     9 bytes  "MENETCKPT"
//! version   u32      currently 1
//! config    u32 length + UTF-8 `key = value` text
//! count     u32      number of records
//! record    u32 name length + UTF-8 name
//!           u8 dtype (1 = f64, 2 = u64)
//!           u32 rank + rank × u64 extents
//!           product(extents) × 8 bytes of little-endian values
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"MENETCKPT";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: RecordData::F64(t.data().to_vec()),
        }
    }

    pub fn u64(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![values.len()],
            data: RecordData::U64(values),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            RecordData::F64(v) => Tensor::new(&self.shape, v.clone()),
            RecordData::U64(_) => Err(Error::Checkpoint(format!(
                "record `{}` holds integers, not a tensor",
                self.name
            ))),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            RecordData::U64(v) => Ok(v),
            RecordData::F64(_) => Err(Error::Checkpoint(format!(
                "record `{}` holds floats, not integers",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordFile {
    pub config: String,
    pub records: Vec<Record>,
}

impl RecordFile {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too long ({n})")))
}

pub fn write_records(file: &RecordFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(len_u32(file.config.len(), "config")?)?;
    out.write_all(file.config.as_bytes())?;
    out.write_u32::<LittleEndian>(len_u32(file.records.len(), "record list")?)?;
    for rec in &file.records {
        out.write_u32::<LittleEndian>(len_u32(rec.name.len(), "record name")?)?;
        out.write_all(rec.name.as_bytes())?;
        let n: usize = rec.shape.iter().product();
        let (dtype, len) = match &rec.data {
            RecordData::F64(v) => (DTYPE_F64, v.len()),
            RecordData::U64(v) => (DTYPE_U64, v.len()),
        };
        if n != len {
            return Err(Error::Checkpoint(format!(
                "record `{}`: shape {:?} vs {len} values",
                rec.name, rec.shape
            )));
        }
        out.write_u8(dtype)?;
        out.write_u32::<LittleEndian>(len_u32(rec.shape.len(), "shape")?)?;
        for &e in &rec.shape {
            out.write_u64::<LittleEndian>(e as u64)?;
        }
        match &rec.data {
            RecordData::F64(v) => v.iter().try_for_each(|&x| out.write_f64::<LittleEndian>(x))?,
            RecordData::U64(v) => v.iter().try_for_each(|&x| out.write_u64::<LittleEndian>(x))?,
        }
    }
    Ok(out)
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

fn read_string(cur: &mut Cursor<&[u8]>, remaining: usize) -> Result<String> {
    let n = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if n > remaining {
        return Err(Error::Checkpoint("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; n];
    cur.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn read_records(bytes: &[u8]) -> Result<RecordFile> {
    let mut cur = Cursor::new(bytes);
    let remaining = |c: &Cursor<&[u8]>| bytes.len().saturating_sub(c.position() as usize);
    let mut magic = [0u8; 9];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let left = remaining(&cur);
    let config = read_string(&mut cur, left)?;
    let count = cur.read_u32::<LittleEndian>().map_err(truncated)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let left = remaining(&cur);
        let name = read_string(&mut cur, left)?;
        let dtype = cur.read_u8().map_err(truncated)?;
        let rank = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if rank * 8 > remaining(&cur) {
            return Err(Error::Checkpoint(format!("record `{name}`: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.read_u64::<LittleEndian>().map_err(truncated)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= remaining(&cur)))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: payload exceeds file")))?;
        let data = match dtype {
            DTYPE_F64 => RecordData::F64(
                (0..n)
                    .map(|_| cur.read_f64::<LittleEndian>())
                    .collect::<std::io::Result<_>>()
                    .map_err(truncated)?,
            ),
            DTYPE_U64 => RecordData::U64(
                (0..n)
                    .map(|_| cur.read_u64::<LittleEndian>())
                    .collect::<std::io::Result<_>>()
                    .map_err(truncated)?,
            ),
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        records.push(Record { name, shape, data });
    }
    if remaining(&cur) != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(RecordFile { config, records })
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
