//! Binary checkpoint container: little-endian, sectioned, self-describing.
//!
//! Layout:
//!
//! ```text
//! magic "DLAB" | format_version u32 | section_count u32
//! per section:
//!   name (u32 length + UTF-8 bytes)
//!   array_count u32
//!   per array: name | dtype u8 (1 = f32, 2 = f64) | ndim u8 | dims u64Ã—ndim | raw LE data
//!   meta_count u32
//!   per entry: key | tag u8 (1 = i64, 2 = f64, 3 = string) | payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DLAB";
pub const FORMAT_VERSION: u32 = 1;

/// One named array, preserving its float width.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
        }
    }

    /// View as f32 regardless of stored width.
    pub fn as_f32(&self) -> ArrayD<f32> {
        match self {
            ArrayData::F32(a) => a.clone(),
            ArrayData::F64(a) => a.mapv(|v| v as f32),
        }
    }
}

/// Scalar metadata value.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl MetaValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            MetaValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            MetaValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub arrays: BTreeMap<String, ArrayData>,
    pub meta: BTreeMap<String, MetaValue>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: BTreeMap<String, Section>,
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(input: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let b = read_exact(input, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let b = read_exact(input, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_str(input: &mut impl Read) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    String::from_utf8(read_exact(input, len)?)
        .map_err(|e| Error::Checkpoint(format!("invalid UTF-8 in name: {e}")))
}

/// Writes the container atomically (temp file + rename).
pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(container.sections.len() as u32).to_le_bytes())?;
        for (name, section) in &container.sections {
            write_str(&mut out, name)?;
            out.write_all(&(section.arrays.len() as u32).to_le_bytes())?;
            for (arr_name, data) in &section.arrays {
                write_str(&mut out, arr_name)?;
                match data {
                    ArrayData::F32(a) => {
                        out.write_all(&[1u8])?;
                        out.write_all(&[a.ndim() as u8])?;
                        for &d in a.shape() {
                            out.write_all(&(d as u64).to_le_bytes())?;
                        }
                        let std = a.as_standard_layout();
                        for &v in std.iter() {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                    ArrayData::F64(a) => {
                        out.write_all(&[2u8])?;
                        out.write_all(&[a.ndim() as u8])?;
                        for &d in a.shape() {
                            out.write_all(&(d as u64).to_le_bytes())?;
                        }
                        let std = a.as_standard_layout();
                        for &v in std.iter() {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
            out.write_all(&(section.meta.len() as u32).to_le_bytes())?;
            for (key, value) in &section.meta {
                write_str(&mut out, key)?;
                match value {
                    MetaValue::Int(v) => {
                        out.write_all(&[1u8])?;
                        out.write_all(&v.to_le_bytes())?;
                    }
                    MetaValue::Float(v) => {
                        out.write_all(&[2u8])?;
                        out.write_all(&v.to_le_bytes())?;
                    }
                    MetaValue::Str(s) => {
                        out.write_all(&[3u8])?;
                        write_str(&mut out, s)?;
                    }
                }
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads and validates a container.
pub fn read_container(path: &Path) -> Result<Container> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let magic = read_exact(&mut input, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint container (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let n_sections = read_u32(&mut input)? as usize;
    let mut container = Container::default();
    for _ in 0..n_sections {
        let name = read_str(&mut input)?;
        let mut section = Section::default();
        let n_arrays = read_u32(&mut input)? as usize;
        for _ in 0..n_arrays {
            let arr_name = read_str(&mut input)?;
            let dtype = read_exact(&mut input, 1)?[0];
            let ndim = read_exact(&mut input, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut input)? as usize);
            }
            let len: usize = dims.iter().product();
            if len > 1 << 30 {
                return Err(Error::Checkpoint(format!(
                    "section '{name}' array '{arr_name}': implausible element count {len}"
                )));
            }
            let data = match dtype {
                1 => {
                    let raw = read_exact(&mut input, len * 4)?;
                    let vals: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| {
                        Error::Checkpoint(format!("array '{arr_name}': {e}"))
                    })?)
                }
                2 => {
                    let raw = read_exact(&mut input, len * 8)?;
                    let vals: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| {
                        Error::Checkpoint(format!("array '{arr_name}': {e}"))
                    })?)
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "section '{name}' array '{arr_name}': unknown dtype tag {other}"
                    )))
                }
            };
            section.arrays.insert(arr_name, data);
        }
        let n_meta = read_u32(&mut input)? as usize;
        for _ in 0..n_meta {
            let key = read_str(&mut input)?;
            let tag = read_exact(&mut input, 1)?[0];
            let value = match tag {
                1 => MetaValue::Int(i64::from_le_bytes(read_exact(&mut input, 8)?.try_into().unwrap())),
                2 => MetaValue::Float(f64::from_le_bytes(
                    read_exact(&mut input, 8)?.try_into().unwrap(),
                )),
                3 => MetaValue::Str(read_str(&mut input)?),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "section '{name}' meta '{key}': unknown tag {other}"
                    )))
                }
            };
            section.meta.insert(key, value);
        }
        container.sections.insert(name, section);
    }
    Ok(container)
}
