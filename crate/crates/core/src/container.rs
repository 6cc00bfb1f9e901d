//! Little-endian binary container of named arrays shared by the template,
//! dataset, pose-pool and checkpoint files.
//!
//! Each file starts with a three-byte magic made of a two-letter kind and a
//! one-digit version (`BT1`, `DS1`, `PP1`, `CK1`). Arrays are stored as:
//!
//! ```text
//! u16 name_len | name bytes | u8 dtype (0 = f64, 1 = f32, 2 = u64)
//! u8 rank | u64 dims[rank] | data (little-endian)
//! ```

use std::io::{self, Read, Write};

use flowpose_tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {kind} version: expected {expected}, found {found}")]
    VersionMismatch {
        kind: String,
        expected: char,
        found: char,
    },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch in record {record}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        record: usize,
        stored: u32,
        computed: u32,
    },
    #[error("missing array `{0}`")]
    Missing(String),
    #[error("array `{name}` has shape {got:?}, expected {expected:?}")]
    ArrayShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("array `{name}` has the wrong element type")]
    DType { name: String },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated
        } else {
            FormatError::Io(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    /// Stores `t` narrowed to single precision.
    pub fn f32(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn u64(name: &str, values: &[u64]) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![values.len()],
            data: ArrayData::U64(values.to_vec()),
        }
    }

    /// Floating-point contents widened to an `f64` tensor.
    pub fn to_tensor(&self) -> Result<Tensor, FormatError> {
        let data = match &self.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::U64(_) => return Err(FormatError::DType { name: self.name.clone() }),
        };
        Tensor::new(&self.shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub fn as_u64(&self) -> Result<&[u64], FormatError> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(FormatError::DType { name: self.name.clone() }),
        }
    }
}

pub fn write_magic(w: &mut impl Write, magic: &str) -> io::Result<()> {
    debug_assert_eq!(magic.len(), 3);
    w.write_all(magic.as_bytes())
}

/// Read and check a three-byte magic such as `DS1`.
pub fn read_magic(r: &mut impl Read, magic: &str) -> Result<(), FormatError> {
    let mut buf = [0u8; 3];
    r.read_exact(&mut buf)?;
    let expected = magic.as_bytes();
    if buf == expected {
        return Ok(());
    }
    if buf[..2] == expected[..2] {
        return Err(FormatError::VersionMismatch {
            kind: magic[..2].to_string(),
            expected: expected[2] as char,
            found: buf[2] as char,
        });
    }
    Err(FormatError::BadMagic {
        expected: magic.to_string(),
        found: String::from_utf8_lossy(&buf).into_owned(),
    })
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn read_string(r: &mut impl Read) -> Result<String, FormatError> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| FormatError::Malformed("string is not UTF-8".into()))
}

pub fn write_array(w: &mut impl Write, a: &NamedArray) -> io::Result<()> {
    w.write_all(&(a.name.len() as u16).to_le_bytes())?;
    w.write_all(a.name.as_bytes())?;
    let dtype = match a.data {
        ArrayData::F64(_) => 0u8,
        ArrayData::F32(_) => 1,
        ArrayData::U64(_) => 2,
    };
    w.write_all(&[dtype, a.shape.len() as u8])?;
    for &d in &a.shape {
        write_u64(w, d as u64)?;
    }
    let mut bytes = Vec::with_capacity(a.data.len() * 8);
    match &a.data {
        ArrayData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    w.write_all(&bytes)
}

pub fn read_array(r: &mut impl Read) -> Result<NamedArray, FormatError> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| FormatError::Malformed("array name is not UTF-8".into()))?;
    r.read_exact(&mut b2)?;
    let (dtype, rank) = (b2[0], b2[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        0 | 2 => 8,
        1 => 4,
        other => return Err(FormatError::Malformed(format!("unknown dtype {other} for `{name}`"))),
    };
    let mut bytes = vec![0u8; n.checked_mul(width).ok_or(FormatError::Malformed("array too large".into()))?];
    r.read_exact(&mut bytes)?;
    let data = match dtype {
        0 => ArrayData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => ArrayData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => ArrayData::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(NamedArray { name, shape, data })
}

/// Arrays keyed by name, as read back from a file section.
pub struct ArraySet(pub Vec<NamedArray>);

impl ArraySet {
    pub fn get(&self, name: &str) -> Result<&NamedArray, FormatError> {
        self.0
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| FormatError::Missing(name.to_string()))
    }

    pub fn optional(&self, name: &str) -> Option<&NamedArray> {
        self.0.iter().find(|a| a.name == name)
    }

    /// Floating-point array `name`, checked against `expected` when given.
    pub fn tensor(&self, name: &str, expected: Option<&[usize]>) -> Result<Tensor, FormatError> {
        let a = self.get(name)?;
        if let Some(exp) = expected {
            if a.shape != exp {
                return Err(FormatError::ArrayShape {
                    name: name.to_string(),
                    expected: exp.to_vec(),
                    got: a.shape.clone(),
                });
            }
        }
        a.to_tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_and_magic_errors_are_distinguished() {
        let err = read_magic(&mut &b"DS2"[..], "DS1").unwrap_err();
        assert!(matches!(err, FormatError::VersionMismatch { found: '2', .. }));
        let err = read_magic(&mut &b"XYZ"[..], "DS1").unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { .. }));
        let err = read_magic(&mut &b"DS"[..], "DS1").unwrap_err();
        assert!(matches!(err, FormatError::Truncated));
    }

    #[test]
    fn arrays_round_trip() {
        let arrays = vec![
            NamedArray::f64("a", &Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
            NamedArray::f32("b", &Tensor::from_fn(&[4], |i| i as f64 * 0.5)),
            NamedArray::u64("c", &[7, u64::MAX]),
        ];
        let mut buf = Vec::new();
        for a in &arrays {
            write_array(&mut buf, a).unwrap();
        }
        let mut r = &buf[..];
        for a in &arrays {
            assert_eq!(&read_array(&mut r).unwrap(), a);
        }
        assert!(r.is_empty());
        let cut = &buf[..buf.len() - 3];
        let mut r = cut;
        read_array(&mut r).unwrap();
        read_array(&mut r).unwrap();
        assert!(matches!(read_array(&mut r), Err(FormatError::Truncated)));
    }
}
