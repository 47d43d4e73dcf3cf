//! Dense, dtype-tagged tensors and the `KFT1` binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "KFT1"
//! dtype   u8       0 = f32, 1 = f16
//! ndim    u32
//! extents ndim * u64
//! data    product(extents) * size_of(dtype), row-major
//! ```
//!
//! f16 payloads are carried as raw 16-bit patterns and never reinterpreted,
//! so a read/write round trip is bit-exact for every value including NaNs
//! and subnormals.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"KFT1";

/// Upper bound on `ndim` accepted by the reader.
const MAX_NDIM: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        })
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: shape must be non-empty with every extent >= 1")]
    InvalidShape(Vec<usize>),
    #[error("bad magic bytes {0:?}, expected \"KFT1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated tensor payload: {0}")]
    Truncated(&'static str),
    #[error("tensor header declares {0} dimensions (max {MAX_NDIM})")]
    TooManyDims(u32),
    #[error("element count overflows for shape {0:?}")]
    Overflow(Vec<u64>),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

/// Row-major dense tensor.
///
/// Equality via `PartialEq` follows IEEE semantics (NaN != NaN); use
/// [`Tensor::bit_eq`] for bit-exact comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn checked_numel(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Overflow(shape.iter().map(|&d| d as u64).collect()))
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            storage: Storage::F32(data),
        })
    }

    pub fn from_f16(shape: Vec<usize>, data: Vec<f16>) -> Result<Self, TensorError> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            storage: Storage::F16(data),
        })
    }

    /// Builds a tensor of `dtype` from f32 values, rounding to nearest-even
    /// when narrowing to f16.
    pub fn from_f32_as(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        match dtype {
            DType::F32 => Self::from_f32(shape, data),
            DType::F16 => Self::from_f16(shape, data.into_iter().map(f16::from_f32).collect()),
        }
    }

    pub fn zeros(dtype: DType, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = checked_numel(&shape)?;
        Self::from_f32_as(dtype, shape, vec![0.0; n])
    }

    pub fn dtype(&self) -> DType {
        match self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        match &self.storage {
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::F32(v) => Some(v),
            Storage::F16(_) => None,
        }
    }

    pub fn as_f16(&self) -> Option<&[f16]> {
        match &self.storage {
            Storage::F16(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    /// Element `i` widened to f32.
    pub fn get_f32(&self, i: usize) -> f32 {
        match &self.storage {
            Storage::F32(v) => v[i],
            Storage::F16(v) => v[i].to_f32(),
        }
    }

    /// All elements widened to f32 (exact for f16).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// Overwrites element `i` with `value`, rounding to the tensor dtype.
    pub fn set_f32(&mut self, i: usize, value: f32) {
        match &mut self.storage {
            Storage::F32(v) => v[i] = value,
            Storage::F16(v) => v[i] = f16::from_f32(value),
        }
    }

    /// Bit-exact equality: same dtype, shape and raw element bits.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.storage, &other.storage) {
            (Storage::F32(a), Storage::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Storage::F16(a), Storage::F16(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F16(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Serializes `t` in `KFT1` format.
pub fn write_tensor<W: Write>(t: &Tensor, mut out: W) -> Result<(), TensorError> {
    out.write_all(MAGIC)?;
    out.write_all(&[t.dtype().code()])?;
    out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    match &t.storage {
        Storage::F32(v) => {
            let mut buf = Vec::with_capacity(v.len() * 4);
            for x in v {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Storage::F16(v) => {
            let mut buf = Vec::with_capacity(v.len() * 2);
            for x in v {
                buf.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorError::Truncated(what),
        _ => TensorError::Io(e),
    })
}

/// Parses one `KFT1` tensor from `input`.
pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let mut code = [0u8; 1];
    read_exact_or(&mut input, &mut code, "dtype")?;
    let dtype = DType::from_code(code[0]).ok_or(TensorError::UnknownDtype(code[0]))?;

    let mut word = [0u8; 4];
    read_exact_or(&mut input, &mut word, "ndim")?;
    let ndim = u32::from_le_bytes(word);
    if ndim > MAX_NDIM {
        return Err(TensorError::TooManyDims(ndim));
    }
    let mut extents = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut dword = [0u8; 8];
        read_exact_or(&mut input, &mut dword, "extents")?;
        extents.push(u64::from_le_bytes(dword));
    }
    let shape: Vec<usize> = extents
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<Result<_, _>>()
        .map_err(|_| TensorError::Overflow(extents.clone()))?;
    let n = checked_numel(&shape)?;
    let nbytes = n
        .checked_mul(dtype.size_in_bytes())
        .ok_or_else(|| TensorError::Overflow(extents.clone()))?;

    // Read incrementally so a hostile header cannot force a huge allocation
    // before the payload is shown to exist.
    let mut payload = Vec::new();
    let got = input.by_ref().take(nbytes as u64).read_to_end(&mut payload)?;
    if got != nbytes {
        return Err(TensorError::Truncated("payload"));
    }

    match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            Tensor::from_f32(shape, data)
        }
        DType::F16 => {
            let data = payload
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                .collect();
            Tensor::from_f16(shape, data)
        }
    }
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a tensor file, rejecting trailing bytes after the payload.
pub fn load_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(TensorError::Io(io::Error::new(
            io::ErrorKind::InvalidData,
            "trailing bytes after tensor payload",
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &Tensor) -> Tensor {
        let mut buf = Vec::new();
        write_tensor(t, &mut buf).unwrap();
        read_tensor(buf.as_slice()).unwrap()
    }

    #[test]
    fn f32_zeros_roundtrip() {
        let t = Tensor::zeros(DType::F32, vec![2, 2]).unwrap();
        let back = roundtrip(&t);
        assert!(t.bit_eq(&back));
        assert_eq!(back.shape(), &[2, 2]);
    }

    #[test]
    fn f16_subnormals_roundtrip_bit_exact() {
        // smallest subnormal, a mid subnormal, negative zero, NaN payload
        let bits = [0x0001u16, 0x03ff, 0x8000, 0x7e01, 0x0200];
        let t = Tensor::from_f16(vec![5], bits.iter().map(|&b| f16::from_bits(b)).collect()).unwrap();
        let back = roundtrip(&t);
        let got: Vec<u16> = back.as_f16().unwrap().iter().map(|x| x.to_bits()).collect();
        assert_eq!(got, bits);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"KFT1");
        assert_eq!(buf[4], 0);
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[9..17], &3u64.to_le_bytes());
        assert_eq!(&buf[17..21], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 4 + 1 + 4 + 8 + 12);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let t = Tensor::zeros(DType::F32, vec![2, 2]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(buf.as_slice()), Err(TensorError::BadMagic(_))));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let t = Tensor::zeros(DType::F32, vec![1]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf[4] = 7;
        assert!(matches!(read_tensor(buf.as_slice()), Err(TensorError::UnknownDtype(7))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::zeros(DType::F16, vec![4, 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(
            read_tensor(buf.as_slice()),
            Err(TensorError::Truncated("payload"))
        ));
        assert!(matches!(read_tensor(&buf[..6]), Err(TensorError::Truncated("ndim"))));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 0], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::from_f32(vec![], vec![1.0]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch {
                expected: 6,
                actual: 5,
                ..
            })
        ));
    }

    #[test]
    fn f16_narrowing_rounds_to_nearest_even() {
        // 1 + 2^-11 is exactly halfway between 1 and 1 + 2^-10; ties go to even (1.0).
        let t = Tensor::from_f32_as(DType::F16, vec![1], vec![1.0 + 2f32.powi(-11)]).unwrap();
        assert_eq!(t.get_f32(0), 1.0);
    }
}
