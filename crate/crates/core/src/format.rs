//! Binary tensor files.
//!
//! `QTSR` (dense tensor):
//!
//! ```text
//! "QTSR" | u8 version = 1 | u8 rank | rank × u32 dims | f32 data
//! ```
//!
//! `QQTS` (quantized matrix):
//!
//! ```text
//! "QQTS" | u8 bits | u8 granularity | u8 mode | u8 rank = 2 | 2 × u32 dims
//!        | groups × f64 deltas | rows·cols × i8 codes
//! ```
//!
//! All integers and floats are little-endian; data is row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::{BitWidth, Granularity, Mode, QuantSpec, QuantizedTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const QTSR_MAGIC: &[u8; 4] = b"QTSR";
pub const QQTS_MAGIC: &[u8; 4] = b"QQTS";
pub const QTSR_VERSION: u8 = 1;

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_dims(cur: &mut Cursor) -> Result<Vec<usize>> {
    let rank = cur.u8()? as usize;
    if !(1..=3).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} not in 1..=3")));
    }
    (0..rank).map(|_| Ok(cur.u32()? as usize)).collect()
}

fn write_dims(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * t.len());
    out.extend_from_slice(QTSR_MAGIC);
    out.push(QTSR_VERSION);
    write_dims(&mut out, t.shape())?;
    for v in t.data() {
        out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>> {
    let mut cur = Cursor::new(buf);
    if cur.take(4)? != QTSR_MAGIC {
        return Err(Error::Format("bad magic, expected QTSR".into()));
    }
    let version = cur.u8()?;
    if version != QTSR_VERSION {
        return Err(Error::Format(format!("unsupported QTSR version {version}")));
    }
    let shape = read_dims(&mut cur)?;
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| Ok(T::narrow(cur.f32()? as f64)))
        .collect::<Result<Vec<_>>>()?;
    cur.finish()?;
    Tensor::new(shape, data)
}

fn granularity_tag(g: Granularity) -> u8 {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerRow => 1,
        Granularity::PerColumn => 2,
    }
}

fn mode_tag(m: Mode) -> u8 {
    match m {
        Mode::Static => 0,
        Mode::Dynamic => 1,
    }
}

pub fn encode_quantized<T: Scalar>(q: &QuantizedTensor<T>) -> Result<Vec<u8>> {
    q.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(QQTS_MAGIC);
    out.push(q.spec.bits.bits());
    out.push(granularity_tag(q.spec.granularity));
    out.push(mode_tag(q.spec.mode));
    write_dims(&mut out, &q.shape)?;
    for d in &q.deltas {
        out.extend_from_slice(&d.widen().to_le_bytes());
    }
    out.extend(q.codes.iter().map(|&c| c as u8));
    Ok(out)
}

pub fn decode_quantized<T: Scalar>(buf: &[u8]) -> Result<QuantizedTensor<T>> {
    let mut cur = Cursor::new(buf);
    decode_quantized_from(&mut cur).and_then(|q| {
        cur.finish()?;
        Ok(q)
    })
}

fn decode_quantized_from<T: Scalar>(cur: &mut Cursor) -> Result<QuantizedTensor<T>> {
    if cur.take(4)? != QQTS_MAGIC {
        return Err(Error::Format("bad magic, expected QQTS".into()));
    }
    let bits = BitWidth::from_bits(cur.u8()?).map_err(|e| Error::Format(e.to_string()))?;
    let granularity = match cur.u8()? {
        0 => Granularity::PerTensor,
        1 => Granularity::PerRow,
        2 => Granularity::PerColumn,
        g => return Err(Error::Format(format!("unknown granularity tag {g}"))),
    };
    let mode = match cur.u8()? {
        0 => Mode::Static,
        1 => Mode::Dynamic,
        m => return Err(Error::Format(format!("unknown mode tag {m}"))),
    };
    let dims = read_dims(cur)?;
    let &[rows, cols] = dims.as_slice() else {
        return Err(Error::Format(format!("quantized block must be rank 2, got {dims:?}")));
    };
    let spec = QuantSpec::new(bits, granularity, mode);
    let groups = spec.group_count(rows, cols);
    let deltas = (0..groups)
        .map(|_| Ok(T::narrow(cur.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    let codes = cur.take(rows * cols)?.iter().map(|&b| b as i8).collect();
    let q = QuantizedTensor {
        shape: [rows, cols],
        codes,
        deltas,
        spec,
    };
    q.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(q)
}

/// Length of the QQTS block at the start of `buf`.
pub(crate) fn quantized_block_len(buf: &[u8]) -> Result<usize> {
    let mut cur = Cursor::new(buf);
    decode_quantized_from::<f64>(&mut cur)?;
    Ok(cur.pos)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_tensor(&buf)
}

pub fn write_quantized<T: Scalar>(path: impl AsRef<Path>, q: &QuantizedTensor<T>) -> Result<()> {
    fs::write(path, encode_quantized(q)?)?;
    Ok(())
}

pub fn read_quantized<T: Scalar>(path: impl AsRef<Path>) -> Result<QuantizedTensor<T>> {
    decode_quantized(&fs::read(path)?)
}
