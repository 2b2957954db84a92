//! Little-endian binary containers.
//!
//! | container | magic      | header after magic                         | payload |
//! |-----------|------------|--------------------------------------------|---------|
//! | matrix    | `DIBAMAT1` | version u16, element kind u16, rows u64, cols u64 | row-major f32 |
//! | factors   | `DIBAFAC1` | version u16, q_bits u16, m u64, k u64, n u64 | d1, B1, d2, B2, d3 |
//! | quantized | `DIBAQNT1` | version u16, bits u16, rows u64, cols u64   | row scales f32, packed codes |
//!
//! Bit matrices use the [`crate::binmat`] packing. Quantized codes are
//! `bits`-wide two's complement, packed LSB-first, each row padded to a byte.
//! The on-disk size of a factor container is larger than the theoretical
//! storage of [`crate::model::StorageReport`]: it adds the header and the row
//! padding of the bit matrices.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::baselines::QuantModel;
use crate::binmat::BitMatrix;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::DibaFactors;

pub const MATRIX_MAGIC: &[u8; 8] = b"DIBAMAT1";
pub const FACTOR_MAGIC: &[u8; 8] = b"DIBAFAC1";
pub const QUANT_MAGIC: &[u8; 8] = b"DIBAQNT1";
pub const VERSION: u16 = 1;
/// Element kind tag for 32-bit little-endian reals.
pub const ELEMENT_F32: u16 = 0;

pub const MATRIX_HEADER_LEN: u64 = 8 + 2 + 2 + 8 + 8;
pub const FACTOR_HEADER_LEN: u64 = 8 + 2 + 2 + 8 * 3;
pub const QUANT_HEADER_LEN: u64 = 8 + 2 + 2 + 8 + 8;

/// Factors together with the accounting precision they were written for.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorContainer {
    pub q_bits: u16,
    pub factors: DibaFactors,
}

/// Payload bytes of a factor container (excluding the header).
pub fn factor_payload_len(m: usize, k: usize, n: usize) -> u64 {
    let (m, k, n) = (m as u64, k as u64, n as u64);
    m * k.div_ceil(8) + k * n.div_ceil(8) + 4 * (m + k + n)
}

pub fn factor_container_len(m: usize, k: usize, n: usize) -> u64 {
    FACTOR_HEADER_LEN + factor_payload_len(m, k, n)
}

fn quant_row_bytes(cols: usize, bits: u8) -> usize {
    (cols * usize::from(bits)).div_ceil(8)
}

// ---------- writers ----------

pub fn write_matrix(mut w: impl Write, a: &DenseMatrix) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ELEMENT_F32.to_le_bytes())?;
    w.write_all(&(a.rows() as u64).to_le_bytes())?;
    w.write_all(&(a.cols() as u64).to_le_bytes())?;
    write_reals(&mut w, a.as_slice())
}

pub fn write_factors(mut w: impl Write, c: &FactorContainer) -> Result<()> {
    let f = &c.factors;
    f.validate()?;
    let (m, k, n) = f.dims();
    w.write_all(FACTOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&c.q_bits.to_le_bytes())?;
    for dim in [m, k, n] {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    write_reals(&mut w, &f.d1)?;
    w.write_all(f.b1.as_bytes())?;
    write_reals(&mut w, &f.d2)?;
    w.write_all(f.b2.as_bytes())?;
    write_reals(&mut w, &f.d3)
}

pub fn write_quant(mut w: impl Write, q: &QuantModel) -> Result<()> {
    let (rows, cols) = q.shape();
    let bits = q.bits();
    w.write_all(QUANT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u16::from(bits).to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    write_reals(&mut w, q.row_scales())?;
    let mask = (1u16 << bits) - 1;
    let mut row = vec![0u8; quant_row_bytes(cols, bits)];
    for i in 0..rows {
        row.fill(0);
        for (j, &c) in q.code_row(i).iter().enumerate() {
            let word = (c as i16 as u16) & mask;
            let bit = j * usize::from(bits);
            for b in 0..usize::from(bits) {
                if word >> b & 1 == 1 {
                    row[(bit + b) / 8] |= 1 << ((bit + b) % 8);
                }
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

fn write_reals(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

// ---------- readers ----------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated {what}: need {len} bytes, {} remain",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            self.pos -= 8;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format { offset: at as u64, message: format!("{what} {v} too large") })
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u16("version")?;
        if v != VERSION {
            self.pos -= 2;
            return Err(self.err(format!("unsupported version {v}, expected {VERSION}")));
        }
        Ok(())
    }

    fn reals(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let len = count.checked_mul(4).ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let bytes = self.take(len, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn bits(&mut self, rows: usize, cols: usize, what: &str) -> Result<BitMatrix> {
        let at = self.pos as u64;
        let len = rows
            .checked_mul(cols.div_ceil(8))
            .ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let bytes = self.take(len, what)?.to_vec();
        BitMatrix::from_packed(rows, cols, bytes)
            .map_err(|e| Error::Format { offset: at, message: format!("{what}: {e}") })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_all(mut r: impl Read) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn decode_matrix(buf: &[u8]) -> Result<DenseMatrix> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(MATRIX_MAGIC)?;
    c.version()?;
    let kind = c.u16("element kind")?;
    if kind != ELEMENT_F32 {
        c.pos -= 2;
        return Err(c.err(format!("unsupported element kind {kind}")));
    }
    let rows = c.dim("rows")?;
    let cols = c.dim("cols")?;
    let count = rows.checked_mul(cols).ok_or_else(|| c.err("matrix size overflows"))?;
    let data = c.reals(count, "matrix payload")?;
    c.finish()?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn decode_factors(buf: &[u8]) -> Result<FactorContainer> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(FACTOR_MAGIC)?;
    c.version()?;
    let q_bits = c.u16("q_bits")?;
    let m = c.dim("m")?;
    let k = c.dim("k")?;
    let n = c.dim("n")?;
    let d1 = c.reals(m, "d1")?;
    let b1 = c.bits(m, k, "B1")?;
    let d2 = c.reals(k, "d2")?;
    let b2 = c.bits(k, n, "B2")?;
    let d3 = c.reals(n, "d3")?;
    c.finish()?;
    let factors = DibaFactors::new(d1, b1, d2, b2, d3)
        .map_err(|e| Error::Format { offset: FACTOR_HEADER_LEN, message: e.to_string() })?;
    Ok(FactorContainer { q_bits, factors })
}

pub fn decode_quant(buf: &[u8]) -> Result<QuantModel> {
    let mut c = Cursor { buf, pos: 0 };
    c.magic(QUANT_MAGIC)?;
    c.version()?;
    let bits = c.u16("bits")?;
    if !crate::baselines::SUPPORTED_BITS.iter().any(|&b| u16::from(b) == bits) {
        c.pos -= 2;
        return Err(c.err(format!("unsupported code width {bits}")));
    }
    let bits = bits as u8;
    let rows = c.dim("rows")?;
    let cols = c.dim("cols")?;
    let scales = c.reals(rows, "row scales")?;
    let row_len = quant_row_bytes(cols, bits);
    let mut codes = Vec::with_capacity(rows * cols);
    let shift = 16 - u32::from(bits);
    for _ in 0..rows {
        let row = c.take(row_len, "codes")?;
        for j in 0..cols {
            let bit = j * usize::from(bits);
            let mut word = 0u16;
            for b in 0..usize::from(bits) {
                word |= u16::from(row[(bit + b) / 8] >> ((bit + b) % 8) & 1) << b;
            }
            // sign-extend from `bits`
            codes.push(((word << shift) as i16 >> shift) as i8);
        }
    }
    c.finish()?;
    QuantModel::new(bits, rows, cols, codes, scales)
        .map_err(|e| Error::Format { offset: QUANT_HEADER_LEN, message: e.to_string() })
}

pub fn read_matrix(r: impl Read) -> Result<DenseMatrix> {
    decode_matrix(&read_all(r)?)
}

pub fn read_factors(r: impl Read) -> Result<FactorContainer> {
    decode_factors(&read_all(r)?)
}

pub fn read_quant(r: impl Read) -> Result<QuantModel> {
    decode_quant(&read_all(r)?)
}

pub fn save_matrix(path: impl AsRef<Path>, a: &DenseMatrix) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, a)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    decode_matrix(&fs::read(path)?)
}

pub fn save_factors(path: impl AsRef<Path>, c: &FactorContainer) -> Result<()> {
    let mut buf = Vec::new();
    write_factors(&mut buf, c)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<FactorContainer> {
    decode_factors(&fs::read(path)?)
}

pub fn save_quant(path: impl AsRef<Path>, q: &QuantModel) -> Result<()> {
    let mut buf = Vec::new();
    write_quant(&mut buf, q)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_quant(path: impl AsRef<Path>) -> Result<QuantModel> {
    decode_quant(&fs::read(path)?)
}
