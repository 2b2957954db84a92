//! Bit-packed 0/1 matrices.
//!
//! Layout: row-major, each row padded to a whole number of bytes, bits
//! least-significant-first within a byte. Padding bits are always zero. This
//! is also the on-disk layout used by [`crate::io`].
//!
//! Random matrices come from `ChaCha8Rng::seed_from_u64(seed)`; each row is
//! filled with `fill_bytes` and its padding masked off. `rand_chacha`
//! guarantees the stream is stable across releases, so a seed always maps to
//! the same bits.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};
use crate::linalg::{Matrix, Real};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bytes_per_row: usize,
    bits: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let bytes_per_row = cols.div_ceil(8);
        Self { rows, cols, bytes_per_row, bits: vec![0; rows * bytes_per_row] }
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::zeros(n, n);
        for i in 0..n {
            b.set(i, i, true);
        }
        b
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        let mut b = Self::zeros(rows, cols);
        b.bits.fill(0xff);
        b.clear_padding();
        b
    }

    /// Bernoulli(1/2) entries from a seeded generator.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(rows, cols, &mut rng)
    }

    pub fn random_with(rows: usize, cols: usize, rng: &mut impl RngCore) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("bit matrix dimensions must be >= 1, got {rows}x{cols}")));
        }
        let mut b = Self::zeros(rows, cols);
        for i in 0..rows {
            rng.fill_bytes(b.row_bytes_mut(i));
        }
        b.clear_padding();
        Ok(b)
    }

    /// Wraps a packed buffer, rejecting wrong lengths and nonzero padding.
    pub fn from_packed(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        let bytes_per_row = cols.div_ceil(8);
        if bits.len() != rows * bytes_per_row {
            return Err(shape(format!(
                "packed buffer of {} bytes for a {rows}x{cols} bit matrix (expected {})",
                bits.len(),
                rows * bytes_per_row
            )));
        }
        let b = Self { rows, cols, bytes_per_row, bits };
        if let Some(i) = (0..rows).find(|&i| b.row_padding(i) != 0) {
            return Err(invalid(format!("nonzero padding bits in row {i}")));
        }
        Ok(b)
    }

    /// Packs a 0/1 matrix; any nonzero entry counts as 1.
    pub fn from_dense<T: Real>(m: &Matrix<T>) -> Self {
        let mut b = Self::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for (j, &x) in m.row(i).iter().enumerate() {
                if x != T::zero() {
                    b.set(i, j, true);
                }
            }
        }
        b
    }

    pub fn to_dense<T: Real>(&self) -> Matrix<T> {
        Matrix::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bytes_per_row(&self) -> usize {
        self.bytes_per_row
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        (self.bits[i * self.bytes_per_row + j / 8] >> (j % 8)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        let byte = &mut self.bits[i * self.bytes_per_row + j / 8];
        let mask = 1u8 << (j % 8);
        if value {
            *byte |= mask;
        } else {
            *byte &= !mask;
        }
    }

    /// Toggles entry `(i, j)`.
    pub fn flip(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.rows || j >= self.cols {
            return Err(invalid(format!(
                "flip index ({i}, {j}) outside a {}x{} bit matrix",
                self.rows, self.cols
            )));
        }
        self.bits[i * self.bytes_per_row + j / 8] ^= 1u8 << (j % 8);
        Ok(())
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    pub fn row_bytes(&self, i: usize) -> &[u8] {
        &self.bits[i * self.bytes_per_row..(i + 1) * self.bytes_per_row]
    }

    fn row_bytes_mut(&mut self, i: usize) -> &mut [u8] {
        &mut self.bits[i * self.bytes_per_row..(i + 1) * self.bytes_per_row]
    }

    /// Column indices of the set bits of row `i`, ascending.
    pub fn row_ones(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_bytes(i).iter().enumerate().flat_map(|(bi, &byte)| {
            let mut rest = byte;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(bi * 8 + bit)
            })
        })
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in self.row_ones(i) {
                t.set(j, i, true);
            }
        }
        t
    }

    /// `y_i = Σ_{j : B_ij = 1} x_j`, additions only, ascending column order.
    pub fn select_sum_right<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(shape(format!(
                "vector of length {} for a bit matrix with {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                let mut acc = T::zero();
                for j in self.row_ones(i) {
                    acc += x[j];
                }
                acc
            })
            .collect())
    }

    /// `y_j = Σ_{i : B_ij = 1} x_i`, additions only, ascending row order.
    pub fn select_sum_left<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(shape(format!(
                "vector of length {} for a bit matrix with {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut y = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for j in self.row_ones(i) {
                y[j] += xi;
            }
        }
        Ok(y)
    }

    /// `B · M` for a dense `M` with `cols` rows, by row selection and summation.
    pub fn select_rows_sum<T: Real>(&self, m: &Matrix<T>) -> Result<Matrix<T>> {
        if m.rows() != self.cols {
            return Err(shape(format!(
                "{}x{} bit matrix times {}x{} dense matrix",
                self.rows,
                self.cols,
                m.rows(),
                m.cols()
            )));
        }
        let mut out = Matrix::zeros(self.rows, m.cols());
        for i in 0..self.rows {
            for j in self.row_ones(i) {
                for (o, &v) in out.row_mut(i).iter_mut().zip(m.row(j)) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    fn row_padding(&self, i: usize) -> u8 {
        let rem = self.cols % 8;
        if rem == 0 || self.bytes_per_row == 0 {
            return 0;
        }
        self.bits[(i + 1) * self.bytes_per_row - 1] & !((1u8 << rem) - 1)
    }

    fn clear_padding(&mut self) {
        let rem = self.cols % 8;
        if rem == 0 || self.bytes_per_row == 0 {
            return;
        }
        let mask = (1u8 << rem) - 1;
        for i in 0..self.rows {
            let last = (i + 1) * self.bytes_per_row - 1;
            self.bits[last] &= mask;
        }
    }
}
