//! The factor bundle `Â = D1·B1·D2·B2·D3` and everything computed directly from it.

mod metrics;
mod storage;

pub use metrics::{snr_db, Snr, SNR_REPORT_CAP_DB};
pub use storage::{dense_component_bytes, diba_component_bytes, storage_report, StorageReport};

use crate::binmat::BitMatrix;
use crate::error::{invalid, shape, Result};
use crate::flops;
use crate::linalg::{DenseMatrix, Matrix, Real};

/// Diagonal-binary factors of an `m × n` matrix with intermediate width `k`.
///
/// Diagonals are stored as 32-bit reals; every product derived from them is
/// accumulated in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct DibaFactors {
    pub d1: Vec<f32>,
    pub b1: BitMatrix,
    pub d2: Vec<f32>,
    pub b2: BitMatrix,
    pub d3: Vec<f32>,
}

impl DibaFactors {
    pub fn new(d1: Vec<f32>, b1: BitMatrix, d2: Vec<f32>, b2: BitMatrix, d3: Vec<f32>) -> Result<Self> {
        let f = Self { d1, b1, d2, b2, d3 };
        f.validate()?;
        Ok(f)
    }

    /// Unit diagonals around the given binary factors.
    pub fn with_unit_diagonals(b1: BitMatrix, b2: BitMatrix) -> Result<Self> {
        let (m, k, n) = (b1.rows(), b1.cols(), b2.cols());
        Self::new(vec![1.0; m], b1, vec![1.0; k], b2, vec![1.0; n])
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k, n) = self.dims();
        if m == 0 || k == 0 || n == 0 {
            return Err(invalid(format!("factor dimensions must be >= 1, got m={m} k={k} n={n}")));
        }
        if self.b2.rows() != k || self.d2.len() != k {
            return Err(shape(format!(
                "inner dimension mismatch: B1 has {k} columns, B2 has {} rows, d2 has {} entries",
                self.b2.rows(),
                self.d2.len()
            )));
        }
        if self.d1.len() != m || self.d3.len() != n {
            return Err(shape(format!(
                "outer diagonals have lengths {} and {}, expected {m} and {n}",
                self.d1.len(),
                self.d3.len()
            )));
        }
        let finite = |d: &[f32]| d.iter().all(|x| x.is_finite());
        if !(finite(&self.d1) && finite(&self.d2) && finite(&self.d3)) {
            return Err(crate::Error::NonFinite("diagonal factor".into()));
        }
        Ok(())
    }

    /// `(m, k, n)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.b1.rows(), self.b1.cols(), self.b2.cols())
    }

    pub fn trainable_scalars(&self) -> usize {
        let (m, k, n) = self.dims();
        m + k + n
    }

    /// `Â_ij = d1_i · d3_j · Σ_ℓ d2_ℓ · B1_iℓ · B2_ℓj`.
    pub fn reconstruct(&self) -> Matrix<f64> {
        let right = self.right_factor::<f64>();
        let mut out = Matrix::<f64>::zeros(self.b1.rows(), self.b2.cols());
        for i in 0..self.b1.rows() {
            let d1 = f64::from(self.d1[i]);
            let row = out.row_mut(i);
            for l in self.b1.row_ones(i) {
                let c = d1 * f64::from(self.d2[l]);
                for (o, &r) in row.iter_mut().zip(right.row(l)) {
                    *o += c * r;
                }
            }
        }
        out
    }

    /// `D1·B1` as a dense `m × k` matrix.
    pub fn left_factor<T: Real>(&self) -> Matrix<T> {
        let mut g = self.b1.to_dense::<T>();
        g.scale_rows(&cast_vec(&self.d1));
        g
    }

    /// `B2·D3` as a dense `k × n` matrix.
    pub fn right_factor<T: Real>(&self) -> Matrix<T> {
        let mut g = self.b2.to_dense::<T>();
        g.scale_cols(&cast_vec(&self.d3));
        g
    }

    /// `y = D1·B1·D2·B2·D3·x`, evaluated right to left.
    ///
    /// Only the three diagonal scalings multiply; the binary factors are
    /// applied by selection and summation, so exactly `m + k + n` multiplies
    /// are recorded by [`crate::flops`].
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, k, n) = self.dims();
        if x.len() != n {
            return Err(shape(format!("input of length {} for a {m}x{n} factorization", x.len())));
        }
        let u: Vec<f64> = x.iter().zip(&self.d3).map(|(&x, &d)| flops::mul(f64::from(d), x)).collect();
        let v = self.b2.select_sum_right(&u)?;
        let w: Vec<f64> = v.iter().zip(&self.d2).map(|(&v, &d)| flops::mul(f64::from(d), v)).collect();
        debug_assert_eq!(w.len(), k);
        let z = self.b1.select_sum_right(&w)?;
        Ok(z.iter().zip(&self.d1).map(|(&z, &d)| flops::mul(f64::from(d), z)).collect())
    }

    /// Storage accounting for these factors at `q_bits` per real scalar.
    ///
    /// Factors with `k >= m·n` can always represent the target exactly and do
    /// not compress anything, so they are refused unless `force` is set.
    pub fn storage_report(&self, q_bits: u32, force: bool) -> Result<StorageReport> {
        let (m, k, n) = self.dims();
        if !force && k >= m * n {
            return Err(invalid(format!(
                "k={k} >= m*n={} is an embedding, not a compression regime (pass force to report anyway)",
                m * n
            )));
        }
        storage_report(m, n, k, q_bits)
    }
}

/// Factors with `k = m·n` that reproduce `a` exactly.
///
/// Channel `ℓ = i·n + j` selects row `i` through `B1` and column `j` through
/// `B2`, and carries `A_ij` in `d2`.
pub fn exact_embedding(a: &DenseMatrix) -> Result<DibaFactors> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(invalid("cannot embed an empty matrix"));
    }
    crate::linalg::require_finite(a, "target matrix")?;
    let k = m * n;
    let mut b1 = BitMatrix::zeros(m, k);
    let mut b2 = BitMatrix::zeros(k, n);
    for i in 0..m {
        for j in 0..n {
            let l = i * n + j;
            b1.set(i, l, true);
            b2.set(l, j, true);
        }
    }
    DibaFactors::new(vec![1.0; m], b1, a.as_slice().to_vec(), b2, vec![1.0; n])
}

pub(crate) fn cast_vec<T: Real>(d: &[f32]) -> Vec<T> {
    d.iter().map(|&x| T::from_f64(f64::from(x))).collect()
}
