//! Row-wise symmetric integer post-training quantization and scale-only retuning.
//!
//! Codes lie in `[-(2^(b-1) - 1), 2^(b-1) - 1]` (the most negative two's
//! complement value is unused so the grid is symmetric). Rounding is half
//! away from zero.

use crate::error::{invalid, shape, Result};
use crate::linalg::{DenseMatrix, Matrix};
use crate::retune::{descend, loss_curve_csv, CalibrationBatch, RetuneConfig};

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    bits: u8,
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    row_scales: Vec<f32>,
}

/// Largest code magnitude for `bits`.
pub fn max_code(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!("unsupported code width {bits}; expected one of {SUPPORTED_BITS:?}")))
    }
}

/// Rounds half away from zero and clamps into the symmetric range.
pub fn quantize_value(x: f64, qmax: i32) -> i8 {
    (x.round() as i64).clamp(-(qmax as i64), qmax as i64) as i8
}

impl QuantModel {
    pub fn new(bits: u8, rows: usize, cols: usize, codes: Vec<i8>, row_scales: Vec<f32>) -> Result<Self> {
        check_bits(bits)?;
        if codes.len() != rows * cols || row_scales.len() != rows {
            return Err(shape(format!(
                "{} codes and {} scales for a {rows}x{cols} model",
                codes.len(),
                row_scales.len()
            )));
        }
        let qmax = max_code(bits);
        if let Some(c) = codes.iter().find(|&&c| i32::from(c).abs() > qmax) {
            return Err(invalid(format!("code {c} outside ±{qmax}")));
        }
        for (i, &s) in row_scales.iter().enumerate() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(invalid(format!("row {i} has scale {s}")));
            }
            if s == 0.0 && codes[i * cols..(i + 1) * cols].iter().any(|&c| c != 0) {
                return Err(invalid(format!("row {i} has zero scale but nonzero codes")));
            }
        }
        Ok(Self { bits, rows, cols, codes, row_scales })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn code_row(&self, i: usize) -> &[i8] {
        &self.codes[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_scales(&self) -> &[f32] {
        &self.row_scales
    }

    /// `Â_ij = s_i · code_ij`.
    pub fn dequantize(&self) -> DenseMatrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            (f64::from(self.row_scales[i]) * f64::from(self.codes[i * self.cols + j])) as f32
        })
    }

    fn codes_f64(&self) -> Matrix<f64> {
        Matrix::from_fn(self.rows, self.cols, |i, j| f64::from(self.codes[i * self.cols + j]))
    }

    pub fn storage_bytes(&self, include_bias: bool) -> u64 {
        quant_storage_bytes(self.rows, self.cols, self.bits, include_bias, 32)
    }
}

/// Per row: `s_i = max_j |A_ij| / (2^(b-1) - 1)`, `code_ij = round(A_ij / s_i)`.
pub fn quantize_rowwise(a: &DenseMatrix, bits: u8) -> Result<QuantModel> {
    check_bits(bits)?;
    crate::linalg::require_finite(a, "matrix to quantize")?;
    let qmax = max_code(bits);
    let (rows, cols) = a.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = a.row(i);
        let max_abs = row.iter().fold(0.0f64, |m, &x| m.max(f64::from(x).abs()));
        if max_abs == 0.0 {
            codes.extend(std::iter::repeat(0).take(cols));
            scales.push(0.0);
            continue;
        }
        // A·qmax/max|A| keeps grid points exact where A/s would not
        codes.extend(row.iter().map(|&x| quantize_value(f64::from(x) * f64::from(qmax) / max_abs, qmax)));
        scales.push((max_abs / f64::from(qmax)) as f32);
    }
    QuantModel::new(bits, rows, cols, codes, scales)
}

pub fn dequantize(q: &QuantModel) -> DenseMatrix {
    q.dequantize()
}

/// Codes at `bits` each (rounded up to whole bytes), one scale of
/// `scale_bits` per row, and optionally an FP32 bias per row.
pub fn quant_storage_bytes(m: usize, n: usize, bits: u8, include_bias: bool, scale_bits: u32) -> u64 {
    let (m, n) = (m as u64, n as u64);
    let codes = (m * n * u64::from(bits)).div_ceil(8);
    let scales = (m * u64::from(scale_bits)).div_ceil(8);
    codes + scales + if include_bias { 4 * m } else { 0 }
}

#[derive(Clone, Debug)]
pub struct ScaleRetuneOutcome {
    pub model: QuantModel,
    /// Learned log-scale multipliers of the best iterate.
    pub log_multipliers: Vec<f64>,
    pub losses: Vec<(usize, f64)>,
    pub best_step: usize,
}

impl ScaleRetuneOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0].1
    }

    pub fn loss_curve_csv(&self) -> String {
        loss_curve_csv(&self.losses)
    }
}

/// Output-matching loss of the dequantized model with row scales `s ⊙ exp(u)`.
pub fn scale_loss_and_grad(q: &QuantModel, u: &[f64], batches: &[CalibrationBatch]) -> Result<(f64, Vec<f64>)> {
    let codes = q.codes_f64();
    let products: Vec<Matrix<f64>> = batches.iter().map(|b| codes.matmul(&b.x)).collect::<Result<_>>()?;
    scale_objective(q, u, batches, &products)
}

fn scale_objective(
    q: &QuantModel,
    u: &[f64],
    batches: &[CalibrationBatch],
    products: &[Matrix<f64>],
) -> Result<(f64, Vec<f64>)> {
    let weight = 1.0 / batches.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; q.rows];
    for (batch, cx) in batches.iter().zip(products) {
        if batch.y_target.shape() != cx.shape() {
            return Err(shape(format!("target is {:?}, output is {:?}", batch.y_target.shape(), cx.shape())));
        }
        for i in 0..q.rows {
            let s = f64::from(q.row_scales[i]) * u[i].exp();
            for (&p, &y) in cx.row(i).iter().zip(batch.y_target.row(i)) {
                let r = s * p - y;
                loss += 0.5 * r * r * weight;
                grad[i] += r * s * p * weight;
            }
        }
    }
    Ok((loss, grad))
}

/// Retunes one log-scale multiplier per row with the integer codes frozen.
pub fn scale_retune(q: &QuantModel, batches: &[CalibrationBatch], cfg: &RetuneConfig) -> Result<ScaleRetuneOutcome> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(invalid("scale retuning needs at least one calibration batch"));
    }
    let codes = q.codes_f64();
    let products: Vec<Matrix<f64>> = batches.iter().map(|b| codes.matmul(&b.x)).collect::<Result<_>>()?;
    let descent = descend(vec![0.0; q.rows], cfg, |u| scale_objective(q, u, batches, &products))?;
    let scales = q
        .row_scales
        .iter()
        .zip(&descent.best_params)
        .map(|(&s, &u)| (f64::from(s) * u.exp()) as f32)
        .collect();
    let model = QuantModel::new(q.bits, q.rows, q.cols, q.codes.clone(), scales)?;
    Ok(ScaleRetuneOutcome {
        model,
        log_multipliers: descent.best_params,
        losses: descent.losses,
        best_step: descent.best_step,
    })
}
