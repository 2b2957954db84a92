//! Theoretical storage: binary entries at one bit, real scalars at `Q` bits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub m: u64,
    pub n: u64,
    pub k: u64,
    pub q_bits: u32,
    /// `Q·m·n`.
    pub dense_bits: u64,
    /// `k(m+n) + Q(m+k+n)`.
    pub diba_bits: u64,
    pub rho: f64,
    pub compression_factor: f64,
}

impl StorageReport {
    pub fn dense_bytes(&self) -> f64 {
        self.dense_bits as f64 / 8.0
    }

    pub fn diba_bytes(&self) -> f64 {
        self.diba_bits as f64 / 8.0
    }
}

pub fn storage_report(m: usize, n: usize, k: usize, q_bits: u32) -> Result<StorageReport> {
    if m == 0 || n == 0 || k == 0 {
        return Err(invalid(format!("dimensions must be >= 1, got m={m} n={n} k={k}")));
    }
    if q_bits == 0 {
        return Err(invalid("bits per scalar must be >= 1"));
    }
    let (m, n, k, q) = (m as u64, n as u64, k as u64, u64::from(q_bits));
    let dense_bits = q * m * n;
    let diba_bits = k * (m + n) + q * (m + k + n);
    Ok(StorageReport {
        m,
        n,
        k,
        q_bits,
        dense_bits,
        diba_bits,
        rho: diba_bits as f64 / dense_bits as f64,
        compression_factor: dense_bits as f64 / diba_bits as f64,
    })
}

/// Byte count of a dense `m × n` weight at `q_bits`, optionally with an FP32 bias of length `m`.
pub fn dense_component_bytes(m: usize, n: usize, q_bits: u32, include_bias: bool) -> u64 {
    let bits = q_bits as u64 * (m * n) as u64;
    bits.div_ceil(8) + bias_bytes(m, include_bias)
}

/// Byte count of a DiBA-replaced component, optionally with an FP32 bias of length `m`.
pub fn diba_component_bytes(m: usize, n: usize, k: usize, q_bits: u32, include_bias: bool) -> Result<u64> {
    let r = storage_report(m, n, k, q_bits)?;
    Ok(r.diba_bits.div_ceil(8) + bias_bytes(m, include_bias))
}

fn bias_bytes(m: usize, include_bias: bool) -> u64 {
    if include_bias {
        4 * m as u64
    } else {
        0
    }
}
