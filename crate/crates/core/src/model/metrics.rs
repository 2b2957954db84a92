use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{frobenius_dist_sq, Matrix, Real};

/// Numeric stand-in for an infinite SNR in reports.
pub const SNR_REPORT_CAP_DB: f64 = 300.0;

/// Reconstruction SNR. `exact` is set when the error is identically zero, in
/// which case `db` is `+inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub db: f64,
    pub exact: bool,
}

impl Snr {
    /// The value written to CSV/JSON: infinite SNR is capped.
    pub fn reported_db(&self) -> f64 {
        if self.exact {
            SNR_REPORT_CAP_DB
        } else {
            self.db.min(SNR_REPORT_CAP_DB)
        }
    }
}

/// `10·log10(‖A‖² / ‖A − Â‖²)` with norms accumulated in 64-bit.
pub fn snr_db<T: Real, U: Real>(a: &Matrix<T>, ahat: &Matrix<U>) -> Result<Snr> {
    let signal = a.frobenius_sq();
    if signal == 0.0 {
        return Err(invalid("SNR is undefined for a zero target"));
    }
    let noise = frobenius_dist_sq(a, ahat)?;
    if noise == 0.0 {
        return Ok(Snr { db: f64::INFINITY, exact: true });
    }
    Ok(Snr { db: 10.0 * (signal / noise).log10(), exact: false })
}
