//! Diagonal-binary (DiBA) matrix factorization `Â = D1·B1·D2·B2·D3`.
//!
//! - [`binmat`]: bit-packed 0/1 matrices with multiply-free products.
//! - [`model`]: the factor bundle, reconstruction, structured matvec, storage accounting, SNR.
//! - [`solver`]: the greedy alternating fitter.
//! - [`retune`]: diagonal-only retuning against a downstream objective.
//! - [`baselines`]: row-wise symmetric integer quantization.
//! - [`sweep`]: k-sweeps under a storage-ratio cap and their reports.
//! - [`io`]: binary containers.

pub mod baselines;
pub mod binmat;
mod error;
pub mod flops;
pub mod io;
pub mod linalg;
pub mod model;
pub mod retune;
pub mod solver;
pub mod sweep;

pub use binmat::BitMatrix;
pub use error::{Error, Result};
pub use linalg::{DenseMatrix, Matrix, Real};
pub use model::{exact_embedding, snr_db, storage_report, DibaFactors, Snr, StorageReport};
pub use solver::{fit, fit_from, SolverConfig, SolverTrace};
