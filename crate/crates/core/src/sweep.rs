//! Intermediate-dimension sweeps under a storage-ratio cap.

pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::DenseMatrix;
use crate::model::{snr_db, storage_report, DibaFactors};
use crate::solver::{self, SolverConfig, SolverTrace};

pub const DEFAULT_KS: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];
pub const DEFAULT_CAP: f64 = 0.75;
pub const DEFAULT_Q_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepStatus {
    Completed,
    SkippedCap,
    Failed,
}

/// One row of a sweep report. `snr_db`, `iters` and `flips` are only present
/// for completed runs; an exact reconstruction reports the capped SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub matrix_id: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub snr_db: Option<f64>,
    pub iters: Option<usize>,
    pub flips: Option<usize>,
    pub status: SweepStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub ks: Vec<usize>,
    pub q_bits: u32,
    pub cap: f64,
    /// Template for each run; its `k` is overwritten.
    pub solver: SolverConfig,
    /// Worker threads across k values; 1 runs serially.
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            q_bits: DEFAULT_Q_BITS,
            cap: DEFAULT_CAP,
            solver: SolverConfig::new(DEFAULT_KS[0]),
            jobs: 1,
        }
    }
}

pub fn sweep(a: &DenseMatrix, matrix_id: &str, opts: &SweepOptions) -> Result<Vec<SweepRecord>> {
    sweep_with(a, matrix_id, opts, solver::fit)
}

/// Like [`sweep`] with a caller-supplied fitting routine.
pub fn sweep_with<F>(a: &DenseMatrix, matrix_id: &str, opts: &SweepOptions, fit: F) -> Result<Vec<SweepRecord>>
where
    F: Fn(&DenseMatrix, &SolverConfig) -> Result<(DibaFactors, SolverTrace)> + Sync,
{
    if opts.ks.is_empty() {
        return Err(invalid("sweep needs at least one k"));
    }
    if !(opts.cap > 0.0) {
        return Err(invalid(format!("storage cap must be > 0, got {}", opts.cap)));
    }
    let mut ks = opts.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    // validate all k up front so a bad list fails before any solver work
    let rhos: Vec<f64> = ks
        .iter()
        .map(|&k| storage_report(a.rows(), a.cols(), k, opts.q_bits).map(|r| r.rho))
        .collect::<Result<_>>()?;

    let run = |(&k, &rho): (&usize, &f64)| -> SweepRecord {
        let mut rec = SweepRecord {
            matrix_id: matrix_id.to_string(),
            m: a.rows(),
            n: a.cols(),
            k,
            rho,
            snr_db: None,
            iters: None,
            flips: None,
            status: SweepStatus::SkippedCap,
        };
        if rho > opts.cap {
            return rec;
        }
        let cfg = SolverConfig { k, ..opts.solver.clone() };
        let outcome = fit(a, &cfg).and_then(|(f, trace)| Ok((snr_db(a, &f.reconstruct())?, trace)));
        match outcome {
            Ok((snr, trace)) => {
                rec.snr_db = Some(snr.reported_db());
                rec.iters = Some(trace.iterations.len());
                rec.flips = Some(trace.total_flips());
                rec.status = SweepStatus::Completed;
            }
            Err(e) => {
                log::warn!("{matrix_id} k={k} failed: {e}");
                rec.status = SweepStatus::Failed;
            }
        }
        rec
    };

    if opts.jobs <= 1 {
        return Ok(ks.iter().zip(&rhos).map(run).collect());
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| invalid(format!("cannot start {} workers: {e}", opts.jobs)))?;
    Ok(pool.install(|| ks.par_iter().zip(rhos.par_iter()).map(run).collect()))
}

/// Sweeps several matrices; records come back ordered by (matrix id, k).
pub fn sweep_many(matrices: &[(String, DenseMatrix)], opts: &SweepOptions) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::new();
    for (id, a) in matrices {
        out.extend(sweep(a, id, opts)?);
    }
    out.sort_by(|x, y| x.matrix_id.cmp(&y.matrix_id).then(x.k.cmp(&y.k)));
    Ok(out)
}

pub const CSV_HEADER: &str = "matrix_id,m,n,k,rho,snr_db,iters,flips,status";

pub fn to_csv(records: &[SweepRecord]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory csv write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8");
    format!("{CSV_HEADER}\n{body}")
}

pub fn to_json(records: &[SweepRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| invalid(format!("bad csv header: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(invalid(format!("unexpected csv header {header:?}")));
    }
    r.deserialize().map(|rec| rec.map_err(|e| invalid(format!("bad csv record: {e}")))).collect()
}

pub fn parse_json(text: &str) -> Result<Vec<SweepRecord>> {
    serde_json::from_str(text).map_err(|e| invalid(format!("bad json report: {e}")))
}
