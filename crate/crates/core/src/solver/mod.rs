//! DiBA-Greedy: alternating closed-form diagonal refits and exact greedy bit flips.
//!
//! One outer iteration runs, in order: greedy pass on `B1`, refit `D1`,
//! greedy pass on `B2` (as the transposed subproblem on `B2ᵀ`), refit `D3`,
//! refit `D2`. The loop ends when an iteration accepts no flips or after
//! `max_outer` iterations. The objective `‖A − Â‖²` is recorded after every
//! primitive update.

mod greedy;
mod refit;

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use greedy::{build_flip_workspace, flip_delta, row_greedy, try_flip_delta, FlipWorkspace, GreedyOutcome};
pub use refit::{default_lambda, refit_left_diagonal, refit_middle_diagonal, refit_right_diagonal, MiddleRefit};

use crate::binmat::BitMatrix;
use crate::error::{invalid, shape, Result};
use crate::linalg::{frobenius_dist_sq, require_finite, require_nonempty, DenseMatrix, Matrix, Real};
use crate::model::{cast_vec, DibaFactors};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(invalid(format!("precision must be 32 or 64, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub k: usize,
    /// A flip is accepted only if its delta is below `-tau`.
    pub tau: f64,
    pub batch_rows: usize,
    pub seed: u64,
    /// Middle-refit ridge; `None` means `1e-8 · max(1, mean(diag F))`.
    pub lambda: Option<f64>,
    pub max_outer: usize,
    /// Accumulation precision of the solver's work matrices. Factors are
    /// always stored as 32-bit reals.
    pub precision: Precision,
}

impl SolverConfig {
    pub fn new(k: usize) -> Self {
        Self { k, tau: 1e-6, batch_rows: 1024, seed: 0, lambda: None, max_outer: 100, precision: Precision::F64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        if !(self.tau >= 0.0) {
            return Err(invalid(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.batch_rows == 0 {
            return Err(invalid("batch_rows must be >= 1"));
        }
        if self.max_outer == 0 {
            return Err(invalid("max_outer must be >= 1"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(invalid(format!("lambda must be >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Init,
    RefitD1,
    RefitD2,
    RefitD3,
    GreedyB1,
    GreedyB2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub kind: StepKind,
    pub objective: f64,
    pub flips: usize,
    /// Largest accepted delta of a greedy pass, if any flip was accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_accepted_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub iteration: usize,
    pub objective: f64,
    pub flips_b1: usize,
    pub flips_b2: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxOuter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub steps: Vec<TraceStep>,
    pub iterations: Vec<OuterIteration>,
    pub termination: Termination,
    /// Middle refits that fell back to a minimum-norm solve.
    pub min_norm_fallbacks: usize,
    pub lambda: Option<f64>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: usize,
    kind: &'a StepKind,
    objective: f64,
    flips: usize,
}

impl SolverTrace {
    fn new() -> Self {
        Self {
            steps: Vec::new(),
            iterations: Vec::new(),
            termination: Termination::MaxOuter,
            min_norm_fallbacks: 0,
            lambda: None,
        }
    }

    fn record(&mut self, kind: StepKind, objective: f64, flips: usize, max_accepted_delta: Option<f64>) {
        let step = self.steps.len();
        self.steps.push(TraceStep { step, kind, objective, flips, max_accepted_delta });
    }

    pub fn final_objective(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.objective)
    }

    pub fn total_flips(&self) -> usize {
        self.iterations.iter().map(|it| it.flips_b1 + it.flips_b2).sum()
    }

    /// One JSON object per primitive update: `{step, kind, objective, flips}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.steps {
            let line = TraceLine { step: s.step, kind: &s.kind, objective: s.objective, flips: s.flips };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Fits factors from Bernoulli(1/2) binary matrices drawn from `cfg.seed`
/// (`B1` first, then `B2`, from one ChaCha8 stream) and unit diagonals.
pub fn fit(a: &DenseMatrix, cfg: &SolverConfig) -> Result<(DibaFactors, SolverTrace)> {
    cfg.validate()?;
    require_nonempty(a.rows(), a.cols(), "target matrix")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b1 = BitMatrix::random_with(a.rows(), cfg.k, &mut rng)?;
    let b2 = BitMatrix::random_with(cfg.k, a.cols(), &mut rng)?;
    fit_from(a, DibaFactors::with_unit_diagonals(b1, b2)?, cfg)
}

/// Runs the solver from caller-supplied initial factors. `cfg.k` and
/// `cfg.seed` are ignored in favour of the factors' own shape.
pub fn fit_from(a: &DenseMatrix, init: DibaFactors, cfg: &SolverConfig) -> Result<(DibaFactors, SolverTrace)> {
    cfg.validate()?;
    require_nonempty(a.rows(), a.cols(), "target matrix")?;
    require_finite(a, "target matrix")?;
    init.validate()?;
    let (m, k, n) = init.dims();
    if (m, n) != a.shape() {
        return Err(shape(format!("factors are {m}x{n} but the target is {}x{}", a.rows(), a.cols())));
    }
    if k >= m * n {
        log::warn!("k={k} >= m*n={}: such factors can embed the target exactly and compress nothing", m * n);
    }
    match cfg.precision {
        Precision::F32 => Solver::<f32>::new(a, init, cfg).run(),
        Precision::F64 => Solver::<f64>::new(a, init, cfg).run(),
    }
}

struct Solver<'a, T> {
    target: &'a DenseMatrix,
    a: Matrix<T>,
    at: Matrix<T>,
    f: DibaFactors,
    cfg: &'a SolverConfig,
    trace: SolverTrace,
}

impl<'a, T: Real> Solver<'a, T> {
    fn new(target: &'a DenseMatrix, f: DibaFactors, cfg: &'a SolverConfig) -> Self {
        let a: Matrix<T> = target.cast();
        let at = a.transpose();
        Self { target, a, at, f, cfg, trace: SolverTrace::new() }
    }

    fn objective(&self) -> f64 {
        frobenius_dist_sq(self.target, &self.f.reconstruct()).expect("shapes validated")
    }

    fn record(&mut self, kind: StepKind, flips: usize, max_accepted_delta: Option<f64>) {
        let obj = self.objective();
        self.trace.record(kind, obj, flips, max_accepted_delta);
    }

    fn run(mut self) -> Result<(DibaFactors, SolverTrace)> {
        self.record(StepKind::Init, 0, None);
        self.refit_d2()?;
        self.refit_d1()?;
        self.refit_d3()?;

        for iteration in 1..=self.cfg.max_outer {
            let started = Instant::now();
            let c1 = self.greedy_b1()?;
            self.refit_d1()?;
            let c2 = self.greedy_b2()?;
            self.refit_d3()?;
            self.refit_d2()?;
            let objective = self.trace.final_objective();
            if !objective.is_finite() {
                return Err(crate::Error::NonFinite(format!("objective diverged at iteration {iteration}")));
            }
            self.trace.iterations.push(OuterIteration {
                iteration,
                objective,
                flips_b1: c1,
                flips_b2: c2,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
            log::debug!("outer {iteration}: objective {objective:.6e}, flips {c1}+{c2}");
            if c1 + c2 == 0 {
                self.trace.termination = Termination::Converged;
                break;
            }
        }
        Ok((self.f, self.trace))
    }

    fn refit_d1(&mut self) -> Result<()> {
        // G = B1·D2·B2·D3
        let mut right = self.f.right_factor::<T>();
        right.scale_rows(&cast_vec(&self.f.d2));
        let g = self.f.b1.select_rows_sum(&right)?;
        self.f.d1 = to_f32(&refit_left_diagonal(&self.a, &g)?);
        self.record(StepKind::RefitD1, 0, None);
        Ok(())
    }

    fn refit_d3(&mut self) -> Result<()> {
        // Gᵀ = B2ᵀ·(D1·B1·D2)ᵀ
        let mut left = self.f.left_factor::<T>();
        left.scale_cols(&cast_vec(&self.f.d2));
        let gt = self.f.b2.transpose().select_rows_sum(&left.transpose())?;
        self.f.d3 = to_f32(&refit_left_diagonal(&self.at, &gt)?);
        self.record(StepKind::RefitD3, 0, None);
        Ok(())
    }

    fn refit_d2(&mut self) -> Result<()> {
        let gl = self.f.left_factor::<T>();
        let gr = self.f.right_factor::<T>();
        let out = refit_middle_diagonal(&self.a, &gl, &gr, self.cfg.lambda)?;
        if out.min_norm_fallback {
            self.trace.min_norm_fallbacks += 1;
        }
        self.trace.lambda = Some(out.lambda);
        self.f.d2 = to_f32(&out.d2);
        self.record(StepKind::RefitD2, 0, None);
        Ok(())
    }

    fn greedy_b1(&mut self) -> Result<usize> {
        let mut gr = self.f.right_factor::<T>();
        gr.scale_rows(&cast_vec(&self.f.d2));
        let d1: Vec<T> = cast_vec(&self.f.d1);
        let out = row_greedy(&self.a, &d1, &gr, &mut self.f.b1, self.cfg.tau, self.cfg.batch_rows)?;
        self.record(StepKind::GreedyB1, out.accepted, out.max_accepted_delta);
        Ok(out.accepted)
    }

    fn greedy_b2(&mut self) -> Result<usize> {
        // ‖Aᵀ − D3·B2ᵀ·(D1·B1·D2)ᵀ‖²
        let mut left = self.f.left_factor::<T>();
        left.scale_cols(&cast_vec(&self.f.d2));
        let gr = left.transpose();
        let d3: Vec<T> = cast_vec(&self.f.d3);
        let mut b2t = self.f.b2.transpose();
        let out = row_greedy(&self.at, &d3, &gr, &mut b2t, self.cfg.tau, self.cfg.batch_rows)?;
        self.f.b2 = b2t.transpose();
        self.record(StepKind::GreedyB2, out.accepted, out.max_accepted_delta);
        Ok(out.accepted)
    }
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|&x| x.to_f64() as f32).collect()
}
