//! Exact one-bit flip deltas and the batch-row greedy update for
//! `min_B ‖Ã − D·B·G_R‖²` with `Ã: p×t`, `D = diag(d)`, `B: p×q`, `G_R: q×t`.

use std::cmp::Ordering;

use crate::binmat::BitMatrix;
use crate::error::{invalid, shape, Result};
use crate::linalg::{Matrix, Real};

/// Precomputed quantities for evaluating every flip delta in `O(1)`.
#[derive(Clone, Debug)]
pub struct FlipWorkspace<T> {
    /// `G_R·G_Rᵀ`, `q × q`.
    pub gram: Matrix<T>,
    /// `d ⊙ d`.
    pub h: Vec<T>,
    /// `diag(gram)`.
    pub r: Vec<T>,
    /// `(h ⊙_row B)·gram`, `p × q`.
    pub y: Matrix<T>,
    /// `d ⊙_row (Ã·G_Rᵀ)`, `p × q`.
    pub z: Matrix<T>,
}

pub fn build_flip_workspace<T: Real>(
    atil: &Matrix<T>,
    d: &[T],
    gr: &Matrix<T>,
    b: &BitMatrix,
) -> Result<FlipWorkspace<T>> {
    let (p, t) = atil.shape();
    let q = gr.rows();
    if d.len() != p || gr.cols() != t || b.rows() != p || b.cols() != q {
        return Err(shape(format!(
            "Ã is {p}x{t}, d has {} entries, G_R is {}x{}, B is {}x{}",
            d.len(),
            gr.rows(),
            gr.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let gram = gr.matmul_t(gr)?;
    let h: Vec<T> = d.iter().map(|&x| x * x).collect();
    let r: Vec<T> = (0..q).map(|j| gram[(j, j)]).collect();
    let mut y = b.select_rows_sum(&gram)?;
    y.scale_rows(&h);
    let mut z = atil.matmul_t(gr)?;
    z.scale_rows(d);
    Ok(FlipWorkspace { gram, h, r, y, z })
}

/// Exact objective change from flipping `B_ij`:
/// `2(1 − 2B_ij)(Y_ij − Z_ij) + h_i·r_j`.
#[inline]
pub fn flip_delta<T: Real>(ws: &FlipWorkspace<T>, b: &BitMatrix, i: usize, j: usize) -> T {
    let s = if b.get(i, j) { -T::one() } else { T::one() };
    let two = T::one() + T::one();
    two * s * (ws.y[(i, j)] - ws.z[(i, j)]) + ws.h[i] * ws.r[j]
}

/// Checked variant of [`flip_delta`].
pub fn try_flip_delta<T: Real>(ws: &FlipWorkspace<T>, b: &BitMatrix, i: usize, j: usize) -> Result<T> {
    if i >= b.rows() || j >= b.cols() || ws.y.shape() != (b.rows(), b.cols()) {
        return Err(invalid(format!("flip index ({i}, {j}) out of range")));
    }
    Ok(flip_delta(ws, b, i, j))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GreedyOutcome {
    /// Accepted flips.
    pub accepted: usize,
    /// Sum of the accepted deltas, i.e. the predicted objective change.
    pub delta_sum: f64,
    /// Largest (least negative) accepted delta.
    pub max_accepted_delta: Option<f64>,
    /// Inner iterations (batches) executed.
    pub batches: usize,
}

/// Per-row best candidate; ties go to the smallest column index.
fn best_in_row<T: Real>(ws: &FlipWorkspace<T>, b: &BitMatrix, i: usize) -> (usize, T) {
    let mut best = (0, flip_delta(ws, b, i, 0));
    for j in 1..b.cols() {
        let v = flip_delta(ws, b, i, j);
        if v < best.1 {
            best = (j, v);
        }
    }
    best
}

/// Batch-row greedy descent on `B`.
///
/// Each inner iteration flips the best bit in each of up to `batch_rows`
/// rows whose best delta is below `-tau`, taking rows in order of
/// (delta, row index). Flips in distinct rows do not interact, so a batch
/// changes the objective by exactly the sum of its deltas.
pub fn row_greedy<T: Real>(
    atil: &Matrix<T>,
    d: &[T],
    gr: &Matrix<T>,
    b: &mut BitMatrix,
    tau: f64,
    batch_rows: usize,
) -> Result<GreedyOutcome> {
    if !(tau >= 0.0) {
        return Err(invalid(format!("flip tolerance must be >= 0, got {tau}")));
    }
    if batch_rows == 0 {
        return Err(invalid("row batch size must be >= 1"));
    }
    let mut ws = build_flip_workspace(atil, d, gr, b)?;
    let p = b.rows();
    let threshold = T::from_f64(-tau);
    let mut best: Vec<(usize, T)> = (0..p).map(|i| best_in_row(&ws, b, i)).collect();
    let mut out = GreedyOutcome::default();
    // every accepted flip lowers the objective by more than tau; this cap only
    // matters for tau = 0 where roundoff could otherwise cycle
    let max_batches = 64 * p * b.cols() + 1;

    let mut eligible: Vec<usize> = Vec::with_capacity(p);
    loop {
        eligible.clear();
        eligible.extend((0..p).filter(|&i| best[i].1 < threshold));
        if eligible.is_empty() {
            break;
        }
        if out.batches == max_batches {
            log::warn!("row_greedy stopped after {max_batches} batches without settling");
            break;
        }
        let take = batch_rows.min(eligible.len());
        let by_value = |&x: &usize, &y: &usize| {
            best[x].1.partial_cmp(&best[y].1).unwrap_or(Ordering::Equal).then(x.cmp(&y))
        };
        if take < eligible.len() {
            eligible.select_nth_unstable_by(take - 1, by_value);
            eligible.truncate(take);
        }
        eligible.sort_unstable_by(by_value);

        for &i in &eligible {
            let (j, v) = best[i];
            let s = if b.get(i, j) { -T::one() } else { T::one() };
            b.flip(i, j)?;
            let coef = s * ws.h[i];
            let (q, gram) = (ws.gram.cols(), &ws.gram);
            let y_row = ws.y.row_mut(i);
            for c in 0..q {
                y_row[c] += coef * gram[(j, c)];
            }
            let v = v.to_f64();
            out.accepted += 1;
            out.delta_sum += v;
            out.max_accepted_delta = Some(out.max_accepted_delta.map_or(v, |m: f64| m.max(v)));
            best[i] = best_in_row(&ws, b, i);
        }
        out.batches += 1;
    }
    Ok(out)
}
