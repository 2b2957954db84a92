//! Diagonal-only retuning: the binary factors stay frozen and only
//! `d1`, `d2`, `d3` (`m + k + n` scalars) are optimized against a
//! differentiable objective on the layer output.

use serde::{Deserialize, Serialize};

use crate::binmat::BitMatrix;
use crate::error::{invalid, shape, Result};
use crate::linalg::Matrix;
use crate::model::DibaFactors;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    GradientDescent,
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for RetuneConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-2, steps: 200, optimizer: Optimizer::GradientDescent, grad_clip_norm: Some(1.0) }
    }
}

impl RetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(invalid(format!("gradient clip norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Inputs `x` (`n × s`, one sample per column) and desired outputs `y_target` (`m × s`).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    pub x: Matrix<f64>,
    pub y_target: Matrix<f64>,
}

impl CalibrationBatch {
    pub fn new(x: Matrix<f64>, y_target: Matrix<f64>) -> Result<Self> {
        if x.cols() != y_target.cols() || x.cols() == 0 {
            return Err(shape(format!(
                "calibration batch has {} inputs and {} targets",
                x.cols(),
                y_target.cols()
            )));
        }
        Ok(Self { x, y_target })
    }
}

/// Loss on a layer's output. Implementations return the loss and its
/// gradient with respect to the output.
pub trait OutputLoss {
    fn loss_and_grad(&self, batch: usize, output: &Matrix<f64>) -> Result<(f64, Matrix<f64>)>;
}

/// `½‖output − Y_target‖²` per batch.
pub struct OutputMatching<'a> {
    pub batches: &'a [CalibrationBatch],
}

impl OutputLoss for OutputMatching<'_> {
    fn loss_and_grad(&self, batch: usize, output: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
        let residual = output.sub(&self.batches[batch].y_target)?;
        Ok((0.5 * residual.frobenius_sq(), residual))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGrads {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub g3: Vec<f64>,
}

/// Diagonals held in 64-bit while the binary factors are borrowed.
#[derive(Clone, Debug)]
struct Chain<'a> {
    b1: &'a BitMatrix,
    b2: &'a BitMatrix,
    d1: Vec<f64>,
    d2: Vec<f64>,
    d3: Vec<f64>,
}

struct Forward {
    out: Matrix<f64>,
    /// `B1·D2·B2·D3·X`
    pre_d1: Matrix<f64>,
    /// `B2·D3·X`
    mixed: Matrix<f64>,
}

impl<'a> Chain<'a> {
    fn of(f: &'a DibaFactors) -> Self {
        let up = |d: &[f32]| d.iter().map(|&x| f64::from(x)).collect();
        Self { b1: &f.b1, b2: &f.b2, d1: up(&f.d1), d2: up(&f.d2), d3: up(&f.d3) }
    }

    fn from_flat(b1: &'a BitMatrix, b2: &'a BitMatrix, p: &[f64]) -> Self {
        let (m, k) = (b1.rows(), b1.cols());
        Self { b1, b2, d1: p[..m].to_vec(), d2: p[m..m + k].to_vec(), d3: p[m + k..].to_vec() }
    }

    fn flat(&self) -> Vec<f64> {
        [self.d1.as_slice(), &self.d2, &self.d3].concat()
    }

    fn forward(&self, x: &Matrix<f64>) -> Result<Forward> {
        if x.rows() != self.b2.cols() {
            return Err(shape(format!("input has {} rows, layer expects {}", x.rows(), self.b2.cols())));
        }
        let mut scaled = x.clone();
        scaled.scale_rows(&self.d3);
        let mixed = self.b2.select_rows_sum(&scaled)?;
        let mut mid = mixed.clone();
        mid.scale_rows(&self.d2);
        let pre_d1 = self.b1.select_rows_sum(&mid)?;
        let mut out = pre_d1.clone();
        out.scale_rows(&self.d1);
        Ok(Forward { out, pre_d1, mixed })
    }

    fn grads(&self, x: &Matrix<f64>, fwd: &Forward, g_out: &Matrix<f64>) -> Result<DiagonalGrads> {
        if g_out.shape() != fwd.out.shape() {
            return Err(shape(format!("output gradient is {:?}, output is {:?}", g_out.shape(), fwd.out.shape())));
        }
        let row_dots = |a: &Matrix<f64>, b: &Matrix<f64>| -> Vec<f64> {
            (0..a.rows()).map(|i| crate::linalg::dot(a.row(i), b.row(i))).collect()
        };
        let g1 = row_dots(g_out, &fwd.pre_d1);
        // M = (D1·B1)ᵀ·G
        let mut scaled = g_out.clone();
        scaled.scale_rows(&self.d1);
        let m = self.b1.transpose().select_rows_sum(&scaled)?;
        let g2 = row_dots(&m, &fwd.mixed);
        // C = B2ᵀ·D2·M
        let mut dm = m;
        dm.scale_rows(&self.d2);
        let c = self.b2.transpose().select_rows_sum(&dm)?;
        let g3 = row_dots(&c, x);
        Ok(DiagonalGrads { g1, g2, g3 })
    }
}

/// `Â·X` with the binary factors applied by selection and summation.
pub fn diba_forward(f: &DibaFactors, x: &Matrix<f64>) -> Result<Matrix<f64>> {
    Ok(Chain::of(f).forward(x)?.out)
}

/// Gradients of a loss with respect to `d1`, `d2`, `d3`, given the loss
/// gradient `g_out` with respect to the output `Â·X`.
pub fn grad_diagonals(f: &DibaFactors, x: &Matrix<f64>, g_out: &Matrix<f64>) -> Result<DiagonalGrads> {
    let chain = Chain::of(f);
    let fwd = chain.forward(x)?;
    chain.grads(x, &fwd, g_out)
}

#[derive(Clone, Debug)]
pub struct RetuneOutcome {
    pub factors: DibaFactors,
    /// `(step, loss)`, step 0 being the starting point.
    pub losses: Vec<(usize, f64)>,
    pub best_step: usize,
    /// Loss of the returned (32-bit) factors.
    pub final_loss: f64,
}

impl RetuneOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0].1
    }

    pub fn loss_curve_csv(&self) -> String {
        loss_curve_csv(&self.losses)
    }
}

pub fn loss_curve_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

/// Retunes the diagonals on output-matching least squares over `batches`.
pub fn retune(f: &DibaFactors, batches: &[CalibrationBatch], cfg: &RetuneConfig) -> Result<RetuneOutcome> {
    let inputs: Vec<Matrix<f64>> = batches.iter().map(|b| b.x.clone()).collect();
    retune_with(f, &inputs, &OutputMatching { batches }, cfg)
}

/// Retunes the diagonals against an arbitrary output loss. The objective is
/// the mean of the per-batch losses.
pub fn retune_with(
    f: &DibaFactors,
    inputs: &[Matrix<f64>],
    loss: &dyn OutputLoss,
    cfg: &RetuneConfig,
) -> Result<RetuneOutcome> {
    cfg.validate()?;
    f.validate()?;
    if inputs.is_empty() {
        return Err(invalid("retuning needs at least one calibration batch"));
    }
    let (b1, b2) = (&f.b1, &f.b2);
    let evaluate = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let chain = Chain::from_flat(b1, b2, p);
        evaluate_chain(&chain, inputs, loss)
    };
    let descent = descend(Chain::of(f).flat(), cfg, evaluate)?;

    let (m, k) = (b1.rows(), b1.cols());
    let down = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let p = &descent.best_params;
    let factors = DibaFactors::new(down(&p[..m]), b1.clone(), down(&p[m..m + k]), b2.clone(), down(&p[m + k..]))?;
    let final_loss = evaluate_chain(&Chain::of(&factors), inputs, loss)?.0;
    Ok(RetuneOutcome { factors, losses: descent.losses, best_step: descent.best_step, final_loss })
}

fn evaluate_chain(chain: &Chain<'_>, inputs: &[Matrix<f64>], loss: &dyn OutputLoss) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / inputs.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; chain.d1.len() + chain.d2.len() + chain.d3.len()];
    for (idx, x) in inputs.iter().enumerate() {
        let fwd = chain.forward(x)?;
        let (l, g_out) = loss.loss_and_grad(idx, &fwd.out)?;
        let g = chain.grads(x, &fwd, &g_out)?;
        total += l * scale;
        for (acc, v) in grad.iter_mut().zip(g.g1.iter().chain(&g.g2).chain(&g.g3)) {
            *acc += v * scale;
        }
    }
    Ok((total, grad))
}

pub(crate) struct Descent {
    pub best_params: Vec<f64>,
    pub losses: Vec<(usize, f64)>,
    pub best_step: usize,
}

/// First-order descent keeping the iterate with the lowest recorded loss.
pub(crate) fn descend(
    mut params: Vec<f64>,
    cfg: &RetuneConfig,
    mut evaluate: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Descent> {
    let mut first = vec![0.0; params.len()];
    let mut second = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut best = (0usize, f64::INFINITY, params.clone());

    for step in 0..=cfg.steps {
        let (loss, mut grad) = evaluate(&params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(crate::Error::NonFinite(format!("retuning loss became {loss} at step {step}")));
        }
        losses.push((step, loss));
        if loss < best.1 {
            best = (step, loss, params.clone());
        }
        if step == cfg.steps {
            break;
        }
        if let Some(clip) = cfg.grad_clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grad.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        match cfg.optimizer {
            Optimizer::GradientDescent => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= cfg.learning_rate * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..params.len() {
                    first[i] = beta1 * first[i] + (1.0 - beta1) * grad[i];
                    second[i] = beta2 * second[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= cfg.learning_rate * (first[i] / c1) / ((second[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(Descent { best_params: best.2, losses, best_step: best.0 })
}

/// Squared-error loss of `f` on `batches`, averaged over batches.
pub fn output_matching_loss(f: &DibaFactors, batches: &[CalibrationBatch]) -> Result<f64> {
    let inputs: Vec<Matrix<f64>> = batches.iter().map(|b| b.x.clone()).collect();
    Ok(evaluate_chain(&Chain::of(f), &inputs, &OutputMatching { batches })?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_chain(n: usize) -> DibaFactors {
        DibaFactors::with_unit_diagonals(BitMatrix::identity(n), BitMatrix::identity(n)).unwrap()
    }

    #[test]
    fn forward_of_identity_chain_is_identity() {
        let x = Matrix::<f64>::from_fn(3, 2, |i, j| (i as f64) - j as f64 * 0.5);
        assert_eq!(diba_forward(&identity_chain(3), &x).unwrap(), x);
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let f = DibaFactors::new(
            vec![1.5, -0.5],
            BitMatrix::random(2, 3, 1).unwrap(),
            vec![0.5, 2.0, -1.0],
            BitMatrix::random(3, 4, 2).unwrap(),
            vec![1.0, -2.0, 0.25, 3.0],
        )
        .unwrap();
        let x = Matrix::<f64>::from_fn(4, 3, |i, j| (i + 2 * j) as f64 - 3.0);
        let g = grad_diagonals(&f, &x, &Matrix::zeros(2, 3)).unwrap();
        assert!(g.g1.iter().chain(&g.g2).chain(&g.g3).all(|&v| v == 0.0));

        let mut dead = f.clone();
        dead.b1 = BitMatrix::zeros(2, 3);
        let g = grad_diagonals(&dead, &x, &Matrix::from_fn(2, 3, |i, j| (i + j) as f64 + 1.0)).unwrap();
        assert!(g.g1.iter().chain(&g.g2).chain(&g.g3).all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = RetuneConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let c = RetuneConfig { steps: 0, ..RetuneConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn perfect_target_stays_put() {
        let f = identity_chain(3);
        let x = Matrix::<f64>::from_fn(3, 4, |i, j| (i * j) as f64 + 0.5);
        let batch = CalibrationBatch::new(x.clone(), diba_forward(&f, &x).unwrap()).unwrap();
        let out = retune(&f, &[batch], &RetuneConfig { steps: 5, ..Default::default() }).unwrap();
        assert_eq!(out.initial_loss(), 0.0);
        assert_eq!(out.factors, f);
        assert!(out.loss_curve_csv().starts_with("step,loss\n0,0\n"));
    }

    #[test]
    fn rejects_missing_batches_and_shape_errors() {
        let f = identity_chain(2);
        assert!(retune(&f, &[], &RetuneConfig::default()).is_err());
        assert!(CalibrationBatch::new(Matrix::zeros(2, 3), Matrix::zeros(2, 2)).is_err());
        assert!(diba_forward(&f, &Matrix::zeros(3, 1)).is_err());
    }
}
