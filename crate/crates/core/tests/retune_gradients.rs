//! Finite-difference checks for diagonal retuning and scale-only retuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diba::baselines::{quantize_rowwise, scale_loss_and_grad, scale_retune};
use diba::linalg::frobenius_dist_sq;
use diba::retune::{
    diba_forward, grad_diagonals, output_matching_loss, retune, CalibrationBatch, Optimizer, RetuneConfig,
};
use diba::sweep::synthetic;
use diba::{fit, BitMatrix, DibaFactors, Matrix, SolverConfig};

fn random_factors(m: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> DibaFactors {
    let mut v = |len: usize| (0..len).map(|_| rng.gen_range(-1.5f32..1.5)).collect::<Vec<_>>();
    let (d1, d2, d3) = (v(m), v(k), v(n));
    DibaFactors::new(
        d1,
        BitMatrix::random_with(m, k, rng).unwrap(),
        d2,
        BitMatrix::random_with(k, n, rng).unwrap(),
        d3,
    )
    .unwrap()
}

/// Dense-chain oracle: `½‖D1·B1·D2·B2·D3·X − Y‖²` with 64-bit diagonals.
fn dense_loss(f: &DibaFactors, d: [&[f64]; 3], x: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    let mut l = f.b1.to_dense::<f64>();
    l.scale_rows(d[0]);
    l.scale_cols(d[1]);
    let mut r = f.b2.to_dense::<f64>();
    r.scale_cols(d[2]);
    let out = l.matmul(&r).unwrap().matmul(x).unwrap();
    0.5 * frobenius_dist_sq(&out, y).unwrap()
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (m, k, n, s) = (rng.gen_range(1..=10), rng.gen_range(1..=10), rng.gen_range(1..=10), rng.gen_range(1..=10));
        let f = random_factors(m, k, n, &mut rng);
        let x = Matrix::<f64>::from_fn(n, s, |_, _| rng.gen_range(-1.0..1.0));
        let y = Matrix::<f64>::from_fn(m, s, |_, _| rng.gen_range(-1.0..1.0));
        let g_out = diba_forward(&f, &x).unwrap().sub(&y).unwrap();
        let g = grad_diagonals(&f, &x, &g_out).unwrap();

        let base: [Vec<f64>; 3] = [&f.d1, &f.d2, &f.d3].map(|d| d.iter().map(|&v| f64::from(v)).collect());
        let h = 1e-4;
        for (which, analytic) in [&g.g1, &g.g2, &g.g3].into_iter().enumerate() {
            for idx in 0..analytic.len() {
                let eval = |delta: f64| {
                    let mut d = base.clone();
                    d[which][idx] += delta;
                    dense_loss(&f, [&d[0], &d[1], &d[2]], &x, &y)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                // absolute floor for components that vanish
                assert!(
                    rel_close(analytic[idx], fd, 1e-4) || (analytic[idx] - fd).abs() < 1e-7,
                    "d{} [{idx}]: analytic {} vs fd {fd}",
                    which + 1,
                    analytic[idx]
                );
            }
        }
    }
}

#[test]
fn basis_vector_selects_a_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_factors(5, 3, 4, &mut rng);
    let dense = f.reconstruct();
    for j in 0..4 {
        let x = Matrix::<f64>::from_fn(4, 1, |i, _| if i == j { 1.0 } else { 0.0 });
        let y = diba_forward(&f, &x).unwrap();
        for i in 0..5 {
            assert!(rel_close(y[(i, 0)], dense[(i, j)], 1e-12));
        }
    }
}

#[test]
fn forward_matches_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_factors(7, 5, 6, &mut rng);
    let x = Matrix::<f64>::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
    let want = f.reconstruct().matmul(&x).unwrap();
    let got = diba_forward(&f, &x).unwrap();
    for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn identity_calibration_loss_is_half_reconstruction_error() {
    let a = synthetic::gaussian(10, 8, 1);
    let (f, trace) = fit(&a, &SolverConfig::new(3)).unwrap();
    let batch = CalibrationBatch::new(Matrix::identity(8), a.cast()).unwrap();
    let loss = output_matching_loss(&f, &[batch]).unwrap();
    assert!(rel_close(loss, 0.5 * trace.final_objective(), 1e-10));
}

#[test]
fn tiny_first_step_descends() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_factors(6, 3, 5, &mut rng);
    let x = Matrix::<f64>::from_fn(5, 8, |_, _| rng.gen_range(-1.0..1.0));
    let y = Matrix::<f64>::from_fn(6, 8, |_, _| rng.gen_range(-1.0..1.0));
    let g_out = diba_forward(&f, &x).unwrap().sub(&y).unwrap();
    let g = grad_diagonals(&f, &x, &g_out).unwrap();
    let norm = g.g1.iter().chain(&g.g2).chain(&g.g3).map(|v| v * v).sum::<f64>().sqrt();
    let cfg = RetuneConfig {
        learning_rate: 1e-6 / norm,
        steps: 1,
        optimizer: Optimizer::GradientDescent,
        grad_clip_norm: None,
    };
    let out = retune(&f, &[CalibrationBatch::new(x, y).unwrap()], &cfg).unwrap();
    assert!(out.losses[1].1 <= out.losses[0].1);
}

#[test]
fn retune_freezes_binary_factors_and_storage() {
    let a = synthetic::gaussian(16, 12, 6);
    let (f, _) = fit(&a, &SolverConfig::new(4)).unwrap();
    let before = f.storage_report(16, false).unwrap();
    let batch = CalibrationBatch::new(Matrix::identity(12), a.cast()).unwrap();
    let cfg = RetuneConfig { learning_rate: 1e-3, steps: 100, optimizer: Optimizer::adam(), grad_clip_norm: Some(1.0) };
    let out = retune(&f, &[batch], &cfg).unwrap();
    assert_eq!(out.factors.b1.as_bytes(), f.b1.as_bytes());
    assert_eq!(out.factors.b2.as_bytes(), f.b2.as_bytes());
    assert_eq!(out.factors.storage_report(16, false).unwrap(), before);
    assert_eq!(out.factors.trainable_scalars(), 16 + 4 + 12);
    assert!(out.final_loss <= out.initial_loss());
}

#[test]
fn scale_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = synthetic::gaussian(6, 5, 8);
    let q = quantize_rowwise(&a, 4).unwrap();
    let x = Matrix::<f64>::from_fn(5, 7, |_, _| rng.gen_range(-1.0..1.0));
    let y = a.cast::<f64>().matmul(&x).unwrap();
    let batches = [CalibrationBatch::new(x, y).unwrap()];
    let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let (_, grad) = scale_loss_and_grad(&q, &u, &batches).unwrap();
    let h = 1e-4;
    for i in 0..6 {
        let eval = |delta: f64| {
            let mut v = u.clone();
            v[i] += delta;
            scale_loss_and_grad(&q, &v, &batches).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(rel_close(grad[i], fd, 1e-4) || (grad[i] - fd).abs() < 1e-9, "{} vs {fd}", grad[i]);
    }
}

#[test]
fn scale_retune_never_ends_above_start() {
    let a = synthetic::heavy_tailed_rows(12, 10, 2);
    let q = quantize_rowwise(&a, 2).unwrap();
    let batch = CalibrationBatch::new(Matrix::identity(10), a.cast()).unwrap();
    let out = scale_retune(&q, &[batch], &RetuneConfig { learning_rate: 1e-2, steps: 100, ..Default::default() }).unwrap();
    assert_eq!(out.model.codes(), q.codes());
    assert!(out.losses[out.best_step].1 <= out.initial_loss());
    assert!(out.losses[out.best_step].1 < out.initial_loss());
}
