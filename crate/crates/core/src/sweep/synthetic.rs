//! Seeded synthetic targets standing in for real weight matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};

use crate::linalg::{DenseMatrix, Matrix};

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// I.i.d. standard normal entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_matrix(rows, cols, &mut rng).cast()
}

/// `U·V` of the given rank plus Gaussian noise whose energy is
/// `noise_fraction` times the signal energy.
pub fn low_rank_plus_noise(rows: usize, cols: usize, rank: usize, noise_fraction: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = normal_matrix(rows, rank, &mut rng);
    let v = normal_matrix(rank, cols, &mut rng);
    let signal = u.matmul(&v).expect("inner dimensions agree");
    let noise = normal_matrix(rows, cols, &mut rng);
    let scale = (noise_fraction * signal.frobenius_sq() / noise.frobenius_sq()).sqrt();
    Matrix::from_fn(rows, cols, |i, j| (signal[(i, j)] + scale * noise[(i, j)]) as f32)
}

/// Gaussian rows with log-normal row norms, loosely like an embedding table.
pub fn heavy_tailed_rows(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_scale = LogNormal::new(0.0, 1.0).expect("valid log-normal");
    let mut m = normal_matrix(rows, cols, &mut rng);
    let scales: Vec<f64> = (0..rows).map(|_| rng.sample(row_scale)).collect();
    m.scale_rows(&scales);
    m.cast()
}
