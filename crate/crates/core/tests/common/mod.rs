#![allow(dead_code)]

use omdc_core::decomp::thin_qr;
use omdc_core::romsim::eigenvalues;
use omdc_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    thin_qr(&gaussian(rng, rows, cols)).unwrap().q
}

/// Random stable linear system `x+ = A x + B u`.
pub struct LinearSystem {
    pub a: Mat,
    pub b: Mat,
    /// Snapshots, n x m.
    pub s: Mat,
    /// Inputs, p x (m - 1).
    pub u: Mat,
}

pub fn linear_system(rng: &mut ChaCha8Rng, n: usize, p: usize, m: usize) -> LinearSystem {
    let mut a = gaussian(rng, n, n);
    let radius = eigenvalues(&a).unwrap().spectral_radius();
    a *= 0.95 / radius;
    let b = gaussian(rng, n, p);
    let u = gaussian(rng, p, m - 1);
    let mut s = Mat::zeros(n, m);
    s.set_column(0, &gaussian(rng, n, 1).column(0));
    for k in 0..m - 1 {
        let next = &a * s.column(k) + &b * u.column(k);
        s.set_column(k + 1, &next);
    }
    LinearSystem { a, b, s, u }
}

pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
