//! Seeded tensors for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensorops::Tensor;

pub fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

pub fn seeded_unit_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0f32..1.0))
}

pub use crate::tensorops::gradcheck::{central_difference, rel_err};

/// Separable O(N³) DFT in f64, independent of the FFT path. Returns
/// `(re, im)` planes per channel in uncentered order.
pub fn naive_dft2(x: &Tensor) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = x.dims3().unwrap();
    let tau = std::f64::consts::TAU;
    (0..c)
        .map(|ch| {
            let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
            // rows
            let mut rr = vec![0.0f64; h * w];
            let mut ri = vec![0.0f64; h * w];
            for y in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for xx in 0..w {
                        let a = -tau * (v * xx) as f64 / w as f64;
                        let p = plane[y * w + xx] as f64;
                        sr += p * a.cos();
                        si += p * a.sin();
                    }
                    rr[y * w + v] = sr;
                    ri[y * w + v] = si;
                }
            }
            // columns
            let mut or = vec![0.0f64; h * w];
            let mut oi = vec![0.0f64; h * w];
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        let a = -tau * (u * y) as f64 / h as f64;
                        let (cr, ci) = (a.cos(), a.sin());
                        sr += rr[y * w + v] * cr - ri[y * w + v] * ci;
                        si += rr[y * w + v] * ci + ri[y * w + v] * cr;
                    }
                    or[u * w + v] = sr;
                    oi[u * w + v] = si;
                }
            }
            (or, oi)
        })
        .collect()
}
