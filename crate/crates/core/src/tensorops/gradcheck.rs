//! Finite-difference gradient checking.

use crate::tensorops::Tensor;

/// Central differences of a scalar function of `x`, one coordinate at a time.
pub fn central_difference(x: &Tensor, h: f32, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + h, orig - h);
        probe.data_mut()[i] = hi;
        let up = f(&probe);
        probe.data_mut()[i] = lo;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // divide by the step actually taken after f32 rounding
        out.data_mut()[i] = ((up - down) / (hi as f64 - lo as f64)) as f32;
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        diff += (x as f64 - y as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    let denom = na.max(nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
