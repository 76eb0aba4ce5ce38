//! 2D Fourier analysis, centred spectra, radial band masks and band filtering.
//!
//! Masks live in centred coordinates: the DC bin sits at
//! `(floor(H/2), floor(W/2))`. Before a mask is applied it is symmetrised
//! over conjugate-partner bins, so filtering a real image always yields a
//! real image.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensorops::Tensor;

/// Largest imaginary magnitude [`idft2`] tolerates before reporting an error.
pub const MAX_IMAGINARY_RESIDUAL: f32 = 1e-2;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f32>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f32>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Per-channel complex `H×W` grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex32>,
    centered: bool,
}

impl Spectrum {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex32>, centered: bool) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape("Spectrum::new", channels * height * width, data.len()));
        }
        Ok(Spectrum {
            channels,
            height,
            width,
            data,
            centered,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[Complex32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Sum of `|F|²` over all bins and channels.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr() as f64).sum()
    }
}

/// Real-valued `H×W` weights in `[0, 1]`, in centred coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FrequencyMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("FrequencyMask::new", height * width, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("FrequencyMask::new", format!("value {v} outside [0, 1]")));
        }
        Ok(FrequencyMask { height, width, values })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        FrequencyMask {
            height,
            width,
            values: vec![1.0; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FrequencyMask {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    /// From a `1×H×W` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::shape("FrequencyMask::from_tensor", "1×H×W", format!("{:?}", t.shape())));
        }
        Self::new(h, w, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("mask dims")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[u * self.width + v]
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::invalid("dft2", format!("need H, W ≥ 2, got {h}×{w}")));
    }
    Ok(())
}

/// In-place 2D transform of one `h×w` plane (rows, then columns).
fn fft2_plane(plane: &mut [Complex32], h: usize, w: usize, inverse: bool) {
    let row_fft = plan(w, inverse);
    for row in plane.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex32::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            plane[y * w + x] = col[y];
        }
    }
}

/// Unnormalised forward DFT of each channel; result is uncentred.
pub fn dft2(image: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = image.dims3()?;
    check_dims(h, w)?;
    let mut data: Vec<Complex32> = image.data().iter().map(|&v| Complex32::new(v, 0.0)).collect();
    for plane in data.chunks_exact_mut(h * w) {
        fft2_plane(plane, h, w, false);
    }
    Spectrum::new(c, h, w, data, false)
}

/// Inverse DFT (with `1/(H·W)`), returning the real part and the largest
/// imaginary magnitude that was discarded.
pub fn idft2_with_residual(spec: &Spectrum) -> Result<(Tensor, f32)> {
    if spec.centered {
        return Err(Error::invalid("idft2", "spectrum is centred; unshift it first"));
    }
    let (h, w) = spec.dims();
    check_dims(h, w)?;
    let mut data = spec.data.clone();
    let scale = 1.0 / (h * w) as f32;
    let mut residual = 0.0f32;
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks_exact_mut(h * w) {
        fft2_plane(plane, h, w, true);
        for z in plane.iter() {
            residual = residual.max((z.im * scale).abs());
            out.push(z.re * scale);
        }
    }
    Ok((Tensor::new(vec![spec.channels, h, w], out)?, residual))
}

/// Inverse DFT; errors when the spectrum was not conjugate-symmetric.
pub fn idft2(spec: &Spectrum) -> Result<Tensor> {
    let (img, residual) = idft2_with_residual(spec)?;
    if residual > MAX_IMAGINARY_RESIDUAL {
        return Err(Error::ImaginaryResidual { residual });
    }
    Ok(img)
}

fn roll_plane<T: Copy>(src: &[T], h: usize, w: usize, dy: usize, dx: usize, out: &mut [T]) {
    for y in 0..h {
        let ty = (y + dy) % h;
        for x in 0..w {
            out[ty * w + (x + dx) % w] = src[y * w + x];
        }
    }
}

fn roll<T: Copy>(data: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        roll_plane(src, h, w, dy, dx, dst);
    }
    out
}

/// Moves the DC bin from `(0, 0)` to `(floor(H/2), floor(W/2))`.
pub fn center_shift(spec: &Spectrum) -> Spectrum {
    let (h, w) = spec.dims();
    Spectrum {
        data: roll(&spec.data, h, w, h / 2, w / 2),
        centered: true,
        ..*spec
    }
}

/// Inverse of [`center_shift`] for any dimensions.
pub fn center_unshift(spec: &Spectrum) -> Spectrum {
    let (h, w) = spec.dims();
    Spectrum {
        data: roll(&spec.data, h, w, h - h / 2, w - w / 2),
        centered: false,
        ..*spec
    }
}

/// Convenience for real planes in centred ↔ uncentred layout.
pub(crate) fn shift_real(data: &[f32], h: usize, w: usize) -> Vec<f32> {
    roll(data, h, w, h / 2, w / 2)
}

pub(crate) fn unshift_real(data: &[f32], h: usize, w: usize) -> Vec<f32> {
    roll(data, h, w, h - h / 2, w - w / 2)
}

/// Indicator of the closed annulus `r_lo ≤ d((u,v), o) ≤ r_hi` around the
/// centred DC bin `o`.
pub fn radial_mask(height: usize, width: usize, r_lo: f64, r_hi: f64) -> Result<FrequencyMask> {
    if !(r_lo >= 0.0 && r_lo <= r_hi) {
        return Err(Error::invalid("radial_mask", format!("need 0 ≤ r_lo ≤ r_hi, got [{r_lo}, {r_hi}]")));
    }
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let values = (0..height * width)
        .map(|i| {
            let (u, v) = ((i / width) as f64, (i % width) as f64);
            let d = ((u - cy).powi(2) + (v - cx).powi(2)).sqrt();
            if d >= r_lo && d <= r_hi {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    FrequencyMask::new(height, width, values)
}

pub fn complement_mask(mask: &FrequencyMask) -> FrequencyMask {
    FrequencyMask {
        height: mask.height,
        width: mask.width,
        values: mask.values.iter().map(|v| 1.0 - v).collect(),
    }
}

/// Index of the conjugate partner of centred bin `i` along an axis of length `n`.
fn partner(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

fn symmetrize_values(values: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for u in 0..h {
        let pu = partner(u, h);
        for v in 0..w {
            let pv = partner(v, w);
            let (a, b) = (values[u * w + v], values[pu * w + pv]);
            // bit-identical at p and its partner
            out[u * w + v] = if a <= b { 0.5 * (a + b) } else { 0.5 * (b + a) };
        }
    }
    out
}

/// `m'(p) = ½(m(p) + m(p*))` where `p*` is the conjugate-partner bin.
pub fn symmetrize_mask(mask: &FrequencyMask) -> FrequencyMask {
    FrequencyMask {
        height: mask.height,
        width: mask.width,
        values: symmetrize_values(&mask.values, mask.height, mask.width),
    }
}

/// Filters an already-transformed (uncentred) image spectrum.
pub fn band_filter_spectrum(spec: &Spectrum, mask: &FrequencyMask) -> Result<Tensor> {
    if spec.centered {
        return Err(Error::invalid("band_filter", "expected an uncentred spectrum"));
    }
    if spec.dims() != mask.dims() {
        return Err(Error::shape("band_filter", format!("{:?}", spec.dims()), format!("{:?}", mask.dims())));
    }
    let (h, w) = spec.dims();
    let weights = unshift_real(&symmetrize_values(&mask.values, h, w), h, w);
    let mut filtered = spec.clone();
    for plane in filtered.data.chunks_exact_mut(h * w) {
        for (z, &m) in plane.iter_mut().zip(&weights) {
            *z *= m;
        }
    }
    idft2(&filtered)
}

/// `idft2(unshift(shift(dft2(x)) ⊗ symmetrize(mask)))`, mask shared by all channels.
pub fn band_filter(image: &Tensor, mask: &FrequencyMask) -> Result<Tensor> {
    band_filter_spectrum(&dft2(image)?, mask)
}

/// Gradient of a scalar loss with respect to the (centred) mask of
/// [`band_filter_spectrum`], given the loss gradient on the filtered image.
pub fn band_filter_mask_grad(spec: &Spectrum, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = grad_out.dims3()?;
    if spec.centered || spec.channels != c || spec.dims() != (h, w) {
        return Err(Error::shape(
            "band_filter_mask_grad",
            format!("uncentred {}×{}×{}", spec.channels, spec.height, spec.width),
            format!("{:?}", grad_out.shape()),
        ));
    }
    // y = Re(IDFT(Z ⊙ M)) ⇒ ∂L/∂M_k = Σ_c Re(Z_{c,k} · IDFT(g_c)_k)
    let gspec = dft2(grad_out)?;
    let scale = 1.0 / (h * w) as f32;
    let mut acc = vec![0.0f32; h * w];
    for ch in 0..c {
        for ((a, z), gz) in acc.iter_mut().zip(spec.plane(ch)).zip(gspec.plane(ch)) {
            // IDFT(g)_k = conj(DFT(g)_k) / (HW) for real g
            *a += (z * gz.conj()).re * scale;
        }
    }
    let centered = shift_real(&acc, h, w);
    // symmetrisation is self-adjoint
    Tensor::new(vec![1, h, w], symmetrize_values(&centered, h, w))
}

/// Per-channel `log(1 + |F|)` of the centred spectrum.
pub fn log_magnitude(spec: &Spectrum) -> Tensor {
    let data = spec.data.iter().map(|z| z.norm().ln_1p()).collect();
    Tensor::new(vec![spec.channels, spec.height, spec.width], data).expect("spectrum dims")
}

/// Default band radii for an `S×S` input, scaled from `[40, 120]` at 256.
pub fn scaled_mid_band(size: usize) -> (f64, f64) {
    let s = size as f64 / 256.0;
    (40.0 * s, 120.0 * s)
}
