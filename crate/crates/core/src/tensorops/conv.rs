//! 2D cross-correlation via im2col and a single-threaded SGEMM.
//!
//! The GEMM never spawns threads, so results are bit-reproducible regardless
//! of how many samples are processed concurrently.

use crate::error::{Error, Result};
use crate::tensorops::Tensor;

/// Geometry of a convolution call, checked once up front.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d", "input C×H×W", format!("{input:?}"))),
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => return Err(Error::shape("conv2d", "weight O×C×k×k", format!("{weight:?}"))),
        };
        if wc != c {
            return Err(Error::shape("conv2d", format!("{c} weight channels"), wc));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid("conv2d", format!("{h}×{w} input too small for k={k}, pad={pad}")));
        }
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: k,
            stride,
            pad,
            out_height: (h + 2 * pad - k) / stride + 1,
            out_width: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Saved state from a training-mode forward call.
#[derive(Clone, Debug)]
pub struct ConvCache {
    geom: ConvGeometry,
    cols: Vec<f32>,
}

impl ConvCache {
    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }
}

/// Which gradients the caller wants from [`conv2d_backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest { input: true, params: true };
    pub const INPUT: GradRequest = GradRequest { input: true, params: false };
    pub const PARAMS: GradRequest = GradRequest { input: false, params: true };
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (ho, wo) = (g.out_height, g.out_width);
    let mut cols = vec![0.0f32; g.patch_len() * ho * wo];
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && (ix as usize) < g.width {
                            *o = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (ho, wo) = (g.out_height, g.out_width);
    let mut out = vec![0.0f32; g.in_channels * g.height * g.width];
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Row-major `c[m×n] (+)= a[m×k] · b[k×n]` with explicit strides for transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major); callers size the buffers accordingly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(bias: &Tensor, g: &ConvGeometry) -> Result<()> {
    if bias.shape() != [g.out_channels] {
        return Err(Error::shape("conv2d", format!("bias [{}]", g.out_channels), format!("{:?}", bias.shape())));
    }
    Ok(())
}

fn forward_cols(cols: &[f32], weight: &Tensor, bias: &Tensor, g: &ConvGeometry) -> Tensor {
    let (o, kk, p) = (g.out_channels, g.patch_len(), g.positions());
    let mut out = vec![0.0f32; o * p];
    for (oc, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias.data()[oc]);
    }
    gemm(o, kk, p, weight.data(), (kk as isize, 1), cols, (p as isize, 1), &mut out, true);
    Tensor::new(vec![o, g.out_height, g.out_width], out).expect("conv output sized by geometry")
}

/// Cross-correlation of a `C×H×W` input with an `O×C×k×k` kernel.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    Ok(conv2d_forward(input, weight, bias, stride, pad)?.0)
}

/// Like [`conv2d`] but also returns the cache needed by [`conv2d_backward`].
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    check_bias(bias, &geom)?;
    let cols = im2col(input.data(), &geom);
    let out = forward_cols(&cols, weight, bias, &geom);
    Ok((out, ConvCache { geom, cols }))
}

pub fn conv2d_backward(grad_out: &Tensor, cache: &ConvCache, weight: &Tensor, req: GradRequest) -> Result<ConvGrads> {
    let g = &cache.geom;
    let expected = [g.out_channels, g.out_height, g.out_width];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", format!("{expected:?}"), format!("{:?}", grad_out.shape())));
    }
    if weight.shape() != [g.out_channels, g.in_channels, g.kernel, g.kernel] {
        return Err(Error::shape("conv2d_backward", "weight matching the forward call", format!("{:?}", weight.shape())));
    }
    let (o, kk, p) = (g.out_channels, g.patch_len(), g.positions());
    let go = grad_out.data();

    let (grad_weight, grad_bias) = if req.params {
        let mut gw = vec![0.0f32; o * kk];
        // g[o×p] · colsᵀ[p×kk]
        gemm(o, p, kk, go, (p as isize, 1), &cache.cols, (1, p as isize), &mut gw, false);
        let gb: Vec<f32> = go.chunks_exact(p).map(|row| row.iter().sum()).collect();
        (
            Some(Tensor::new(weight.shape().to_vec(), gw)?),
            Some(Tensor::new(vec![o], gb)?),
        )
    } else {
        (None, None)
    };

    let grad_input = if req.input {
        let mut gcols = vec![0.0f32; kk * p];
        // Wᵀ[kk×o] · g[o×p]
        gemm(kk, o, p, weight.data(), (1, kk as isize), go, (p as isize, 1), &mut gcols, false);
        Some(Tensor::new(vec![g.in_channels, g.height, g.width], col2im(&gcols, g))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}
