//! A minimal sequential container with explicit per-layer backward passes.

use crate::error::{Error, Result};
use crate::tensorops::activation::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::tensorops::conv::{conv2d, conv2d_backward, conv2d_forward, ConvCache, GradRequest};
use crate::tensorops::init::{fan_in_uniform, layer_seed};
use crate::tensorops::shuffle::{pixel_shuffle, pixel_unshuffle};
use crate::tensorops::{Param, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k×k` conv with seeded fan-in init and zero bias.
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), fan_in_uniform(out_ch, in_ch, k, layer_seed(seed, name))),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            pad,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    Sigmoid,
    PixelShuffle(usize),
    /// Adds a constant to every element.
    Offset(f32),
    /// Clamps to `[0, 1]`; gradient passes only strictly inside the range.
    Clamp01,
    /// `C×H×W → C×1×1` mean.
    GlobalAvgPool,
}

enum LayerCache {
    Conv(ConvCache),
    Output(Tensor),
    Input(Tensor),
    Shape(Vec<usize>),
    Nothing,
}

/// Per-layer state recorded by [`Sequential::forward`].
pub struct Trace {
    caches: Vec<LayerCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new(vec![c, 1, 1], data)
}

impl Layer {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => conv2d(x, &c.weight.value, &c.bias.value, c.stride, c.pad),
            Layer::Relu => Ok(relu(x)),
            Layer::Sigmoid => Ok(sigmoid(x)),
            Layer::PixelShuffle(r) => pixel_shuffle(x, *r),
            Layer::Offset(k) => Ok(x.map(|v| v + k)),
            Layer::Clamp01 => Ok(x.map(|v| v.clamp(0.0, 1.0))),
            Layer::GlobalAvgPool => global_avg_pool(x),
        }
    }

    fn apply_recording(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        Ok(match self {
            Layer::Conv(c) => {
                let (y, cache) = conv2d_forward(x, &c.weight.value, &c.bias.value, c.stride, c.pad)?;
                (y, LayerCache::Conv(cache))
            }
            Layer::Relu | Layer::Sigmoid => {
                let y = self.apply(x)?;
                let cache = LayerCache::Output(y.clone());
                (y, cache)
            }
            Layer::Clamp01 => (self.apply(x)?, LayerCache::Input(x.clone())),
            Layer::GlobalAvgPool => (self.apply(x)?, LayerCache::Shape(x.shape().to_vec())),
            Layer::PixelShuffle(_) | Layer::Offset(_) => (self.apply(x)?, LayerCache::Nothing),
        })
    }
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Inference-only forward pass; records nothing.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = self.layers.first().map(|l| l.apply(x)).unwrap_or_else(|| Ok(x.clone()))?;
        for layer in self.layers.iter().skip(1) {
            cur = layer.apply(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records what [`Sequential::backward`] needs.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.apply_recording(&cur)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, Trace { caches }))
    }

    /// Back-propagates `grad` through the recorded pass.
    ///
    /// Parameter gradients are *added* into `grads` (two slots per conv layer,
    /// weight then bias, in layer order) when `req.params` is set. Returns the
    /// input gradient when `req.input` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad: Tensor,
        req: GradRequest,
        mut grads: Option<&mut [Tensor]>,
    ) -> Result<Option<Tensor>> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::MissingCache("Sequential::backward"));
        }
        if req.params && grads.as_ref().map(|g| g.len()) != Some(self.param_count()) {
            return Err(Error::shape(
                "Sequential::backward",
                format!("{} gradient slots", self.param_count()),
                grads.as_ref().map_or(0, |g| g.len()),
            ));
        }
        let mut slot = self.param_count();
        let mut g = grad;
        for (idx, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let need_input = idx > 0 || req.input;
            g = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cc)) => {
                    slot -= 2;
                    let r = conv2d_backward(
                        &g,
                        cc,
                        &c.weight.value,
                        GradRequest {
                            input: need_input,
                            params: req.params,
                        },
                    )?;
                    if let (Some(buf), Some(gw), Some(gb)) = (grads.as_deref_mut(), r.weight, r.bias) {
                        buf[slot].add_assign(&gw)?;
                        buf[slot + 1].add_assign(&gb)?;
                    }
                    match r.input {
                        Some(gi) => gi,
                        None => return Ok(None),
                    }
                }
                (Layer::Relu, LayerCache::Output(y)) => relu_backward(&g, y)?,
                (Layer::Sigmoid, LayerCache::Output(y)) => sigmoid_backward(&g, y)?,
                (Layer::Clamp01, LayerCache::Input(x)) => {
                    g.zip_map(x, "clamp_backward", |g, x| if x > 0.0 && x < 1.0 { g } else { 0.0 })?
                }
                (Layer::GlobalAvgPool, LayerCache::Shape(shape)) => {
                    let (h, w) = (shape[1], shape[2]);
                    let inv = 1.0 / (h * w) as f32;
                    let vals: Vec<f32> =
                        g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, h * w)).collect();
                    Tensor::new(shape.clone(), vals)?
                }
                (Layer::PixelShuffle(r), LayerCache::Nothing) => pixel_unshuffle(&g, *r)?,
                (Layer::Offset(_), LayerCache::Nothing) => g,
                _ => return Err(Error::MissingCache("Sequential::backward: cache/layer mismatch")),
            };
        }
        Ok(if req.input { Some(g) } else { None })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count() * 2
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some([&c.weight, &c.bias]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some([&mut c.weight, &mut c.bias]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Zeroed gradient buffers shaped like [`Sequential::params`].
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect()
    }
}
