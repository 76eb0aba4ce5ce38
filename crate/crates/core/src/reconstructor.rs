//! Surrogate latent autoencoder standing in for the latent-diffusion AE.
//!
//! Three stride-2 convs take a `3×H×W` image in `[0,1]` to a 4-channel latent
//! at `H/8×W/8`; three conv + pixel-shuffle stages bring it back. The decoder
//! output is clamped to `[0,1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{try_map_indexed, Exec};
use crate::tensorops::{adam_step, AdamState, Conv2d, GradRequest, Layer, Param, Sequential, Tensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct AeParams {
    pub encoder: Sequential,
    pub decoder: Sequential,
    /// When false, detector training never touches these weights.
    pub trainable: bool,
}

/// Per-pixel, per-channel `|x' − x|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap(pub Tensor);

impl ErrorMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }
}

impl AeParams {
    pub fn new(seed: u64) -> Self {
        let conv = |name: &str, i, o, s| Layer::Conv(Conv2d::new(name, i, o, 3, s, 1, seed));
        let encoder = Sequential::new(vec![
            conv("ae.encoder.0", 3, 16, 2),
            Layer::Relu,
            conv("ae.encoder.1", 16, 32, 2),
            Layer::Relu,
            conv("ae.encoder.2", 32, 64, 2),
            Layer::Relu,
            conv("ae.encoder.latent", 64, LATENT_CHANNELS, 1),
        ]);
        let decoder = Sequential::new(vec![
            conv("ae.decoder.0", LATENT_CHANNELS, 4 * 32, 1),
            Layer::PixelShuffle(2),
            Layer::Relu,
            conv("ae.decoder.1", 32, 4 * 16, 1),
            Layer::PixelShuffle(2),
            Layer::Relu,
            conv("ae.decoder.2", 16, 4 * 3, 1),
            Layer::PixelShuffle(2),
            Layer::Offset(0.5),
            Layer::Clamp01,
        ]);
        AeParams {
            encoder,
            decoder,
            trainable: false,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect()
    }

    /// Digest over every AE tensor, used to check the frozen-AE contract.
    pub fn fingerprint(&self) -> u64 {
        self.params()
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.value.fingerprint())
    }

    fn check_image(image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape("ae_encode", "3 channels", c));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::invalid("ae_encode", format!("{h}×{w} not divisible by {DOWNSAMPLE}")));
        }
        Ok(())
    }

    fn check_latent(latent: &Tensor) -> Result<()> {
        let (c, _, _) = latent.dims3()?;
        if c != LATENT_CHANNELS {
            return Err(Error::shape("ae_decode", format!("{LATENT_CHANNELS} latent channels"), c));
        }
        Ok(())
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Self::check_image(image)?;
        self.encoder.infer(image)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Self::check_latent(latent)?;
        self.decoder.infer(latent)
    }

    /// `R(x) = D(E(x))`.
    pub fn reconstruct(&self, image: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(image)?)
    }

    /// Differentiable round trip for training code.
    pub fn reconstruct_traced(&self, image: &Tensor) -> Result<(Tensor, AeTrace)> {
        Self::check_image(image)?;
        let (z, enc) = self.encoder.forward(image)?;
        let (y, dec) = self.decoder.forward(&z)?;
        Ok((y, AeTrace { enc, dec, latent: z }))
    }

    /// Back-propagates through a traced round trip. Parameter gradients are
    /// added to `grads` when given; the input gradient is returned when
    /// `want_input` is set.
    pub fn backward(
        &self,
        trace: &AeTrace,
        grad_out: Tensor,
        latent_grad: Option<&Tensor>,
        want_input: bool,
        grads: Option<&mut [Tensor]>,
    ) -> Result<Option<Tensor>> {
        let ne = self.encoder.param_count();
        let want_params = grads.is_some();
        let (ge, gd) = match grads {
            Some(g) => {
                let (a, b) = g.split_at_mut(ne);
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let req = |input| GradRequest {
            input,
            params: want_params,
        };
        let mut gz = self
            .decoder
            .backward(&trace.dec, grad_out, req(true), gd)?
            .expect("latent grad requested");
        if let Some(extra) = latent_grad {
            gz.add_assign(extra)?;
        }
        if !want_input && !want_params {
            return Ok(None);
        }
        self.encoder.backward(&trace.enc, gz, req(want_input), ge)
    }
}

pub struct AeTrace {
    enc: crate::tensorops::Trace,
    dec: crate::tensorops::Trace,
    latent: Tensor,
}

impl AeTrace {
    pub fn latent(&self) -> &Tensor {
        &self.latent
    }
}

pub fn ae_encode(image: &Tensor, params: &AeParams) -> Result<Tensor> {
    params.encode(image)
}

pub fn ae_decode(latent: &Tensor, params: &AeParams) -> Result<Tensor> {
    params.decode(latent)
}

pub fn reconstruct(image: &Tensor, params: &AeParams) -> Result<Tensor> {
    params.reconstruct(image)
}

/// `|x' − x|` elementwise.
pub fn recon_error(x: &Tensor, x_rec: &Tensor) -> Result<ErrorMap> {
    Ok(ErrorMap(x.zip_map(x_rec, "recon_error", |a, b| (b - a).abs())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub kl_weight: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 1e-3,
            kl_weight: 0.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Error::Config {
            field: field.into(),
            msg,
        };
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(bad("lr", format!("must be finite and ≥ 0, got {}", self.lr)));
        }
        if !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return Err(bad("kl_weight", format!("must be finite and ≥ 0, got {}", self.kl_weight)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training MSE of each epoch.
    pub epoch_mse: Vec<f64>,
    /// MSE on the held-out images after the last epoch, if any were given.
    pub heldout_mse: Option<f64>,
}

/// Mean per-pixel squared reconstruction error over a set of images.
pub fn mean_recon_mse(params: &AeParams, images: &[Tensor], exec: Exec) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("mean_recon_mse", "no images"));
    }
    let per = try_map_indexed(exec, images.len(), |i| {
        let x = &images[i];
        let y = params.reconstruct(x)?;
        Ok::<_, Error>(x.zip_map(&y, "mse", |a, b| (a - b) * (a - b))?.mean())
    })?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

/// Fits the AE to real images by minimising mean-squared reconstruction error,
/// plus `kl_weight · mean(½ z²)` on the latents when `kl_weight > 0`.
pub fn pretrain_ae(
    mut params: AeParams,
    images: &[Tensor],
    heldout: &[Tensor],
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<(AeParams, PretrainReport)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Manifest("no real training images for autoencoder pretraining".into()));
    }
    let mut opt = AdamState::new(params.params(), cfg.lr);
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.epochs {
        let order = shuffled(images.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0f64;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let p = &params;
            let per = try_map_indexed(exec, batch.len(), |j| {
                let x = &images[batch[j]];
                let (y, trace) = p.reconstruct_traced(x)?;
                let n = x.len() as f32;
                let mse = x.zip_map(&y, "mse", |a, b| (a - b) * (a - b))?.mean();
                let g = y.zip_map(x, "mse", |a, b| 2.0 * (a - b) / n)?;
                let z = trace.latent();
                let zl = z.len() as f32;
                let kl = if cfg.kl_weight > 0.0 {
                    z.data().iter().map(|&v| 0.5 * (v as f64).powi(2)).sum::<f64>() / zl as f64
                } else {
                    0.0
                };
                let gz = (cfg.kl_weight > 0.0).then(|| z.map(|v| cfg.kl_weight * v / zl));
                let mut grads = p.zero_grads();
                p.backward(&trace, g, gz.as_ref(), false, Some(&mut grads))?;
                Ok::<_, Error>((mse, mse + cfg.kl_weight as f64 * kl, grads))
            })?;
            let mut sum = params.zero_grads();
            for (mse, loss, g) in &per {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "autoencoder loss at epoch {epoch}, batch {b}, images {batch:?}"
                    )));
                }
                epoch_loss += mse;
                for (s, gi) in sum.iter_mut().zip(g) {
                    s.add_assign(gi)?;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for (param, mut g) in params.params_mut().into_iter().zip(sum) {
                g.scale_in_place(inv);
                param.grad = g;
            }
            adam_step(&mut params.params_mut(), &mut opt)?;
        }
        report.epoch_mse.push(epoch_loss / images.len() as f64);
    }
    if !heldout.is_empty() {
        report.heldout_mse = Some(mean_recon_mse(&params, heldout, exec)?);
    }
    Ok((params, report))
}
