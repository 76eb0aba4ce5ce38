//! Frequency mask refinement: a shared conv encoder over the centred
//! log-magnitude spectrum and two independent decoders producing the
//! mid-band mask and its complement.

use crate::error::{Error, Result};
use crate::spectrum::{band_filter, center_shift, dft2, log_magnitude, FrequencyMask, Spectrum};
use crate::tensorops::{Conv2d, GradRequest, Layer, Param, Sequential, Tensor, Trace};

/// Channel widths of the four stride-2 encoder convs.
pub const ENCODER_WIDTHS: [usize; 5] = [3, 16, 32, 64, 128];

/// Spatial contraction of the encoder.
pub const ENCODER_STRIDE: usize = 16;

/// Centred `log(1 + |F|)` per channel, used as the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyFeature(pub Tensor);

impl FrequencyFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

pub fn freq_feature(image: &Tensor) -> Result<FrequencyFeature> {
    Ok(feature_from_spectrum(&dft2(image)?))
}

/// Same as [`freq_feature`] for a spectrum that was already computed.
pub fn feature_from_spectrum(spec: &Spectrum) -> FrequencyFeature {
    FrequencyFeature(log_magnitude(&center_shift(spec)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmreParams {
    pub encoder: Sequential,
    pub decoder_mid: Sequential,
    pub decoder_mid_c: Sequential,
    image_size: usize,
}

pub struct FmreTrace {
    encoder: Trace,
    mid: Trace,
    mid_c: Trace,
}

fn decoder(name: &str, r: usize, seed: u64) -> Sequential {
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(name, ENCODER_WIDTHS[4], r * r, 3, 1, 1, seed)),
        Layer::PixelShuffle(r),
        Layer::Sigmoid,
    ])
}

impl FmreParams {
    /// Fresh module for `image_size × image_size` inputs.
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || image_size % ENCODER_STRIDE != 0 {
            return Err(Error::invalid(
                "FmreParams::new",
                format!("image size {image_size} must be a positive multiple of {ENCODER_STRIDE}"),
            ));
        }
        let mut layers = Vec::new();
        for (i, pair) in ENCODER_WIDTHS.windows(2).enumerate() {
            layers.push(Layer::Conv(Conv2d::new(&format!("fmre.encoder.{i}"), pair[0], pair[1], 3, 2, 1, seed)));
            layers.push(Layer::Relu);
        }
        let r = ENCODER_STRIDE;
        Ok(FmreParams {
            encoder: Sequential::new(layers),
            decoder_mid: decoder("fmre.decoder_mid", r, seed),
            decoder_mid_c: decoder("fmre.decoder_mid_c", r, seed),
            image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check_input(&self, feature: &FrequencyFeature) -> Result<()> {
        let (c, h, w) = feature.0.dims3()?;
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::invalid(
                "fmre_forward",
                format!("spatial dims {h}×{w} not divisible by {ENCODER_STRIDE}"),
            ));
        }
        if c != ENCODER_WIDTHS[0] || h != self.image_size || w != self.image_size {
            return Err(Error::shape(
                "fmre_forward",
                format!("3×{0}×{0}", self.image_size),
                format!("{:?}", feature.0.shape()),
            ));
        }
        Ok(())
    }

    /// Training forward pass: returns `(m_mid, m_mid_c)` as `1×H×W` tensors.
    pub fn forward(&self, feature: &FrequencyFeature) -> Result<(Tensor, Tensor, FmreTrace)> {
        self.check_input(feature)?;
        let (latent, encoder) = self.encoder.forward(&feature.0)?;
        let s = self.image_size / ENCODER_STRIDE;
        debug_assert_eq!(latent.shape(), &[ENCODER_WIDTHS[4], s, s]);
        let (m_mid, mid) = self.decoder_mid.forward(&latent)?;
        let (m_c, mid_c) = self.decoder_mid_c.forward(&latent)?;
        Ok((m_mid, m_c, FmreTrace { encoder, mid, mid_c }))
    }

    /// Accumulates parameter gradients into `grads` (ordered as [`FmreParams::params`]).
    pub fn backward(&self, trace: &FmreTrace, g_mid: Tensor, g_mid_c: Tensor, grads: &mut [Tensor]) -> Result<()> {
        let ne = self.encoder.param_count();
        let nd = self.decoder_mid.param_count();
        if grads.len() != ne + 2 * nd {
            return Err(Error::shape("FmreParams::backward", ne + 2 * nd, grads.len()));
        }
        let (ge, rest) = grads.split_at_mut(ne);
        let (gm, gc) = rest.split_at_mut(nd);
        let mut g_latent = self
            .decoder_mid
            .backward(&trace.mid, g_mid, GradRequest::ALL, Some(gm))?
            .expect("input grad requested");
        let g2 = self
            .decoder_mid_c
            .backward(&trace.mid_c, g_mid_c, GradRequest::ALL, Some(gc))?
            .expect("input grad requested");
        g_latent.add_assign(&g2)?;
        self.encoder.backward(&trace.encoder, g_latent, GradRequest::PARAMS, Some(ge))?;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.decoder_mid.params());
        v.extend(self.decoder_mid_c.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder_mid.params_mut());
        v.extend(self.decoder_mid_c.params_mut());
        v
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect()
    }
}

/// Predicts `(m_mid, m_mid_c)` for one image's frequency feature.
pub fn fmre_forward(feature: &FrequencyFeature, params: &FmreParams) -> Result<(FrequencyMask, FrequencyMask)> {
    params.check_input(feature)?;
    let latent = params.encoder.infer(&feature.0)?;
    let m_mid = params.decoder_mid.infer(&latent)?;
    let m_c = params.decoder_mid_c.infer(&latent)?;
    Ok((FrequencyMask::from_tensor(&m_mid)?, FrequencyMask::from_tensor(&m_c)?))
}

/// `x_mid`: the image restricted to the bands selected by `m_mid`.
pub fn extract_mid(image: &Tensor, m_mid: &FrequencyMask) -> Result<Tensor> {
    band_filter(image, m_mid)
}

/// `x_pse`: the pseudo-generated image, keeping only the bands of `m_mid_c`.
pub fn build_pseudo(image: &Tensor, m_mid_c: &FrequencyMask) -> Result<Tensor> {
    band_filter(image, m_mid_c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_mask_with_grads;
    use crate::spectrum::{complement_mask, radial_mask};
    use crate::tensorops::{adam_step, AdamState};
    use crate::testutil::{naive_dft2, seeded_unit_tensor};

    #[test]
    fn zero_image_gives_zero_feature() {
        let f = freq_feature(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(f.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_has_single_center_bin() {
        let c = 0.25f32;
        let f = freq_feature(&Tensor::full(&[3, 16, 16], c)).unwrap();
        let expect = (1.0 + c * 256.0).ln();
        for ch in 0..3 {
            for (i, &v) in f.0.data()[ch * 256..(ch + 1) * 256].iter().enumerate() {
                if i == 8 * 16 + 8 {
                    assert!((v - expect).abs() < 1e-5);
                } else {
                    assert!(v.abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn feature_matches_direct_dft() {
        let x = seeded_unit_tensor(&[3, 16, 16], 1);
        let f = freq_feature(&x).unwrap();
        for (ch, (re, im)) in naive_dft2(&x).iter().enumerate() {
            for u in 0..16 {
                for v in 0..16 {
                    let k = ((u + 8) % 16) * 16 + (v + 8) % 16;
                    let expect = (re[u * 16 + v].hypot(im[u * 16 + v])).ln_1p();
                    assert!((f.0.data()[ch * 256 + k] as f64 - expect).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn masks_are_strictly_inside_unit_interval() {
        let p = FmreParams::new(32, 3).unwrap();
        for seed in 0..3 {
            let x = seeded_unit_tensor(&[3, 32, 32], seed);
            let (a, b) = fmre_forward(&freq_feature(&x).unwrap(), &p).unwrap();
            assert!(a.values().iter().chain(b.values()).all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn full_resolution_mask_shape() {
        let p = FmreParams::new(256, 1).unwrap();
        let x = seeded_unit_tensor(&[3, 256, 256], 2);
        let (_, _, trace) = p.forward(&freq_feature(&x).unwrap()).unwrap();
        let (m, c, _) = p.forward(&freq_feature(&x).unwrap()).unwrap();
        assert_eq!(m.shape(), &[1, 256, 256]);
        assert_eq!(c.shape(), &[1, 256, 256]);
        drop(trace);
    }

    #[test]
    fn encoder_halves_four_times() {
        let p = FmreParams::new(256, 1).unwrap();
        let mut cur = freq_feature(&seeded_unit_tensor(&[3, 256, 256], 3)).unwrap().0;
        let mut sizes = vec![];
        for layer in &p.encoder.layers {
            cur = Sequential::new(vec![layer.clone()]).infer(&cur).unwrap();
            if matches!(layer, Layer::Conv(_)) {
                sizes.push(cur.shape()[1]);
            }
        }
        assert_eq!(sizes, vec![128, 64, 32, 16]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(FmreParams::new(40, 0).is_err());
        let p = FmreParams::new(32, 0).unwrap();
        let f = FrequencyFeature(Tensor::zeros(&[3, 40, 40]));
        assert!(fmre_forward(&f, &p).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let p = FmreParams::new(32, 5).unwrap();
        let f = freq_feature(&seeded_unit_tensor(&[3, 32, 32], 6)).unwrap();
        assert_eq!(fmre_forward(&f, &p).unwrap(), fmre_forward(&f, &p).unwrap());
    }

    #[test]
    fn extract_and_pseudo_identities() {
        let x = seeded_unit_tensor(&[3, 64, 64], 7);
        let ones = FrequencyMask::ones(64, 64);
        assert!(extract_mid(&x, &ones).unwrap().max_abs_diff(&x).unwrap() < 1e-4);
        assert!(build_pseudo(&x, &ones).unwrap().max_abs_diff(&x).unwrap() < 1e-4);

        let mid = radial_mask(64, 64, 10.0, 30.0).unwrap();
        let dc = Tensor::full(&[3, 64, 64], 0.7);
        assert!(extract_mid(&dc, &mid).unwrap().data().iter().all(|v| v.abs() < 1e-5));

        let a = extract_mid(&x, &mid).unwrap();
        let b = build_pseudo(&x, &complement_mask(&mid)).unwrap();
        let sum = a.zip_map(&b, "sum", |p, q| p + q).unwrap();
        assert!(sum.max_abs_diff(&x).unwrap() < 1e-3);

        let pse = build_pseudo(&x, &complement_mask(&mid)).unwrap();
        assert!(((pse.mean() - x.mean()) / x.mean()).abs() < 1e-3);
    }

    #[test]
    fn preset_mid_band_energy_matches_per_bin_oracle() {
        let x = seeded_unit_tensor(&[1, 256, 256], 8);
        let mid = radial_mask(256, 256, 40.0, 120.0).unwrap();
        let y = extract_mid(&x, &mid).unwrap();
        let out_energy: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let (re, im) = &naive_dft2(&x)[0];
        let mut in_band = 0.0;
        for u in 0..256 {
            for v in 0..256 {
                if mid.get((u + 128) % 256, (v + 128) % 256) == 1.0 {
                    in_band += re[u * 256 + v].powi(2) + im[u * 256 + v].powi(2);
                }
            }
        }
        in_band /= 65536.0;
        assert!((out_energy - in_band).abs() / in_band < 1e-3);
    }

    #[test]
    fn mask_loss_alone_converges_to_preset() {
        let size = 32;
        let x = seeded_unit_tensor(&[3, size, size], 9);
        let feature = freq_feature(&x).unwrap();
        let target = radial_mask(size, size, 5.0, 15.0).unwrap().to_tensor();
        let target_c = target.map(|v| 1.0 - v);
        let mut p = FmreParams::new(size, 10).unwrap();
        let mut opt = AdamState::new(p.params(), 1e-3);
        let mut mse = f64::INFINITY;
        for _ in 0..500 {
            let (m, c, trace) = p.forward(&feature).unwrap();
            mse = m.zip_map(&target, "mse", |a, b| (a - b) * (a - b)).unwrap().mean();
            if mse < 0.01 {
                break;
            }
            let (_, gm, gc) = loss_mask_with_grads(&m, &c, &target, &target_c).unwrap();
            let mut grads = p.zero_grads();
            p.backward(&trace, gm, gc, &mut grads).unwrap();
            for (param, g) in p.params_mut().into_iter().zip(grads) {
                param.grad = g;
            }
            adam_step(&mut p.params_mut(), &mut opt).unwrap();
        }
        assert!(mse < 0.01, "mse {mse}");
    }
}
