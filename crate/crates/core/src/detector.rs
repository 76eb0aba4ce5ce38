//! The full detector: mask prediction, band filtering, reconstruction error
//! maps and the binary classifier, plus training and single-image detection.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{augment, load_sample, DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::fmre::{freq_feature, FmreParams};
use crate::losses::{loss_ce_logit, loss_mask_with_grads, loss_mid_rec_with_grad, LossTerms, LossWeights};
use crate::parallel::{try_map_indexed, Exec};
use crate::reconstructor::{recon_error, AeParams, ErrorMap};
use crate::spectrum::{band_filter_mask_grad, band_filter_spectrum, complement_mask, dft2, radial_mask, FrequencyMask};
use crate::tensorops::{adam_step, sigmoid_scalar, AdamState, Conv2d, GradRequest, Layer, Param, Sequential, Tensor, Trace};

pub const CLASSIFIER_INPUT_CHANNELS: usize = 6;
const CLASSIFIER_WIDTHS: [usize; 4] = [CLASSIFIER_INPUT_CHANNELS, 32, 64, 128];

/// Small conv net over the concatenated error maps, ending in one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub net: Sequential,
}

impl ClassifierParams {
    pub fn new(seed: u64) -> Self {
        let mut layers = Vec::new();
        for (i, w) in CLASSIFIER_WIDTHS.windows(2).enumerate() {
            layers.push(Layer::Conv(Conv2d::new(&format!("cls.{i}"), w[0], w[1], 3, 2, 1, seed)));
            layers.push(Layer::Relu);
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Conv(Conv2d::new("cls.head", CLASSIFIER_WIDTHS[3], 1, 1, 1, 0, seed)));
        ClassifierParams {
            net: Sequential::new(layers),
        }
    }

    fn check(input: &Tensor) -> Result<()> {
        let (c, _, _) = input.dims3()?;
        if c != CLASSIFIER_INPUT_CHANNELS {
            return Err(Error::shape("classifier", CLASSIFIER_INPUT_CHANNELS, c));
        }
        Ok(())
    }

    pub fn logit(&self, input: &Tensor) -> Result<f32> {
        Self::check(input)?;
        Ok(self.net.infer(input)?.data()[0])
    }

    pub fn forward(&self, input: &Tensor) -> Result<(f32, Trace)> {
        Self::check(input)?;
        let (y, trace) = self.net.forward(input)?;
        Ok((y.data()[0], trace))
    }

    /// Adds parameter gradients for `d loss / d logit = g` into `grads` and
    /// returns the input gradient.
    pub fn backward(&self, trace: &Trace, g: f32, grads: &mut [Tensor]) -> Result<Tensor> {
        let out = Tensor::new(vec![1, 1, 1], vec![g])?;
        Ok(self
            .net
            .backward(trace, out, GradRequest::ALL, Some(grads))?
            .expect("input grad requested"))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.net.zero_grads()
    }
}

/// Fixed training targets for one resolution and band.
#[derive(Clone, Debug)]
pub struct PresetMasks {
    pub mid: FrequencyMask,
    pub mid_c: FrequencyMask,
    mid_t: Tensor,
    mid_c_t: Tensor,
}

type PresetKey = (usize, u64, u64);

/// `M_mid = 1[r_lo ≤ d ≤ r_hi]` and its complement, built once per key.
pub fn preset_masks(size: usize, r_lo: f64, r_hi: f64) -> Result<Arc<PresetMasks>> {
    static CACHE: OnceLock<Mutex<HashMap<PresetKey, Arc<PresetMasks>>>> = OnceLock::new();
    let key = (size, r_lo.to_bits(), r_hi.to_bits());
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().expect("preset cache poisoned").get(&key) {
        return Ok(p.clone());
    }
    let mid = radial_mask(size, size, r_lo, r_hi)?;
    let mid_c = complement_mask(&mid);
    let p = Arc::new(PresetMasks {
        mid_t: mid.to_tensor(),
        mid_c_t: mid_c.to_tensor(),
        mid,
        mid_c,
    });
    cache.lock().expect("preset cache poisoned").insert(key, p.clone());
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    /// Probability of being generated.
    pub score: f64,
    pub label: Label,
    pub delta_x: ErrorMap,
    pub delta_x_pse: ErrorMap,
    pub m_mid: FrequencyMask,
    pub m_mid_c: FrequencyMask,
    pub x_pse: Tensor,
}

fn label_for(score: f64) -> Label {
    if score >= 0.5 {
        Label::Generated
    } else {
        Label::Real
    }
}

/// All trainable and frozen weights of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct FireModel {
    pub fmre: FmreParams,
    pub ae: AeParams,
    pub cls: ClassifierParams,
    pub r_lo: f64,
    pub r_hi: f64,
}

/// Loss terms and per-group gradients for one sample.
pub struct SampleGrads {
    pub terms: LossTerms,
    pub fmre: Vec<Tensor>,
    pub cls: Vec<Tensor>,
    pub ae: Option<Vec<Tensor>>,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl FireModel {
    pub fn new(image_size: usize, ae: AeParams, r_lo: f64, r_hi: f64, seed: u64) -> Result<Self> {
        radial_mask(1, 1, r_lo, r_hi)?;
        Ok(FireModel {
            fmre: FmreParams::new(image_size, seed)?,
            ae,
            cls: ClassifierParams::new(seed),
            r_lo,
            r_hi,
        })
    }

    pub fn image_size(&self) -> usize {
        self.fmre.image_size()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        let s = self.image_size();
        if (c, h, w) != (3, s, s) {
            return Err(Error::shape("detector", format!("3×{s}×{s}"), format!("{:?}", image.shape())));
        }
        Ok(())
    }

    /// Full inference pass.
    pub fn forward(&self, image: &Tensor) -> Result<DetectionResult> {
        self.check_image(image)?;
        let feature = freq_feature(image)?;
        let (m_mid, m_mid_c) = crate::fmre::fmre_forward(&feature, &self.fmre)?;
        let x_pse = band_filter_spectrum(&dft2(image)?, &m_mid_c)?;
        let delta_x = recon_error(image, &self.ae.reconstruct(image)?)?;
        let delta_x_pse = recon_error(&x_pse, &self.ae.reconstruct(&x_pse)?)?;
        let input = Tensor::concat_channels(&delta_x.0, &delta_x_pse.0)?;
        let score = sigmoid_scalar(self.cls.logit(&input)?) as f64;
        Ok(DetectionResult {
            score,
            label: label_for(score),
            delta_x,
            delta_x_pse,
            m_mid,
            m_mid_c,
            x_pse,
        })
    }

    pub fn score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.forward(image)?.score)
    }

    /// Loss terms for one labelled sample without gradients.
    pub fn sample_losses(&self, image: &Tensor, target: f32) -> Result<LossTerms> {
        let presets = preset_masks(self.image_size(), self.r_lo, self.r_hi)?;
        let r = self.forward(image)?;
        let spec = dft2(image)?;
        let x_mid = band_filter_spectrum(&spec, &r.m_mid)?;
        let input = Tensor::concat_channels(&r.delta_x.0, &r.delta_x_pse.0)?;
        let logit = self.cls.logit(&input)?;
        Ok(LossTerms {
            l_mid_rec: crate::losses::loss_mid_rec(&x_mid, &r.delta_x.0)?,
            l_mask: crate::losses::loss_mask(&r.m_mid.to_tensor(), &r.m_mid_c.to_tensor(), &presets.mid_t, &presets.mid_c_t)?,
            l_ce: loss_ce_logit(target, logit).0,
        })
    }

    /// Loss terms and gradients of the weighted total for one sample.
    pub fn sample_grads(&self, image: &Tensor, target: f32, w: &LossWeights) -> Result<SampleGrads> {
        self.check_image(image)?;
        let presets = preset_masks(self.image_size(), self.r_lo, self.r_hi)?;
        let feature = freq_feature(image)?;
        let (m, mc, ftrace) = self.fmre.forward(&feature)?;
        let spec = dft2(image)?;
        let x_mid = band_filter_spectrum(&spec, &FrequencyMask::from_tensor(&m)?)?;
        let x_pse = band_filter_spectrum(&spec, &FrequencyMask::from_tensor(&mc)?)?;

        let train_ae = self.ae.trainable;
        let (rec_x, trace_x) = if train_ae {
            let (y, t) = self.ae.reconstruct_traced(image)?;
            (y, Some(t))
        } else {
            (self.ae.reconstruct(image)?, None)
        };
        let dx = recon_error(image, &rec_x)?.0;
        let (rec_p, trace_p) = self.ae.reconstruct_traced(&x_pse)?;
        let dp = recon_error(&x_pse, &rec_p)?.0;

        let (l_mid_rec, g_xmid) = loss_mid_rec_with_grad(&x_mid, &dx)?;
        let (l_mask, gm, gmc) = loss_mask_with_grads(&m, &mc, &presets.mid_t, &presets.mid_c_t)?;
        let input = Tensor::concat_channels(&dx, &dp)?;
        let (logit, ctrace) = self.cls.forward(&input)?;
        let (l_ce, g_logit) = loss_ce_logit(target, logit);
        let terms = LossTerms { l_mid_rec, l_mask, l_ce };

        let mut g_cls = self.cls.zero_grads();
        let g_in = self.cls.backward(&ctrace, w.lambda2 as f32 * g_logit, &mut g_cls)?;
        let g_dx = g_in.channels(0, 3)?;
        let g_dp = g_in.channels(3, 6)?;

        let mut g_ae = train_ae.then(|| self.ae.zero_grads());
        // Δ_pse = |R(x_pse) − x_pse|
        let s_p = rec_p.zip_map(&x_pse, "abs_backward", |a, b| sign(a - b))?;
        let g_rp = g_dp.zip_map(&s_p, "abs_backward", |g, s| g * s)?;
        let through_ae = self
            .ae
            .backward(&trace_p, g_rp.clone(), None, true, g_ae.as_deref_mut())?
            .expect("input grad requested");
        let g_xpse = through_ae.zip_map(&g_rp, "abs_backward", |a, b| a - b)?;

        let lambda0 = w.lambda0 as f32;
        let g_xmid_w = g_xmid.map(|v| lambda0 * v);
        let mut g_mid = band_filter_mask_grad(&spec, &g_xmid_w)?;
        let mut g_mid_c = band_filter_mask_grad(&spec, &g_xpse)?;
        let lambda1 = w.lambda1 as f32;
        g_mid.add_assign(&gm.map(|v| lambda1 * v))?;
        g_mid_c.add_assign(&gmc.map(|v| lambda1 * v))?;
        let mut g_fmre = self.fmre.zero_grads();
        self.fmre.backward(&ftrace, g_mid, g_mid_c, &mut g_fmre)?;

        if let (Some(trace_x), Some(buf)) = (trace_x, g_ae.as_deref_mut()) {
            // Δ_x feeds both the classifier and L_mid_rec (with sign −1)
            let g_dx_total = g_dx.zip_map(&g_xmid_w, "mid_rec_backward", |a, b| a - b)?;
            let s_x = rec_x.zip_map(image, "abs_backward", |a, b| sign(a - b))?;
            let g_rx = g_dx_total.zip_map(&s_x, "abs_backward", |g, s| g * s)?;
            self.ae.backward(&trace_x, g_rx, None, false, Some(buf))?;
        }
        Ok(SampleGrads {
            terms,
            fmre: g_fmre,
            cls: g_cls,
            ae: g_ae,
        })
    }

    /// Parameters updated by training, in optimiser order.
    pub fn trainable_params(&self) -> Vec<&Param> {
        let mut v = self.fmre.params();
        v.extend(self.cls.params());
        if self.ae.trainable {
            v.extend(self.ae.params());
        }
        v
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let train_ae = self.ae.trainable;
        let mut v = self.fmre.params_mut();
        v.extend(self.cls.params_mut());
        if train_ae {
            v.extend(self.ae.params_mut());
        }
        v
    }

    pub fn to_checkpoint(&self, config: &Config) -> Result<Checkpoint> {
        let mut meta = serde_json::to_value(config)?;
        meta["kind"] = "detector".into();
        meta["preset_band"] = serde_json::json!([self.r_lo, finite_or_null(self.r_hi)]);
        let mut ck = Checkpoint::new(meta);
        for p in self.fmre.params().into_iter().chain(self.cls.params()).chain(self.ae.params()) {
            ck.insert(p.name.clone(), p.value.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Config)> {
        if ck.kind() != Some("detector") {
            return Err(Error::Checkpoint(format!(
                "expected a detector checkpoint, found kind {:?}",
                ck.kind().unwrap_or("none")
            )));
        }
        let mut cfg_value = ck.config.clone();
        if let Some(o) = cfg_value.as_object_mut() {
            o.remove("kind");
            o.remove("preset_band");
        }
        let config: Config = serde_json::from_value(cfg_value)?;
        let (r_lo, r_hi) = config.radii();
        let mut model = FireModel::new(config.image_size, AeParams::new(0), r_lo, r_hi, 0)?;
        model.ae.trainable = !config.freeze_ae;
        fill_params(ck, model.fmre.params_mut())?;
        fill_params(ck, model.cls.params_mut())?;
        fill_params(ck, model.ae.params_mut())?;
        Ok((model, config))
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        v.into()
    } else {
        serde_json::Value::Null
    }
}

pub(crate) fn fill_params<'a>(ck: &Checkpoint, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
    for p in params {
        let t = ck.get(&p.name)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// Autoencoder-only checkpoint as written by pretraining.
pub fn ae_to_checkpoint(ae: &AeParams, meta: serde_json::Value) -> Checkpoint {
    let mut m = meta;
    if !m.is_object() {
        m = serde_json::json!({});
    }
    m["kind"] = "autoencoder".into();
    let mut ck = Checkpoint::new(m);
    for p in ae.params() {
        ck.insert(p.name.clone(), p.value.clone());
    }
    ck
}

/// Accepts autoencoder and detector checkpoints alike.
pub fn ae_from_checkpoint(ck: &Checkpoint) -> Result<AeParams> {
    match ck.kind() {
        Some("autoencoder") | Some("detector") => {}
        other => return Err(Error::Checkpoint(format!("no autoencoder in checkpoint of kind {other:?}"))),
    }
    let mut ae = AeParams::new(0);
    fill_params(ck, ae.params_mut())?;
    Ok(ae)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_mid_rec: f64,
    pub l_mask: f64,
    pub l_ce: f64,
    pub total: f64,
}

impl StepLog {
    pub fn csv_header() -> &'static str {
        "step,l_mid_rec,l_mask,l_ce,total"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_mid_rec, self.l_mask, self.l_ce, self.total)
    }
}

/// In-memory labelled images.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub targets: Vec<f32>,
}

impl TrainSet {
    pub fn load(manifest: &DatasetManifest, split: Split, size: usize, exec: Exec) -> Result<Self> {
        let entries = manifest.split(split);
        let images = try_map_indexed(exec, entries.len(), |i| load_sample(&entries[i].path, size))?;
        let targets = entries.iter().map(|e| e.label.target()).collect();
        Ok(TrainSet { images, targets })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::data::sample_rng(seed, 0x0bde, epoch as u64));
    idx
}

/// Trains the mask module and classifier (and the AE when unfrozen).
///
/// Returns the trained model and the per-step log. The log is also written
/// to `config.paths.log` when set, and checkpoints go to
/// `config.paths.checkpoint_dir` every `config.checkpoint_every` epochs.
pub fn train(data: &TrainSet, ae: AeParams, config: &Config, exec: Exec) -> Result<(FireModel, Vec<StepLog>)> {
    config.validate()?;
    let pos = data.targets.iter().filter(|&&t| t == 1.0).count();
    if pos == 0 || pos == data.len() {
        return Err(Error::Manifest("training data needs both real and generated images".into()));
    }
    let (r_lo, r_hi) = config.radii();
    let mut ae = ae;
    ae.trainable = !config.freeze_ae;
    let mut model = FireModel::new(config.image_size, ae, r_lo, r_hi, config.seed)?;
    let mut opt = AdamState::new(model.trainable_params(), config.lr);
    let w = config.loss_weights;
    let mut log_file = match &config.paths.log {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "{}", StepLog::csv_header())?;
            Some(f)
        }
        None => None,
    };
    let mut log = Vec::new();
    for epoch in 0..config.epochs {
        let order = epoch_order(data.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            let m = &model;
            let per = try_map_indexed(exec, batch.len(), |j| {
                let idx = batch[j];
                let mut rng = config.augment.rng_for(epoch, idx);
                let x = augment(&data.images[idx], &config.augment, &mut rng)?;
                m.sample_grads(&x, data.targets[idx], &w)
            })?;
            let n = batch.len() as f64;
            let mut terms = LossTerms::default();
            for (s, &idx) in per.iter().zip(batch) {
                let t = &s.terms;
                if !(t.l_mid_rec.is_finite() && t.l_mask.is_finite() && t.l_ce.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "training loss at step {} (epoch {epoch}); sample {idx} in batch {batch:?}",
                        opt.steps()
                    )));
                }
                terms.l_mid_rec += t.l_mid_rec / n;
                terms.l_mask += t.l_mask / n;
                terms.l_ce += t.l_ce / n;
            }
            let total = terms.total(&w).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m}; batch {batch:?}")),
                e => e,
            })?;
            let mut sums: Vec<Tensor> = model.trainable_params().iter().map(|p| Tensor::zeros_like(&p.value)).collect();
            for s in &per {
                let mut it = sums.iter_mut();
                for g in s.fmre.iter().chain(&s.cls).chain(s.ae.iter().flatten()) {
                    it.next().expect("gradient slot").add_assign(g)?;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for (p, mut g) in model.trainable_params_mut().into_iter().zip(sums) {
                g.scale_in_place(inv);
                p.grad = g;
            }
            adam_step(&mut model.trainable_params_mut(), &mut opt)?;
            let row = StepLog {
                step: opt.steps(),
                l_mid_rec: terms.l_mid_rec,
                l_mask: terms.l_mask,
                l_ce: terms.l_ce,
                total,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", row.csv_row())?;
            }
            log.push(row);
        }
        if let Some(dir) = &config.paths.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                model.to_checkpoint(config)?.save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok((model, log))
}

/// Loads, resizes and scores one image file.
pub fn detect(image_path: &Path, model: &FireModel) -> Result<DetectionResult> {
    model.forward(&load_sample(image_path, model.image_size())?)
}

/// Loads a detector checkpoint and scores one image file.
pub fn detect_with_checkpoint(image_path: &Path, ckpt: &Path) -> Result<DetectionResult> {
    let (model, _) = FireModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    detect(image_path, &model)
}
