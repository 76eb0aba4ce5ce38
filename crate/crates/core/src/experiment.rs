//! Desk-scale detection experiment on the procedural corpus.
//!
//! Reals are procedural textures, fakes are autoencoder round trips of a
//! disjoint set of textures. Both classes then pass through the same storage
//! step: Gaussian noise at a per-image level drawn from `[0, storage_noise]`
//! and 8-bit quantisation as if saved to PNG. Everything stays in memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::detector::{train, FireModel, StepLog, TrainSet};
use crate::data::{add_gaussian_noise, sample_rng};
use crate::error::Result;
use crate::eval::{acc, auc, mean_recon_error, BaselineCalibration, ScoreSet};
use crate::parallel::{map_indexed, try_map_indexed, Exec};
use crate::reconstructor::{mean_recon_mse, pretrain_ae, AeParams, PretrainConfig, PretrainReport};
use crate::synth::texture;
use crate::tensorops::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskSpec {
    pub size: usize,
    /// Real images in the training split; they also pretrain the AE.
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    /// Seed of the corpus and the AE.
    pub data_seed: u64,
    /// Upper bound of the per-image storage noise level.
    pub storage_noise: f32,
    pub pretrain: PretrainConfig,
}

impl Default for DeskSpec {
    fn default() -> Self {
        DeskSpec {
            size: 64,
            train_real: 1200,
            train_fake: 1200,
            test_real: 800,
            test_fake: 800,
            data_seed: 0,
            storage_noise: 0.04,
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Rounds every value to the nearest multiple of 1/255.
pub fn quantize_u8(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Corpus and pretrained AE shared by every detector run on it.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub ae: AeParams,
    pub ae_report: PretrainReport,
    /// Held-out MSE of the AE before pretraining.
    pub untrained_mse: f64,
    pub train: TrainSet,
    pub test_images: Vec<Tensor>,
    /// 1 for generated.
    pub test_labels: Vec<u8>,
}

fn block_seed(spec: &DeskSpec, offset: u64, i: usize) -> u64 {
    spec.data_seed.wrapping_mul(0x9e37_79b9).wrapping_add(offset + i as u64)
}

fn texture_block(spec: &DeskSpec, offset: u64, count: usize, exec: Exec) -> Vec<Tensor> {
    map_indexed(exec, count, |i| texture(spec.size, block_seed(spec, offset, i)))
}

fn store(spec: &DeskSpec, offset: u64, i: usize, x: &Tensor) -> Tensor {
    let mut rng = sample_rng(block_seed(spec, offset, i), 0x570e, 0);
    let sigma = rng.random_range(0.0..=spec.storage_noise);
    quantize_u8(&add_gaussian_noise(x, sigma, &mut rng))
}

fn store_block(spec: &DeskSpec, offset: u64, xs: Vec<Tensor>, exec: Exec) -> Vec<Tensor> {
    map_indexed(exec, xs.len(), |i| store(spec, offset, i, &xs[i]))
}

impl DeskData {
    pub fn build(spec: &DeskSpec, exec: Exec) -> Result<Self> {
        let blocks = [spec.train_real, spec.train_fake, spec.test_real, spec.test_fake];
        let mut offsets = [0u64; 4];
        for k in 1..4 {
            offsets[k] = offsets[k - 1] + blocks[k - 1] as u64;
        }
        let train_real = store_block(spec, offsets[0], texture_block(spec, offsets[0], spec.train_real, exec), exec);
        let test_real = store_block(spec, offsets[2], texture_block(spec, offsets[2], spec.test_real, exec), exec);
        let heldout: Vec<Tensor> = test_real.iter().take(64).cloned().collect();
        let init = AeParams::new(spec.data_seed);
        let untrained_mse = mean_recon_mse(&init, &heldout, exec)?;
        let pcfg = PretrainConfig {
            seed: spec.data_seed,
            ..spec.pretrain.clone()
        };
        let (ae, ae_report) = pretrain_ae(init, &train_real, &heldout, &pcfg, exec)?;
        let fake = |offset: u64, count: usize| -> Result<Vec<Tensor>> {
            let src = texture_block(spec, offset, count, exec);
            try_map_indexed(exec, count, |i| Ok(store(spec, offset, i, &ae.reconstruct(&quantize_u8(&src[i]))?)))
        };
        let train_fake = fake(offsets[1], spec.train_fake)?;
        let test_fake = fake(offsets[3], spec.test_fake)?;
        let mut train = TrainSet::default();
        for (img, t) in train_real.into_iter().map(|x| (x, 0.0)).chain(train_fake.into_iter().map(|x| (x, 1.0))) {
            train.images.push(img);
            train.targets.push(t);
        }
        let test_labels = std::iter::repeat_n(0u8, test_real.len()).chain(std::iter::repeat_n(1u8, test_fake.len())).collect();
        let mut test_images = test_real;
        test_images.extend(test_fake);
        Ok(DeskData {
            ae,
            ae_report,
            untrained_mse,
            train,
            test_images,
            test_labels,
        })
    }

    pub fn test_reals(&self) -> impl Iterator<Item = &Tensor> {
        self.test_images.iter().zip(&self.test_labels).filter(|(_, &l)| l == 0).map(|(x, _)| x)
    }

    /// AUC and ACC of the training-free mean-error baseline on the test split.
    pub fn baseline(&self, exec: Exec) -> Result<(f64, f64)> {
        let errors = try_map_indexed(exec, self.test_images.len(), |i| mean_recon_error(&self.test_images[i], &self.ae))?;
        let cal = BaselineCalibration::fit(&errors);
        let s = ScoreSet::new(errors.iter().map(|&e| cal.score(e)).collect(), self.test_labels.clone())?;
        Ok((auc(&s)?, acc(&s, 0.5)))
    }
}

#[derive(Clone, Debug)]
pub struct DeskRun {
    pub model: FireModel,
    pub log: Vec<StepLog>,
    pub scores: Vec<f64>,
    pub auc: f64,
    pub acc: f64,
}

/// Default detector settings for the corpus size.
pub fn desk_config(spec: &DeskSpec, seed: u64, epochs: usize) -> Config {
    Config {
        seed,
        image_size: spec.size,
        epochs,
        ..Config::default()
    }
}

/// Trains a detector on `data` and scores the test split.
pub fn run_detector(data: &DeskData, config: &Config, exec: Exec) -> Result<DeskRun> {
    let (model, log) = train(&data.train, data.ae.clone(), config, exec)?;
    let scores = try_map_indexed(exec, data.test_images.len(), |i| model.score(&data.test_images[i]))?;
    let s = ScoreSet::new(scores.clone(), data.test_labels.clone())?;
    Ok(DeskRun {
        auc: auc(&s)?,
        acc: acc(&s, 0.5),
        model,
        log,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_corpus_runs_end_to_end() {
        let spec = DeskSpec {
            size: 16,
            train_real: 8,
            train_fake: 8,
            test_real: 4,
            test_fake: 4,
            data_seed: 1,
            storage_noise: 0.04,
            pretrain: PretrainConfig {
                epochs: 1,
                batch_size: 4,
                ..PretrainConfig::default()
            },
        };
        let data = DeskData::build(&spec, Exec::default()).unwrap();
        assert_eq!(data.train.len(), 16);
        assert_eq!(data.test_reals().count(), 4);
        assert!(data.test_images.iter().all(|x| quantize_u8(x) == *x));
        let cfg = Config {
            batch_size: 4,
            ..desk_config(&spec, 0, 1)
        };
        let run = run_detector(&data, &cfg, Exec::default()).unwrap();
        assert_eq!(run.log.len(), 4);
        assert!((0.0..=1.0).contains(&run.auc));
        let (b, _) = data.baseline(Exec::default()).unwrap();
        assert!((0.0..=1.0).contains(&b));
    }
}
