//! AUC / ACC, the training-free mean-error baseline, and perturbation sweeps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Perturbation;
use crate::error::{Error, Result};
use crate::parallel::{try_map_indexed, Exec};
use crate::reconstructor::{recon_error, AeParams};
use crate::tensorops::{sigmoid_scalar, Tensor};

/// Scores with parallel 0/1 labels (1 = generated).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("ScoreSet", scores.len(), labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid("ScoreSet", format!("label {l} is not 0 or 1")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("score set".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> (u64, u64) {
        let p = self.labels.iter().filter(|&&l| l == 1).count() as u64;
        (p, self.labels.len() as u64 - p)
    }

    fn need_both(&self) -> Result<(u64, u64)> {
        let (p, n) = self.class_counts();
        if p == 0 || n == 0 {
            return Err(Error::invalid("auc", "both classes must be present"));
        }
        Ok((p, n))
    }
}

/// Twice the Mann-Whitney count: 2 per winning pair, 1 per tie.
fn doubled_wins_sorted(s: &ScoreSet) -> u64 {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut negs_below = 0u64;
    let mut total = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && s.scores[idx[j]] == s.scores[idx[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u64, 0u64);
        for &k in &idx[i..j] {
            if s.labels[k] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        total += 2 * pos * negs_below + pos * neg;
        negs_below += neg;
        i = j;
    }
    total
}

/// ROC AUC via ranking, O(n log n). Ties earn half credit.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (p, n) = s.need_both()?;
    Ok(doubled_wins_sorted(s) as f64 / (2 * p * n) as f64)
}

/// ROC AUC by exhaustive pair counting, O(P·N).
pub fn auc_pairs(s: &ScoreSet) -> Result<f64> {
    let (p, n) = s.need_both()?;
    let mut total = 0u64;
    for (i, &li) in s.labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in s.labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            total += match s.scores[i].partial_cmp(&s.scores[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(total as f64 / (2 * p * n) as f64)
}

/// Fraction correct when `score ≥ threshold` means generated. 0 on empty input.
pub fn acc(s: &ScoreSet, threshold: f64) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let correct = s
        .scores
        .iter()
        .zip(&s.labels)
        .filter(|(&sc, &l)| (sc >= threshold) == (l == 1))
        .count();
    correct as f64 / s.len() as f64
}

/// Fixes the standardisation used by [`baseline_mean_error`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCalibration {
    pub mean: f64,
    pub std: f64,
}

impl Default for BaselineCalibration {
    fn default() -> Self {
        BaselineCalibration { mean: 0.0, std: 1.0 }
    }
}

impl BaselineCalibration {
    /// Mean and standard deviation of a set of raw mean errors.
    pub fn fit(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        BaselineCalibration { mean, std }
    }

    /// Lower error maps to a higher generated-score.
    pub fn score(&self, mean_error: f64) -> f64 {
        sigmoid_scalar((-(mean_error - self.mean) / self.std) as f32) as f64
    }
}

/// Mean of `|R(x) − x|`.
pub fn mean_recon_error(image: &Tensor, ae: &AeParams) -> Result<f64> {
    Ok(recon_error(image, &ae.reconstruct(image)?)?.mean())
}

/// Training-free comparison score from the AE reconstruction error alone.
pub fn baseline_mean_error(image: &Tensor, ae: &AeParams, cal: &BaselineCalibration) -> Result<f64> {
    Ok(cal.score(mean_recon_error(image, ae)?))
}

/// The sweep grid used when none is given.
pub fn default_grid() -> Vec<Perturbation> {
    vec![
        Perturbation::Jpeg(90),
        Perturbation::Jpeg(70),
        Perturbation::Jpeg(50),
        Perturbation::GaussianBlur(1.0),
        Perturbation::GaussianBlur(2.0),
        Perturbation::GaussianNoise(0.02),
        Perturbation::GaussianNoise(0.05),
        Perturbation::CenterCrop(0.9),
        Perturbation::CenterCrop(0.7),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub level: f64,
    pub auc: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub clean_auc: f64,
    pub clean_acc: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "kind,level,auc,acc")?;
        writeln!(f, "clean,0,{},{}", self.clean_auc, self.clean_acc)?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.kind, r.level, r.auc, r.acc)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Scores every image clean and under each perturbation in `grid`.
///
/// `score` maps an image to a generated-probability; perturbation noise for
/// image `i` is seeded from `seed + i`.
pub fn perturb_sweep<F>(
    images: &[Tensor],
    labels: &[u8],
    grid: &[Perturbation],
    seed: u64,
    exec: Exec,
    score: F,
) -> Result<SweepReport>
where
    F: Fn(&Tensor) -> Result<f64> + Sync + Send,
{
    let run = |p: Option<Perturbation>| -> Result<ScoreSet> {
        let scores = try_map_indexed(exec, images.len(), |i| match p {
            None => score(&images[i]),
            Some(p) => score(&crate::data::perturb(&images[i], p, seed.wrapping_add(i as u64))?),
        })?;
        ScoreSet::new(scores, labels.to_vec())
    };
    let clean = run(None)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let s = run(Some(p))?;
        rows.push(SweepRow {
            kind: p.kind().into(),
            level: p.level(),
            auc: auc(&s)?,
            acc: acc(&s, 0.5),
        });
    }
    Ok(SweepReport {
        clean_auc: auc(&clean)?,
        clean_acc: acc(&clean, 0.5),
        rows,
    })
}
