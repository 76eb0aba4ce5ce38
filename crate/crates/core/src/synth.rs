//! Procedural texture corpus for desk-scale experiments.
//!
//! Each image mixes a coloured power-law noise field and a few flat shapes
//! with hard edges. Half the images are defocused and half carry sensor-like
//! grain. The spectral slope, shape count, blur and grain level vary per
//! image, so the corpus spans smooth and rough content.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex32;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{gaussian_blur, jpeg_round_trip, sample_rng, save_png, DatasetManifest, Label, ManifestEntry, Split};
use crate::error::Result;
use crate::parallel::{try_map_indexed, Exec};
use crate::reconstructor::AeParams;
use crate::spectrum::{idft2_with_residual, Spectrum};
use crate::tensorops::Tensor;

/// Zero-mean, unit-variance field with power spectrum `∝ (f² + f₀²)^(−β)`.
fn power_law_field(size: usize, beta: f32, rng: &mut impl Rng) -> Vec<f32> {
    let n = size;
    let mut data = Vec::with_capacity(n * n);
    for u in 0..n {
        let fu = if u <= n / 2 { u as f32 } else { u as f32 - n as f32 };
        for v in 0..n {
            let fv = if v <= n / 2 { v as f32 } else { v as f32 - n as f32 };
            let f2 = fu * fu + fv * fv;
            let amp = if f2 == 0.0 { 0.0 } else { (f2 + 1.0).powf(-beta / 2.0) };
            let re: f32 = StandardNormal.sample(rng);
            let im: f32 = StandardNormal.sample(rng);
            data.push(Complex32::new(re * amp, im * amp));
        }
    }
    let spec = Spectrum::new(1, n, n, data, false).expect("square spectrum");
    let (field, _) = idft2_with_residual(&spec).expect("uncentred spectrum");
    let mut v = field.into_data();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
    let s = if var > 0.0 { var.sqrt() } else { 1.0 };
    for x in &mut v {
        *x = ((*x as f64 - mean) / s) as f32;
    }
    v
}

/// One procedural image, a pure function of `(size, seed)`.
pub fn texture(size: usize, seed: u64) -> Tensor {
    let mut rng = sample_rng(seed, 0x7e47, size as u64);
    let plane = size * size;
    let beta = rng.random_range(1.0f32..3.5);
    let lum = power_law_field(size, beta, &mut rng);
    let chroma = [
        power_law_field(size, beta + 0.5, &mut rng),
        power_law_field(size, beta + 0.5, &mut rng),
    ];
    let base: [f32; 3] = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
    let contrast = rng.random_range(0.08f32..0.22);
    let tint = rng.random_range(0.0f32..0.08);
    let mut out = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let ch = match c {
                0 => chroma[0][i],
                1 => -0.5 * (chroma[0][i] + chroma[1][i]),
                _ => chroma[1][i],
            };
            out[c * plane + i] = base[c] + contrast * lum[i] + tint * ch;
        }
    }
    let shapes = rng.random_range(0..5);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let alpha = rng.random_range(0.3f32..0.9);
        let cy = rng.random_range(0.0..size as f32);
        let cx = rng.random_range(0.0..size as f32);
        let r = rng.random_range(size as f32 * 0.05..size as f32 * 0.3);
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        let p = &mut out[c * plane + y * size + x];
                        *p = (1.0 - alpha) * *p + alpha * col;
                    }
                }
            }
        }
    }
    let mut t = Tensor::new(vec![3, size, size], out).expect("sized by construction");
    if rng.random_bool(0.5) {
        t = gaussian_blur(&t, rng.random_range(0.5f32..2.0));
    }
    let grain = if rng.random_bool(0.5) { rng.random_range(0.0f32..0.04) } else { 0.0 };
    for p in t.data_mut() {
        let g: f32 = StandardNormal.sample(&mut rng);
        *p = (*p + grain * g).clamp(0.0, 1.0);
    }
    t
}

/// A corpus on disk plus its manifest path.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub size: usize,
    /// Real images per split.
    pub real: [usize; 3],
    /// Generated images per split; each one round-trips a fresh texture.
    pub generated: [usize; 3],
    pub seed: u64,
    /// Re-encode generated images once as JPEG at this quality.
    pub jpeg_quality: Option<u8>,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Writes real textures and AE round trips of disjoint textures as PNGs,
/// with a JSON Lines manifest next to them.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, ae: &AeParams, exec: Exec) -> Result<Corpus> {
    std::fs::create_dir_all(dir)?;
    let mut jobs = Vec::new();
    let mut next_seed = 0u64;
    for (k, &split) in SPLITS.iter().enumerate() {
        for (label, count) in [(Label::Real, spec.real[k]), (Label::Generated, spec.generated[k])] {
            for i in 0..count {
                jobs.push((split, label, i, next_seed));
                next_seed += 1;
            }
        }
    }
    let entries = try_map_indexed(exec, jobs.len(), |j| {
        let (split, label, i, s) = jobs[j];
        let mut x = texture(spec.size, spec.seed.wrapping_mul(0x1000_0000_01b3).wrapping_add(s));
        if label == Label::Generated {
            x = ae.reconstruct(&x)?;
            if let Some(q) = spec.jpeg_quality {
                x = jpeg_round_trip(&x, q)?;
            }
        }
        let name = format!("{}_{}_{i:05}.png", split_name(split), label.as_str());
        save_png(&x, &dir.join(&name))?;
        Ok::<_, crate::Error>(ManifestEntry {
            path: PathBuf::from(name),
            label,
            split,
        })
    })?;
    let manifest_path = dir.join("manifest.jsonl");
    let rel = DatasetManifest::new(entries);
    rel.save(&manifest_path)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        manifest_path,
        manifest,
    })
}

/// Real-only textures in memory, e.g. for autoencoder pretraining.
pub fn textures(size: usize, count: usize, seed: u64, exec: Exec) -> Vec<Tensor> {
    crate::parallel::map_indexed(exec, count, |i| texture(size, seed.wrapping_add(0x5eed_0000 + i as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_in_range() {
        let a = texture(32, 1);
        assert_eq!(a, texture(32, 1));
        assert_ne!(a, texture(32, 2));
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.max() > a.min());
    }

    #[test]
    fn corpus_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            size: 16,
            real: [3, 1, 2],
            generated: [3, 1, 2],
            seed: 0,
            jpeg_quality: Some(90),
        };
        let c = write_corpus(dir.path(), &spec, &AeParams::new(0), Exec::default()).unwrap();
        assert_eq!(c.manifest.entries.len(), 12);
        c.manifest.check_trainable().unwrap();
        assert_eq!(c.manifest.split(Split::Test).len(), 4);
        assert!(c.manifest.entries.iter().all(|e| e.path.exists()));
    }
}
