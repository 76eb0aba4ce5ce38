//! Manifests, image I/O, resizing, training augmentations and evaluation-time
//! perturbations.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorops::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

impl Label {
    /// 1 for generated, 0 for real.
    pub fn target(self) -> f32 {
        match self {
            Label::Real => 0.0,
            Label::Generated => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Generated => "generated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { entries }
    }

    /// Parses JSON Lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            entries.push(e);
        }
        let m = DatasetManifest { entries };
        m.check_duplicates()?;
        Ok(m)
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    /// Every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            if !e.path.exists() {
                return Err(Error::Manifest(format!("missing file {}", e.path.display())));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    fn check_duplicates(&self) -> Result<()> {
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.path, e.split) {
                return Err(Error::Manifest(format!(
                    "{} listed more than once ({prev:?} and {:?})",
                    e.path.display(),
                    e.split
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn labels_in(&self, split: Split) -> HashSet<Label> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.label).collect()
    }

    /// Both classes must be present in the training split.
    pub fn check_trainable(&self) -> Result<()> {
        let labels = self.labels_in(Split::Train);
        for l in [Label::Real, Label::Generated] {
            if !labels.contains(&l) {
                return Err(Error::Manifest(format!("train split has no {} images", l.as_str())));
            }
        }
        Ok(())
    }
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        raw[p * 3 + c] as f32 / 255.0
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", "3 channels", c));
    }
    let d = t.data();
    let plane = h * w;
    let buf = (0..plane * 3).map(|i| to_u8(d[(i % 3) * plane + i / 3])).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims"))
}

/// Decodes a PNG or JPEG into `3×H×W` with values `v/255`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    Ok(rgb_to_tensor(&image::load_from_memory(bytes)?.to_rgb8()))
}

/// Loads and brings an image to `size×size` via [`resize_short_side`].
pub fn load_sample(path: &Path, size: usize) -> Result<Tensor> {
    Ok(resize_short_side(&load_image(path)?, size))
}

/// Writes a 3-channel tensor as 8-bit PNG, rounding `255·v`.
pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a single-channel tensor (`1×H×W` or `H×W`) as 8-bit grayscale PNG.
pub fn save_gray_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape("save_gray_png", "1×H×W", format!("{s:?}"))),
    };
    let buf = t.data().iter().map(|&v| to_u8(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from dims");
    img.save_with_format(path, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear sample with half-pixel centres and edge clamping.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of every channel to `out_h×out_w`.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = image.dims3().expect("resize_bilinear expects C×H×W");
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let (sy, sx) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.data().chunks_exact(h * w) {
        for oy in 0..out_h {
            let y = (oy as f32 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let x = (ox as f32 + 0.5) * sx - 0.5;
                out.push(sample_bilinear(plane, h, w, y, x));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("sized by construction")
}

/// Crops `out_h×out_w` starting at `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = image.dims3().expect("crop expects C×H×W");
    assert!(top + out_h <= h && left + out_w <= w, "crop window out of bounds");
    let d = image.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let r = (i / out_w) % out_h;
        let col = i % out_w;
        d[ch * h * w + (top + r) * w + left + col]
    })
}

pub fn center_crop(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (_, h, w) = image.dims3().expect("center_crop expects C×H×W");
    crop(image, (h - out_h) / 2, (w - out_w) / 2, out_h, out_w)
}

/// Scales so the short side equals `target`, then centre-crops to a square.
pub fn resize_short_side(image: &Tensor, target: usize) -> Tensor {
    let (_, h, w) = image.dims3().expect("resize_short_side expects C×H×W");
    let short = h.min(w) as f64;
    let scale = target as f64 / short;
    let nh = ((h as f64 * scale).round() as usize).max(target);
    let nw = ((w as f64 * scale).round() as usize).max(target);
    center_crop(&resize_bilinear(image, nh, nw), target, target)
}

pub fn hflip(image: &Tensor) -> Tensor {
    let (c, h, w) = image.dims3().expect("hflip expects C×H×W");
    let d = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let row = i / w;
        let col = i % w;
        d[row * w + (w - 1 - col)]
    })
}

/// In-memory JPEG round trip at quality `q`.
pub fn jpeg_round_trip(image: &Tensor, q: u8) -> Result<Tensor> {
    let rgb = tensor_to_rgb(image)?;
    let mut buf = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut buf, q.clamp(1, 100)).encode_image(&rgb)?;
    decode_image(buf.get_ref())
}

/// Normalised 1-D Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with periodic boundaries, which keeps the mean.
pub fn gaussian_blur(image: &Tensor, sigma: f32) -> Tensor {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return image.clone();
    }
    let (c, h, w) = image.dims3().expect("gaussian_blur expects C×H×W");
    let r = (k.len() / 2) as i64;
    let wrap = |i: i64, n: usize| i.rem_euclid(n as i64) as usize;
    let mut out = image.data().to_vec();
    let mut tmp = vec![0.0f32; h * w];
    for plane in out.chunks_exact_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (0..k.len())
                    .map(|j| k[j] * plane[y * w + wrap(x as i64 + j as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (0..k.len())
                    .map(|j| k[j] * tmp[wrap(y as i64 + j as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    let _ = c;
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

pub fn add_gaussian_noise(image: &Tensor, sigma: f32, rng: &mut impl Rng) -> Tensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let n = Normal::new(0.0f32, sigma).expect("sigma is positive");
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

fn rotate(image: &Tensor, degrees: f32) -> Tensor {
    let (c, h, w) = image.dims3().expect("rotate expects C×H×W");
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(image.len());
    for plane in image.data().chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let sx = co * dx + s * dy + cx;
                let sy = -s * dx + co * dy + cy;
                out.push(sample_bilinear(plane, h, w, sy, sx));
            }
        }
    }
    let _ = c;
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

fn grayscale(image: &Tensor) -> Tensor {
    let (_, h, w) = image.dims3().expect("grayscale expects C×H×W");
    let d = image.data();
    let p = h * w;
    Tensor::from_fn(image.shape(), |i| {
        let j = i % p;
        0.299 * d[j] + 0.587 * d[p + j] + 0.114 * d[2 * p + j]
    })
}

/// On/off switch with an application probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugToggle {
    pub enabled: bool,
    pub p: f32,
}

/// Toggle plus a closed parameter range sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugRange {
    pub enabled: bool,
    pub p: f32,
    pub range: [f32; 2],
}

const fn toggle() -> AugToggle {
    AugToggle { enabled: true, p: 0.1 }
}

const fn ranged(lo: f32, hi: f32) -> AugRange {
    AugRange {
        enabled: true,
        p: 0.1,
        range: [lo, hi],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub seed: u64,
    pub flip: AugToggle,
    /// Side fraction of the random crop, resized back afterwards.
    pub crop: AugRange,
    /// Max absolute brightness shift and contrast change.
    pub jitter: AugRange,
    pub grayscale: AugToggle,
    /// Fraction of the image area zeroed by one rectangle.
    pub cutout: AugRange,
    pub noise: AugRange,
    pub blur: AugRange,
    pub jpeg: AugRange,
    /// Degrees.
    pub rotate: AugRange,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            seed: 0,
            flip: toggle(),
            crop: ranged(0.8, 1.0),
            jitter: ranged(0.0, 0.1),
            grayscale: toggle(),
            cutout: ranged(0.0, 0.125),
            noise: ranged(0.0, 0.05),
            blur: ranged(0.0, 1.5),
            jpeg: ranged(60.0, 95.0),
            rotate: ranged(-15.0, 15.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        let mut c = Self::default();
        for t in [&mut c.flip, &mut c.grayscale] {
            t.enabled = false;
        }
        for r in [
            &mut c.crop,
            &mut c.jitter,
            &mut c.cutout,
            &mut c.noise,
            &mut c.blur,
            &mut c.jpeg,
            &mut c.rotate,
        ] {
            r.enabled = false;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, msg: String| Error::Config {
            field: format!("augment.{name}"),
            msg,
        };
        let prob = |name: &str, p: f32| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(bad(name, format!("probability {p} outside [0,1]")))
            }
        };
        prob("flip", self.flip.p)?;
        prob("grayscale", self.grayscale.p)?;
        let ranges: [(&str, &AugRange, f32, f32); 7] = [
            ("crop", &self.crop, f32::MIN_POSITIVE, 1.0),
            ("jitter", &self.jitter, 0.0, 1.0),
            ("cutout", &self.cutout, 0.0, 1.0),
            ("noise", &self.noise, 0.0, f32::INFINITY),
            ("blur", &self.blur, 0.0, f32::INFINITY),
            ("jpeg", &self.jpeg, 1.0, 100.0),
            ("rotate", &self.rotate, -180.0, 180.0),
        ];
        for (name, r, lo, hi) in ranges {
            prob(name, r.p)?;
            if !r.enabled {
                continue;
            }
            let [a, b] = r.range;
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(bad(name, format!("range [{a}, {b}] is empty or non-finite")));
            }
            if a < lo || b > hi {
                return Err(bad(name, format!("range [{a}, {b}] outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Independent RNG for one image in one epoch.
    pub fn rng_for(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        sample_rng(self.seed, epoch as u64, index as u64)
    }
}

pub fn sample_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = seed ^ 0x5851_f42d_4c95_7f2d;
    for v in [a, b] {
        s = (s ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    }
    ChaCha8Rng::seed_from_u64(s)
}

fn fires(rng: &mut impl Rng, enabled: bool, p: f32) -> bool {
    enabled && p > 0.0 && rng.random::<f32>() < p
}

fn draw(rng: &mut impl Rng, r: &AugRange) -> f32 {
    let [a, b] = r.range;
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

/// Applies each enabled augmentation independently with its probability, in
/// a fixed order. Output is clamped to `[0,1]`.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    let mut x = image.clone();
    if fires(rng, cfg.flip.enabled, cfg.flip.p) {
        x = hflip(&x);
    }
    if fires(rng, cfg.crop.enabled, cfg.crop.p) {
        let f = draw(rng, &cfg.crop);
        let ch = ((h as f32 * f).round() as usize).clamp(1, h);
        let cw = ((w as f32 * f).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        x = resize_bilinear(&crop(&x, top, left, ch, cw), h, w);
    }
    if fires(rng, cfg.rotate.enabled, cfg.rotate.p) {
        x = rotate(&x, draw(rng, &cfg.rotate));
    }
    if fires(rng, cfg.jitter.enabled, cfg.jitter.p) {
        let m = cfg.jitter.range[1];
        let b = rng.random_range(-m..=m);
        let c = 1.0 + rng.random_range(-m..=m);
        let mean = x.mean() as f32;
        x = x.map(|v| (v - mean) * c + mean + b);
    }
    if fires(rng, cfg.grayscale.enabled, cfg.grayscale.p) {
        x = grayscale(&x);
    }
    if fires(rng, cfg.blur.enabled, cfg.blur.p) {
        x = gaussian_blur(&x, draw(rng, &cfg.blur));
    }
    x = x.map(|v| v.clamp(0.0, 1.0));
    if fires(rng, cfg.jpeg.enabled, cfg.jpeg.p) {
        x = jpeg_round_trip(&x, draw(rng, &cfg.jpeg).round() as u8)?;
    }
    if fires(rng, cfg.noise.enabled, cfg.noise.p) {
        let s = draw(rng, &cfg.noise);
        x = add_gaussian_noise(&x, s, rng);
    }
    if fires(rng, cfg.cutout.enabled, cfg.cutout.p) {
        let area = draw(rng, &cfg.cutout);
        let side = (area.sqrt() * h.min(w) as f32).round() as usize;
        if side > 0 {
            let (ch, cw) = (side.min(h), side.min(w));
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            let d = x.data_mut();
            for plane in d.chunks_exact_mut(h * w) {
                for r in top..top + ch {
                    plane[r * w + left..r * w + left + cw].fill(0.0);
                }
            }
        }
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

/// Evaluation-time degradations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Perturbation {
    Jpeg(u8),
    CenterCrop(f32),
    GaussianBlur(f32),
    GaussianNoise(f32),
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::Jpeg(_) => "jpeg",
            Perturbation::CenterCrop(_) => "center_crop",
            Perturbation::GaussianBlur(_) => "gaussian_blur",
            Perturbation::GaussianNoise(_) => "gaussian_noise",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Perturbation::Jpeg(q) => q as f64,
            Perturbation::CenterCrop(f) | Perturbation::GaussianBlur(f) | Perturbation::GaussianNoise(f) => f as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::Jpeg(q) => (1..=100).contains(&q),
            Perturbation::CenterCrop(f) => f > 0.0 && f <= 1.0,
            Perturbation::GaussianBlur(s) | Perturbation::GaussianNoise(s) => s.is_finite() && s >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("perturb", format!("{} level {} out of range", self.kind(), self.level())))
        }
    }
}

/// Applies one perturbation. `seed` only affects the noise draw.
pub fn perturb(image: &Tensor, kind: Perturbation, seed: u64) -> Result<Tensor> {
    kind.validate()?;
    let (_, h, w) = image.dims3()?;
    Ok(match kind {
        Perturbation::Jpeg(q) => jpeg_round_trip(image, q)?,
        Perturbation::CenterCrop(f) => {
            let ch = ((h as f32 * f).round() as usize).clamp(1, h);
            let cw = ((w as f32 * f).round() as usize).clamp(1, w);
            resize_bilinear(&center_crop(image, ch, cw), h, w)
        }
        Perturbation::GaussianBlur(s) => gaussian_blur(image, s),
        Perturbation::GaussianNoise(s) => add_gaussian_noise(image, s, &mut ChaCha8Rng::seed_from_u64(seed)),
    })
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.zip_map(b, "psnr", |x, y| (x - y) * (x - y))?.mean();
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_unit_tensor;
    use proptest::prelude::*;

    fn smooth_image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let t = (x as f32 * 0.07 + c as f32).sin() * (y as f32 * 0.05).cos();
            0.5 + 0.35 * t
        })
    }

    #[test]
    fn black_and_white_png() {
        let dir = tempfile::tempdir().unwrap();
        for (v, name) in [(0u8, "b.png"), (255u8, "w.png")] {
            let p = dir.path().join(name);
            image::RgbImage::from_pixel(8, 6, image::Rgb([v, v, v])).save(&p).unwrap();
            let t = load_image(&p).unwrap();
            assert_eq!(t.shape(), &[3, 6, 8]);
            assert!(t.data().iter().all(|&x| x == v as f32 / 255.0));
        }
    }

    #[test]
    fn grayscale_png_replicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x * 40 + y) as u8])).save(&p).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.channels(0, 1).unwrap().data(), t.channels(2, 3).unwrap().data());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = seeded_unit_tensor(&[3, 9, 7], 1).map(|v| (v * 255.0).round() / 255.0);
        save_png(&t, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().max_abs_diff(&t).unwrap(), 0.0);
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(load_image(&p).is_err());
        assert!(load_image(&dir.path().join("none.png")).is_err());
    }

    #[test]
    fn resize_identity_and_geometry() {
        let t = seeded_unit_tensor(&[3, 256, 256], 2);
        assert_eq!(resize_short_side(&t, 256), t);
        let wide = seeded_unit_tensor(&[3, 256, 512], 3);
        assert_eq!(resize_short_side(&wide, 256).shape(), &[3, 256, 256]);
        let tall = seeded_unit_tensor(&[3, 512, 256], 3);
        assert_eq!(resize_short_side(&tall, 256).shape(), &[3, 256, 256]);
        let tall = seeded_unit_tensor(&[3, 512, 1024], 3);
        assert_eq!(resize_short_side(&tall, 256).shape(), &[3, 256, 256]);
    }

    #[test]
    fn bilinear_matches_analytic_ramp() {
        let (h, w, oh, ow) = (40usize, 60usize, 25usize, 90usize);
        let ramp = |y: f64, x: f64| 0.1 + 0.004 * x + 0.007 * y;
        let src = Tensor::from_fn(&[1, h, w], |i| ramp((i / w) as f64, (i % w) as f64) as f32);
        let out = resize_bilinear(&src, oh, ow);
        let mut worst = 0.0f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                worst = worst.max((out.data()[oy * ow + ox] as f64 - ramp(sy, sx)).abs());
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn disabled_augment_is_identity() {
        let t = seeded_unit_tensor(&[3, 16, 16], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&t, &AugmentConfig::disabled(), &mut rng).unwrap(), t);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = seeded_unit_tensor(&[3, 5, 7], 5);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_ne!(hflip(&t), t);
    }

    #[test]
    fn augment_is_deterministic_and_in_range() {
        let mut cfg = AugmentConfig::default();
        for t in [&mut cfg.flip, &mut cfg.grayscale] {
            t.p = 0.5;
        }
        for r in [&mut cfg.crop, &mut cfg.jitter, &mut cfg.cutout, &mut cfg.noise, &mut cfg.blur, &mut cfg.jpeg, &mut cfg.rotate] {
            r.p = 0.5;
        }
        let t = seeded_unit_tensor(&[3, 32, 32], 6);
        for i in 0..8 {
            let a = augment(&t, &cfg, &mut cfg.rng_for(0, i)).unwrap();
            let b = augment(&t, &cfg, &mut cfg.rng_for(0, i)).unwrap();
            assert_eq!(a.fingerprint(), b.fingerprint());
            assert_eq!(a.shape(), t.shape());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augment_validation_names_field() {
        let mut cfg = AugmentConfig::default();
        cfg.noise.p = 1.5;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "augment.noise"),
            other => panic!("{other:?}"),
        }
        let mut cfg = AugmentConfig::default();
        cfg.jpeg.range = [90.0, 60.0];
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn noise_zero_and_crop_one_are_identity() {
        let t = seeded_unit_tensor(&[3, 16, 16], 7);
        assert_eq!(perturb(&t, Perturbation::GaussianNoise(0.0), 1).unwrap(), t);
        let c = perturb(&t, Perturbation::CenterCrop(1.0), 1).unwrap();
        assert!(c.max_abs_diff(&t).unwrap() < 1e-3);
        assert_eq!(perturb(&t, Perturbation::GaussianBlur(0.0), 1).unwrap(), t);
    }

    #[test]
    fn perturb_rejects_out_of_range() {
        let t = seeded_unit_tensor(&[3, 8, 8], 8);
        assert!(perturb(&t, Perturbation::Jpeg(0), 0).is_err());
        assert!(perturb(&t, Perturbation::Jpeg(101), 0).is_err());
        assert!(perturb(&t, Perturbation::CenterCrop(0.0), 0).is_err());
        assert!(perturb(&t, Perturbation::CenterCrop(1.2), 0).is_err());
        assert!(perturb(&t, Perturbation::GaussianBlur(-1.0), 0).is_err());
        assert!(perturb(&t, Perturbation::GaussianNoise(-0.1), 0).is_err());
    }

    #[test]
    fn jpeg_high_quality_psnr() {
        let t = smooth_image(64, 64);
        let j = perturb(&t, Perturbation::Jpeg(95), 0).unwrap();
        let p = psnr(&t, &j).unwrap();
        assert!(p > 35.0, "{p}");
        let low = perturb(&t, Perturbation::Jpeg(10), 0).unwrap();
        assert!(psnr(&t, &low).unwrap() < p);
    }

    #[test]
    fn blur_kernel_radius_and_normalisation() {
        assert_eq!(gaussian_kernel(1.0).len(), 7);
        assert_eq!(gaussian_kernel(1.5).len(), 11);
        let s: f32 = gaussian_kernel(2.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn noise_is_seeded() {
        let t = Tensor::full(&[3, 8, 8], 0.5);
        let a = perturb(&t, Perturbation::GaussianNoise(0.05), 3).unwrap();
        assert_eq!(a, perturb(&t, Perturbation::GaussianNoise(0.05), 3).unwrap());
        assert_ne!(a, perturb(&t, Perturbation::GaussianNoise(0.05), 4).unwrap());
    }

    #[test]
    fn manifest_parse_and_validation() {
        let text = r#"{"path":"a.png","label":"real","split":"train"}
{"path":"b.png","label":"generated","split":"train"}

{"path":"c.png","label":"real","split":"test"}
"#;
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 3);
        m.check_trainable().unwrap();
        assert_eq!(m.split(Split::Test).len(), 1);

        let dup = "{\"path\":\"a.png\",\"label\":\"real\",\"split\":\"train\"}\n{\"path\":\"a.png\",\"label\":\"real\",\"split\":\"test\"}";
        assert!(DatasetManifest::parse(dup).is_err());
        let one = DatasetManifest::parse("{\"path\":\"a.png\",\"label\":\"real\",\"split\":\"train\"}").unwrap();
        assert!(one.check_trainable().is_err());
        assert!(DatasetManifest::parse("{\"path\":\"a.png\",\"label\":\"fake\",\"split\":\"train\"}").is_err());
    }

    #[test]
    fn manifest_load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&Tensor::zeros(&[3, 4, 4]), &dir.path().join("a.png")).unwrap();
        let mp = dir.path().join("m.jsonl");
        std::fs::write(&mp, "{\"path\":\"a.png\",\"label\":\"real\",\"split\":\"train\"}\n").unwrap();
        let m = DatasetManifest::load(&mp).unwrap();
        assert_eq!(m.entries[0].path, dir.path().join("a.png"));
        std::fs::write(&mp, "{\"path\":\"zz.png\",\"label\":\"real\",\"split\":\"train\"}\n").unwrap();
        assert!(DatasetManifest::load(&mp).is_err());
    }


    #[test]
    fn score_depends_only_on_pixels() {
        use image::codecs::png::{CompressionType, FilterType, PngEncoder};
        use image::{ExtendedColorType, ImageEncoder};
        let size = 32u32;
        let pixels: Vec<u8> = (0..size * size * 3).map(|i| ((i * 37 + i / 96 * 11) % 251) as u8).collect();
        let encode = |c, f| {
            let mut out = Vec::new();
            PngEncoder::new_with_quality(&mut out, c, f).write_image(&pixels, size, size, ExtendedColorType::Rgb8).unwrap();
            out
        };
        let a = encode(CompressionType::Fast, FilterType::NoFilter);
        let b = encode(CompressionType::Best, FilterType::Paeth);
        assert_ne!(a, b);
        let (xa, xb) = (decode_image(&a).unwrap(), decode_image(&b).unwrap());
        assert_eq!(xa, xb);
        let model = crate::detector::FireModel::new(32, crate::reconstructor::AeParams::new(3), 4.0, 12.0, 5).unwrap();
        assert_eq!(model.score(&xa).unwrap().to_bits(), model.score(&xb).unwrap().to_bits());
    }
    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn blur_preserves_mean(seed in 0u64..1000, sigma in 0.1f32..3.0) {
            let t = seeded_unit_tensor(&[3, 20, 24], seed);
            let b = gaussian_blur(&t, sigma);
            prop_assert!((b.mean() - t.mean()).abs() < 1e-3);
        }

        #[test]
        fn perturbations_stay_in_range(seed in 0u64..1000, which in 0usize..4, level in 0.05f32..1.0) {
            let t = seeded_unit_tensor(&[3, 16, 16], seed);
            let kind = match which {
                0 => Perturbation::Jpeg((level * 100.0).ceil() as u8),
                1 => Perturbation::CenterCrop(level),
                2 => Perturbation::GaussianBlur(level * 2.0),
                _ => Perturbation::GaussianNoise(level * 0.1),
            };
            let p = perturb(&t, kind, seed).unwrap();
            prop_assert_eq!(p.shape(), t.shape());
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
