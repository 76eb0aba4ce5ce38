//! Visual exports: band-filtered images, centred spectra and error maps.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{gaussian_blur, save_gray_png, save_png};
use crate::error::{Error, Result};
use crate::reconstructor::{recon_error, AeParams};
use crate::spectrum::{band_filter_spectrum, center_shift, complement_mask, dft2, log_magnitude, radial_mask, scaled_mid_band};
use crate::tensorops::Tensor;

/// The five preset annuli at 256×256, in display order.
pub const PRESET_BANDS_256: [(f64, f64); 5] = [
    (0.0, 20.0),
    (120.0, f64::INFINITY),
    (0.0, 40.0),
    (20.0, 120.0),
    (40.0, 120.0),
];

/// Preset annuli scaled to an `S×S` image.
pub fn preset_bands(size: usize) -> Vec<(f64, f64)> {
    let s = size as f64 / 256.0;
    PRESET_BANDS_256.iter().map(|&(lo, hi)| (lo * s, hi * s)).collect()
}

/// Parses `lo-hi[,lo-hi...]`, where `hi` may be `inf`.
pub fn parse_bands(text: &str) -> Result<Vec<(f64, f64)>> {
    let bad = |m: String| Error::Config {
        field: "bands".into(),
        msg: m,
    };
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = part.split_once('-').ok_or_else(|| bad(format!("`{part}` is not of the form lo-hi")))?;
        let lo: f64 = lo.trim().parse().map_err(|_| bad(format!("bad lower radius in `{part}`")))?;
        let hi: f64 = match hi.trim() {
            "inf" | "∞" => f64::INFINITY,
            h => h.parse().map_err(|_| bad(format!("bad upper radius in `{part}`")))?,
        };
        if !(lo >= 0.0 && hi >= lo) {
            return Err(bad(format!("band `{part}` needs 0 ≤ lo ≤ hi")));
        }
        out.push((lo, hi));
    }
    if out.is_empty() {
        return Err(bad("no bands given".into()));
    }
    Ok(out)
}

/// Rescales to `[0, 1]`; a constant tensor maps to zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros_like(t)
    }
}

/// Unsharp mask at 100% amount: `x + (x − blur(x))`.
pub fn sharpen(t: &Tensor) -> Tensor {
    let blurred = gaussian_blur(t, 1.0);
    t.zip_map(&blurred, "sharpen", |a, b| (2.0 * a - b).clamp(0.0, 1.0)).expect("same shape")
}

/// Channel mean of a `C×H×W` tensor as `1×H×W`.
fn channel_mean(t: &Tensor) -> Tensor {
    let (c, h, w) = t.dims3().expect("C×H×W");
    let plane = h * w;
    Tensor::from_fn(&[1, h, w], |i| (0..c).map(|k| t.data()[k * plane + i]).sum::<f32>() / c as f32)
}

fn energy(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64 * v as f64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandReport {
    pub r_lo: f64,
    pub r_hi: f64,
    pub file: String,
    pub spectrum_file: String,
    /// Spatial energy of the filtered image.
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub input_energy: f64,
    pub bands: Vec<BandReport>,
    pub error_maps: Vec<String>,
    pub mean_delta_x: f64,
    pub mean_delta_x_pse: f64,
}

/// In-memory results of [`analyze`].
#[derive(Clone, Debug)]
pub struct Analysis {
    pub filtered: Vec<Tensor>,
    /// Channel-mean log-magnitude of each filtered image's centred spectrum.
    pub spectra: Vec<Tensor>,
    pub delta_x: Tensor,
    pub delta_x_pse: Tensor,
}

/// Band-filters `image` per band and computes the error maps of the image and
/// of its pseudo-generated version under the default preset band.
pub fn analyze(image: &Tensor, ae: &AeParams, bands: &[(f64, f64)]) -> Result<Analysis> {
    let (_, h, w) = image.dims3()?;
    let spec = dft2(image)?;
    let mut filtered = Vec::with_capacity(bands.len());
    let mut spectra = Vec::with_capacity(bands.len());
    for &(lo, hi) in bands {
        let f = band_filter_spectrum(&spec, &radial_mask(h, w, lo, hi)?)?;
        spectra.push(channel_mean(&log_magnitude(&center_shift(&dft2(&f)?))));
        filtered.push(f);
    }
    let (lo, hi) = scaled_mid_band(h.min(w));
    let x_pse = band_filter_spectrum(&spec, &complement_mask(&radial_mask(h, w, lo, hi)?))?;
    Ok(Analysis {
        filtered,
        spectra,
        delta_x: recon_error(image, &ae.reconstruct(image)?)?.0,
        delta_x_pse: recon_error(&x_pse, &ae.reconstruct(&x_pse)?)?.0,
    })
}

/// Runs [`analyze`] and writes `band_K.png`, `spectrum_K.png`,
/// `delta_x.png`, `delta_x_pse.png` and `report.json` into `out_dir`.
///
/// Bands without the DC bin are shown offset to mid-grey. Error maps are
/// min-max normalised and optionally sharpened.
pub fn write_analysis(image: &Tensor, ae: &AeParams, bands: &[(f64, f64)], sharpen_maps: bool, out_dir: &Path) -> Result<AnalyzeReport> {
    std::fs::create_dir_all(out_dir)?;
    let a = analyze(image, ae, bands)?;
    let mut reports = Vec::new();
    for (k, ((f, s), &(lo, hi))) in a.filtered.iter().zip(&a.spectra).zip(bands).enumerate() {
        let file = format!("band_{}.png", k + 1);
        let spectrum_file = format!("spectrum_{}.png", k + 1);
        let shown = if lo > 0.0 { f.map(|v| v + 0.5) } else { f.clone() };
        save_png(&shown, &out_dir.join(&file))?;
        save_gray_png(&min_max_normalize(s), &out_dir.join(&spectrum_file))?;
        reports.push(BandReport {
            r_lo: lo,
            r_hi: hi,
            file,
            spectrum_file,
            energy: energy(f),
        });
    }
    let mut maps = Vec::new();
    for (name, m) in [("delta_x.png", &a.delta_x), ("delta_x_pse.png", &a.delta_x_pse)] {
        let mut shown = min_max_normalize(m);
        if sharpen_maps {
            shown = sharpen(&shown);
        }
        save_png(&shown, &out_dir.join(name))?;
        maps.push(name.to_string());
    }
    let report = AnalyzeReport {
        input_energy: energy(image),
        bands: reports,
        error_maps: maps,
        mean_delta_x: a.delta_x.mean(),
        mean_delta_x_pse: a.delta_x_pse.mean(),
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// The five files written by [`dump_detection`], in order.
pub const DUMP_FILES: [&str; 5] = ["delta_x.png", "delta_x_pse.png", "m_mid.png", "m_mid_c.png", "x_pse.png"];

/// Writes the error maps (min-max normalised), both masks (`round(255·m)`)
/// and the pseudo-generated image.
pub fn dump_detection(r: &crate::detector::DetectionResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = DUMP_FILES.iter().map(|f| dir.join(f)).collect();
    save_png(&min_max_normalize(r.delta_x.tensor()), &paths[0])?;
    save_png(&min_max_normalize(r.delta_x_pse.tensor()), &paths[1])?;
    save_gray_png(&r.m_mid.to_tensor(), &paths[2])?;
    save_gray_png(&r.m_mid_c.to_tensor(), &paths[3])?;
    save_png(&r.x_pse, &paths[4])?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_image;
    use crate::synth::texture;

    #[test]
    fn band_spec_parsing() {
        assert_eq!(parse_bands("0-20, 120-inf").unwrap(), vec![(0.0, 20.0), (120.0, f64::INFINITY)]);
        for bad in ["", "5", "a-3", "9-2", "-1-4"] {
            assert!(parse_bands(bad).is_err(), "{bad}");
        }
        assert_eq!(preset_bands(64)[4], (10.0, 30.0));
        assert_eq!(preset_bands(256), PRESET_BANDS_256.to_vec());
    }

    #[test]
    fn normalisation_and_sharpening() {
        let t = Tensor::new(vec![1, 1, 3], vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(min_max_normalize(&t).data(), &[0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&Tensor::full(&[1, 2, 2], 3.0)), Tensor::zeros(&[1, 2, 2]));
        let flat = Tensor::full(&[3, 8, 8], 0.25);
        assert!(sharpen(&flat).max_abs_diff(&flat).unwrap() < 1e-6);
    }

    #[test]
    fn full_band_is_lossless_and_partition_energy_adds_up() {
        let x = crate::experiment::quantize_u8(&texture(32, 4));
        let dir = tempfile::tempdir().unwrap();
        let bands = [(0.0, 4.5), (4.5 + 1e-9, 9.5), (9.5 + 1e-9, f64::INFINITY)];
        let r = write_analysis(&x, &AeParams::new(0), &bands, false, dir.path()).unwrap();
        let total: f64 = r.bands.iter().map(|b| b.energy).sum();
        let cross = analyze(&x, &AeParams::new(0), &[(0.0, f64::INFINITY)]).unwrap();
        assert!((energy(&cross.filtered[0]) - r.input_energy).abs() / r.input_energy < 1e-5);
        assert!((total - r.input_energy).abs() / r.input_energy < 1e-3, "{total} vs {}", r.input_energy);

        let d2 = dir.path().join("full");
        write_analysis(&x, &AeParams::new(0), &[(0.0, f64::INFINITY)], true, &d2).unwrap();
        assert_eq!(load_image(&d2.join("band_1.png")).unwrap(), x);
        assert!(d2.join("spectrum_1.png").exists() && d2.join("delta_x_pse.png").exists());
    }
}
