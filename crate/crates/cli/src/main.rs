use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use fire_core::checkpoint::Checkpoint;
use fire_core::config::Config;
use fire_core::data::{load_image, load_sample, resize_short_side, DatasetManifest, Label, Split};
use fire_core::detector::{ae_from_checkpoint, ae_to_checkpoint, detect, train, FireModel, TrainSet};
use fire_core::eval::{acc, auc, default_grid, mean_recon_error, perturb_sweep, BaselineCalibration, ScoreSet};
use fire_core::parallel::{try_map_indexed, Exec};
use fire_core::reconstructor::{mean_recon_mse, pretrain_ae, AeParams, PretrainConfig};
use fire_core::synth::{write_corpus, CorpusSpec};
use fire_core::viz::{dump_detection, parse_bands, preset_bands, write_analysis};

#[derive(Parser)]
#[command(name = "fire", version, about = "Detect diffusion-generated images from frequency-guided reconstruction errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the surrogate autoencoder on the real training images.
    PretrainAe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Weight of the latent penalty.
        #[arg(long, default_value_t = 0.0)]
        kl: f32,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Square side images are brought to; defaults to the first image's height.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the mask module and classifier.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config; every field is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV training log; defaults to the config path or `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score one image.
    Detect {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write error maps, masks and the pseudo-generated image here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Band-filter an image and export spectra and reconstruction errors.
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated `lo-hi` radii (`hi` may be `inf`); defaults to the five presets.
        #[arg(long)]
        bands: Option<String>,
        /// Sharpen the exported error maps at 100%.
        #[arg(long)]
        sharpen: bool,
        /// Resize to this square side first.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// AUC and ACC of a detector and of the mean-error baseline.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Also run the robustness sweep.
        #[arg(long)]
        perturb: bool,
        /// Where to write the sweep CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Seed of the perturbation noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a procedural texture corpus with a manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Real images per split as `train,val,test`.
        #[arg(long, value_parser = parse_counts, default_value = "800,100,400")]
        real: [usize; 3],
        /// Generated images per split; needs `--ae`.
        #[arg(long, value_parser = parse_counts, default_value = "0,0,0")]
        generated: [usize; 3],
        /// Autoencoder that produces the generated images.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        jpeg_quality: Option<u8>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}`")),
    }
}

fn parse_counts(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad count `{p}`")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated counts".to_string())
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn load_ae(path: &Path) -> Result<AeParams> {
    Ok(ae_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_split(manifest: &DatasetManifest, split: Split, label: Label, size: usize, exec: Exec) -> Result<Vec<fire_core::tensorops::Tensor>> {
    let paths: Vec<&PathBuf> = manifest.split(split).into_iter().filter(|e| e.label == label).map(|e| &e.path).collect();
    Ok(try_map_indexed(exec, paths.len(), |i| load_sample(paths[i], size))?)
}

fn pretrain_cmd(manifest: &Path, out: &Path, cfg: PretrainConfig, size: Option<usize>) -> Result<()> {
    cfg.validate()?;
    let exec = Exec::default();
    let m = DatasetManifest::load(manifest)?;
    let first = m
        .split(Split::Train)
        .into_iter()
        .find(|e| e.label == Label::Real)
        .ok_or_else(|| fire_core::Error::Manifest("no real images in the train split".into()))?;
    let size = match size {
        Some(s) => s,
        None => load_image(&first.path)?.shape()[1],
    };
    let images = load_split(&m, Split::Train, Label::Real, size, exec)?;
    let mut heldout = load_split(&m, Split::Val, Label::Real, size, exec)?;
    if heldout.is_empty() {
        heldout = load_split(&m, Split::Test, Label::Real, size, exec)?;
    }
    let init = AeParams::new(cfg.seed);
    let (ae, mut report) = pretrain_ae(init, &images, &heldout, &cfg, exec)?;
    if report.heldout_mse.is_none() && !heldout.is_empty() {
        report.heldout_mse = Some(mean_recon_mse(&ae, &heldout, exec)?);
    }
    let meta = json!({"pretrain": cfg, "image_size": size, "report": report});
    ae_to_checkpoint(&ae, meta).save(out)?;
    print_json(&json!({
        "out": out,
        "images": images.len(),
        "heldout_images": heldout.len(),
        "epoch_mse": report.epoch_mse,
        "heldout_mse": report.heldout_mse,
    }))
}

fn train_cmd(manifest: &Path, ae: &Path, out: &Path, config: Option<&Path>, log: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if log.is_some() || cfg.paths.log.is_none() {
        cfg.paths.log = Some(log.unwrap_or_else(|| out.with_extension("log.csv")));
    }
    cfg.validate()?;
    let exec = Exec::default();
    let m = DatasetManifest::load(manifest)?;
    m.check_trainable()?;
    let ae = load_ae(ae)?;
    let data = TrainSet::load(&m, Split::Train, cfg.image_size, exec)?;
    let (model, log) = train(&data, ae, &cfg, exec)?;
    model.to_checkpoint(&cfg)?.save(out)?;
    print_json(&json!({
        "out": out,
        "log": cfg.paths.log,
        "steps": log.len(),
        "final": log.last(),
    }))
}

fn detect_cmd(image: &Path, ckpt: &Path, dump_dir: Option<&Path>) -> Result<()> {
    let (model, _) = FireModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let r = detect(image, &model)?;
    if let Some(d) = dump_dir {
        dump_detection(&r, d)?;
    }
    print_json(&json!({"score": r.score, "label": r.label}))
}

fn analyze_cmd(image: &Path, ae: &Path, out_dir: &Path, bands: Option<&str>, sharpen: bool, size: Option<usize>) -> Result<()> {
    let ae = load_ae(ae)?;
    let mut x = load_image(image)?;
    if let Some(s) = size {
        x = resize_short_side(&x, s);
    }
    let (_, h, w) = x.dims3()?;
    let bands = match bands {
        Some(spec) => parse_bands(spec)?,
        None => preset_bands(h.min(w)),
    };
    let report = write_analysis(&x, &ae, &bands, sharpen, out_dir)?;
    print_json(&serde_json::to_value(report)?)
}

fn eval_cmd(manifest: &Path, ckpt: &Path, perturb: bool, csv: Option<&Path>, split: Split, seed: u64) -> Result<()> {
    let exec = Exec::default();
    let (model, _) = FireModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let m = DatasetManifest::load(manifest)?;
    let entries = m.split(split);
    if entries.is_empty() {
        bail!(fire_core::Error::Manifest("the evaluated split is empty".into()));
    }
    let labels: Vec<u8> = entries.iter().map(|e| (e.label == Label::Generated) as u8).collect();
    let size = model.image_size();
    let images = try_map_indexed(exec, entries.len(), |i| load_sample(&entries[i].path, size))?;
    let grid = if perturb { default_grid() } else { Vec::new() };
    let report = perturb_sweep(&images, &labels, &grid, seed, exec, |x| model.score(x))?;
    let errors = try_map_indexed(exec, images.len(), |i| mean_recon_error(&images[i], &model.ae))?;
    let cal = BaselineCalibration::fit(&errors);
    let base = ScoreSet::new(errors.iter().map(|&e| cal.score(e)).collect(), labels)?;
    if let Some(p) = csv {
        report.write_csv(p)?;
    }
    print_json(&json!({
        "n": images.len(),
        "clean_auc": report.clean_auc,
        "clean_acc": report.clean_acc,
        "baseline_auc": auc(&base)?,
        "baseline_acc": acc(&base, 0.5),
        "rows": report.rows,
    }))
}

fn synth_cmd(out_dir: &Path, spec: CorpusSpec, ae: Option<&Path>) -> Result<()> {
    let wants_fakes = spec.generated.iter().any(|&n| n > 0);
    let ae = match ae {
        Some(p) => load_ae(p)?,
        None if wants_fakes => bail!(fire_core::Error::Config {
            field: "ae".into(),
            msg: "generated images need --ae".into()
        }),
        None => AeParams::new(spec.seed),
    };
    let corpus = write_corpus(out_dir, &spec, &ae, Exec::default())?;
    print_json(&json!({"manifest": corpus.manifest_path, "images": corpus.manifest.entries.len()}))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainAe {
            manifest,
            out,
            epochs,
            kl,
            lr,
            batch_size,
            size,
            seed,
        } => pretrain_cmd(
            &manifest,
            &out,
            PretrainConfig {
                epochs,
                lr,
                kl_weight: kl,
                batch_size,
                seed,
            },
            size,
        ),
        Command::Train {
            manifest,
            ae,
            out,
            config,
            log,
            seed,
        } => train_cmd(&manifest, &ae, &out, config.as_deref(), log, seed),
        Command::Detect { image, ckpt, dump_dir, .. } => detect_cmd(&image, &ckpt, dump_dir.as_deref()),
        Command::Analyze {
            image,
            ae,
            out_dir,
            bands,
            sharpen,
            size,
            ..
        } => analyze_cmd(&image, &ae, &out_dir, bands.as_deref(), sharpen, size),
        Command::Eval {
            manifest,
            ckpt,
            perturb,
            csv,
            split,
            seed,
        } => eval_cmd(&manifest, &ckpt, perturb, csv.as_deref(), split, seed),
        Command::Synth {
            out_dir,
            size,
            real,
            generated,
            ae,
            jpeg_quality,
            seed,
        } => synth_cmd(
            &out_dir,
            CorpusSpec {
                size,
                real,
                generated,
                seed,
                jpeg_quality,
            },
            ae.as_deref(),
        ),
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<fire_core::Error>())
        .map(fire_core::Error::code)
        .unwrap_or("cli")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = error_code(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            let msg = msg.strip_prefix(&format!("{code}: ")).unwrap_or(&msg);
            eprintln!("error: {code}: {msg}");
            ExitCode::FAILURE
        }
    }
}
