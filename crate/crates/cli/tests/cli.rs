use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fire_core::checkpoint::Checkpoint;
use fire_core::data::{load_image, load_sample, save_png, DatasetManifest, Label, ManifestEntry, Split};
use fire_core::detector::{ae_from_checkpoint, FireModel};
use fire_core::parallel::Exec;
use fire_core::reconstructor::{mean_recon_mse, AeParams};
use fire_core::tensorops::Tensor;
use serde_json::Value;

fn fire(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fire")).args(args).output().expect("spawn fire")
}

fn ok_json(args: &[&str]) -> Value {
    let out = fire(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_single_line_error(out: &Output, code: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {code}: ")), "{err}");
}

struct Fixture {
    dir: PathBuf,
    manifest: PathBuf,
    ae: PathBuf,
    ckpt: PathBuf,
    pretrain: Value,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let reals = dir.join("reals");
        let m = ok_json(&["synth", "--out-dir", p(&reals), "--size", "32", "--real", "8,4,4", "--seed", "3"]);
        let ae = dir.join("ae.ckpt");
        let pretrain = ok_json(&[
            "pretrain-ae", "--manifest", m["manifest"].as_str().unwrap(), "--out", p(&ae), "--epochs", "2", "--batch-size", "4", "--seed", "1",
        ]);
        let corpus = dir.join("corpus");
        let c = ok_json(&[
            "synth", "--out-dir", p(&corpus), "--size", "32", "--real", "8,4,4", "--generated", "8,4,4", "--ae", p(&ae), "--seed", "4",
        ]);
        let manifest = PathBuf::from(c["manifest"].as_str().unwrap());
        let config = dir.join("config.json");
        std::fs::write(&config, r#"{"image_size": 32, "epochs": 1, "batch_size": 4}"#).unwrap();
        let ckpt = dir.join("det.ckpt");
        ok_json(&["train", "--manifest", p(&manifest), "--ae", p(&ae), "--out", p(&ckpt), "--config", p(&config), "--seed", "5"]);
        Fixture {
            dir,
            manifest,
            ae,
            ckpt,
            pretrain,
        }
    })
}

fn first_test_image(f: &Fixture) -> PathBuf {
    let m = DatasetManifest::load(&f.manifest).unwrap();
    m.split(Split::Test)[0].path.clone()
}

#[test]
fn missing_manifest_is_a_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fire(&["pretrain-ae", "--manifest", p(&dir.path().join("nope.jsonl")), "--out", p(&dir.path().join("a.ckpt"))]);
    assert_single_line_error(&out, "manifest");
    assert!(!dir.path().join("a.ckpt").exists());
    assert_single_line_error(&fire(&["detect", "--image"]), "usage");
}

#[test]
fn zero_epoch_pretraining_saves_the_initial_autoencoder() {
    let f = fixture();
    let out = f.dir.join("ae0.ckpt");
    let m = f.dir.join("reals").join("manifest.jsonl");
    ok_json(&["pretrain-ae", "--manifest", p(&m), "--out", p(&out), "--epochs", "0", "--seed", "9"]);
    let ae = ae_from_checkpoint(&Checkpoint::load(&out).unwrap()).unwrap();
    assert_eq!(ae.fingerprint(), AeParams::new(9).fingerprint());
}

#[test]
fn pretrained_heldout_mse_matches_the_report() {
    let f = fixture();
    let ae = ae_from_checkpoint(&Checkpoint::load(&f.ae).unwrap()).unwrap();
    let m = DatasetManifest::load(&f.dir.join("reals").join("manifest.jsonl")).unwrap();
    let val: Vec<Tensor> = m.split(Split::Val).iter().map(|e| load_sample(&e.path, 32).unwrap()).collect();
    let mse = mean_recon_mse(&ae, &val, Exec::default()).unwrap();
    let logged = f.pretrain["heldout_mse"].as_f64().unwrap();
    assert!((mse - logged).abs() <= 1e-12 * logged.max(1.0), "{mse} vs {logged}");
    assert_eq!(f.pretrain["epoch_mse"].as_array().unwrap().len(), 2);
}

#[test]
fn train_validates_config_before_work() {
    let f = fixture();
    let cfg = f.dir.join("bad.json");
    std::fs::write(&cfg, r#"{"lr": -0.5}"#).unwrap();
    let out_ckpt = f.dir.join("never.ckpt");
    let out = fire(&["train", "--manifest", "/nonexistent", "--ae", "/nonexistent", "--out", p(&out_ckpt), "--config", p(&cfg)]);
    assert_single_line_error(&out, "config");
    assert!(String::from_utf8_lossy(&out.stderr).contains("`lr`"));
    assert!(!out_ckpt.exists());
}

#[test]
fn training_twice_with_one_seed_gives_identical_logs() {
    let f = fixture();
    let cfg = f.dir.join("repro.json");
    std::fs::write(&cfg, r#"{"image_size": 32, "epochs": 2, "batch_size": 2}"#).unwrap();
    let mut logs = Vec::new();
    for k in 0..2 {
        let out = f.dir.join(format!("repro{k}.ckpt"));
        let log = f.dir.join(format!("repro{k}.csv"));
        ok_json(&["train", "--manifest", p(&f.manifest), "--ae", p(&f.ae), "--out", p(&out), "--config", p(&cfg), "--log", p(&log), "--seed", "11"]);
        logs.push(std::fs::read_to_string(log).unwrap());
    }
    let first10 = |s: &str| s.lines().take(11).map(String::from).collect::<Vec<_>>();
    assert_eq!(first10(&logs[0]).len(), 11);
    assert_eq!(first10(&logs[0]), first10(&logs[1]));
    assert_eq!(logs[0].lines().next().unwrap(), "step,l_mid_rec,l_mask,l_ce,total");
}

#[test]
fn detect_prints_score_and_dumps_five_pngs() {
    let f = fixture();
    let img = first_test_image(f);
    let dump = f.dir.join("dump");
    let v = ok_json(&["detect", "--image", p(&img), "--ckpt", p(&f.ckpt), "--dump-dir", p(&dump)]);
    let score = v["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let label = if score >= 0.5 { "generated" } else { "real" };
    assert_eq!(v["label"], label);
    let mut names: Vec<String> = std::fs::read_dir(&dump).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["delta_x.png", "delta_x_pse.png", "m_mid.png", "m_mid_c.png", "x_pse.png"]);

    let (model, _) = FireModel::from_checkpoint(&Checkpoint::load(&f.ckpt).unwrap()).unwrap();
    let r = model.forward(&load_sample(&img, 32).unwrap()).unwrap();
    assert_eq!(r.score, score);
    let png = image::open(dump.join("m_mid.png")).unwrap().to_luma8();
    let expected: Vec<u8> = r.m_mid.values().iter().map(|&m| (255.0 * m).round() as u8).collect();
    assert_eq!(png.into_raw(), expected);
    let again = ok_json(&["detect", "--image", p(&img), "--ckpt", p(&f.ckpt)]);
    assert_eq!(again["score"], v["score"]);
}

#[test]
fn eval_reports_fire_and_baseline_with_sweep() {
    let f = fixture();
    let csv = f.dir.join("sweep.csv");
    let v = ok_json(&["eval", "--manifest", p(&f.manifest), "--ckpt", p(&f.ckpt), "--perturb", "--csv", p(&csv), "--seed", "2"]);
    for k in ["clean_auc", "clean_acc", "baseline_auc", "baseline_acc"] {
        assert!((0.0..=1.0).contains(&v[k].as_f64().unwrap()), "{k}");
    }
    assert_eq!(v["n"], 8);
    assert_eq!(v["rows"].as_array().unwrap().len(), 9);
    let text = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], "kind,level,auc,acc");
    assert!(lines[1].starts_with("clean,"));
}

/// A detector whose score is ~1 for a mid-grey image and ~0 for a
/// black-and-white checkerboard.
fn stub_checkpoint(path: &Path) {
    let (mut model, cfg) = FireModel::from_checkpoint(&Checkpoint::load(&fixture().ckpt).unwrap()).unwrap();
    let mut ae = model.ae.clone();
    for p in ae.params_mut() {
        p.value.fill(0.0);
    }
    model.ae = ae;
    let mut ck = model.to_checkpoint(&cfg).unwrap();
    let names: Vec<String> = ck.tensors.keys().cloned().collect();
    for name in names {
        let t = ck.tensors.get_mut(&name).unwrap();
        if name.starts_with("fmre.decoder_mid_c") {
            t.fill(if name.ends_with("bias") { 30.0 } else { 0.0 });
        } else if name.starts_with("cls.head") {
            t.fill(if name.ends_with("bias") { 20.0 } else { -1.0 });
        } else if name.starts_with("cls.") {
            t.fill(if name.ends_with("bias") { 0.0 } else { 0.01 });
        }
    }
    ck.save(path).unwrap();
}

#[test]
fn eval_with_stub_checkpoint_reaches_auc_one() {
    let f = fixture();
    let dir = f.dir.join("stub");
    std::fs::create_dir_all(&dir).unwrap();
    let mut entries = Vec::new();
    for i in 0..4 {
        let grey = Tensor::full(&[3, 32, 32], 0.5);
        let board = Tensor::from_fn(&[3, 32, 32], |k| (((k % 32) + (k / 32) + i) % 2) as f32);
        for (label, t) in [(Label::Generated, grey), (Label::Real, board)] {
            let name = format!("{}_{i}.png", label.as_str());
            save_png(&t, &dir.join(&name)).unwrap();
            entries.push(ManifestEntry {
                path: name.into(),
                label,
                split: Split::Test,
            });
        }
    }
    let manifest = dir.join("manifest.jsonl");
    DatasetManifest::new(entries).save(&manifest).unwrap();
    let ckpt = dir.join("stub.ckpt");
    stub_checkpoint(&ckpt);
    let v = ok_json(&["eval", "--manifest", p(&manifest), "--ckpt", p(&ckpt)]);
    assert_eq!(v["clean_auc"], 1.0);
    assert_eq!(v["clean_acc"], 1.0);
    assert!(v["rows"].as_array().unwrap().is_empty());
}

#[test]
fn analyze_writes_bands_spectra_and_error_maps() {
    let f = fixture();
    let img = first_test_image(f);
    let out = f.dir.join("analyze");
    let v = ok_json(&["analyze", "--image", p(&img), "--ae", p(&f.ae), "--out-dir", p(&out), "--sharpen"]);
    assert_eq!(v["bands"].as_array().unwrap().len(), 5);
    let count = |prefix: &str| std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_str().unwrap().starts_with(prefix)).count();
    assert_eq!(count("band_"), 5);
    assert_eq!(count("spectrum_"), 5);
    assert_eq!(count("delta_"), 2);

    let full = f.dir.join("analyze_full");
    ok_json(&["analyze", "--image", p(&img), "--ae", p(&f.ae), "--out-dir", p(&full), "--bands", "0-inf"]);
    assert_eq!(load_image(&full.join("band_1.png")).unwrap(), load_image(&img).unwrap());

    let part = f.dir.join("analyze_part");
    let v = ok_json(&["analyze", "--image", p(&img), "--ae", p(&f.ae), "--out-dir", p(&part), "--bands", "0-3.5,3.51-9,9.01-inf"]);
    let total: f64 = v["bands"].as_array().unwrap().iter().map(|b| b["energy"].as_f64().unwrap()).sum();
    let input = v["input_energy"].as_f64().unwrap();
    assert!((total - input).abs() / input < 1e-3, "{total} vs {input}");
    assert_single_line_error(&fire(&["analyze", "--image", p(&img), "--ae", p(&f.ae), "--out-dir", p(&part), "--bands", "5-2"]), "config");
}
