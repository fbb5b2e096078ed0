//! The subcommands. Each resolves its output directory, writes the resolved
//! configuration there, and then does its work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use sbev_autograd::Tensor;
use sbev_core::io::{
    load_checkpoint_into, read_checkpoint_meta, save_checkpoint, write_pgm, write_ppm, CheckpointMeta, DatasetManifest,
    RgbImage,
};
use sbev_core::metrics::{argmax_channels, ensemble_average, std_dev, EvalReport};
use sbev_core::network::{SbevModel, Variant};
use sbev_core::probe::{disparity_probe, ProbeReport};
use sbev_core::scenesim::{make_dataset, Split};
use sbev_core::train::{predict_probs, purpose, report_from_probs, sub_seed, train, EpochRecord, LoadedSample, LoadedSet};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "run_config.json";

/// Creates `out` (refusing a non-empty one unless `force`) and writes the
/// resolved configuration into it.
fn prepare_out(cfg: &RunConfig, default: &str) -> Result<PathBuf, CliError> {
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(default));
    if out.is_dir() && fs::read_dir(&out)?.next().is_some() && !cfg.force {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(&out)?;
    let mut resolved = cfg.clone();
    resolved.out = Some(out.clone());
    write_json(&out.join(CONFIG_FILE), &resolved)?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Worker count for evaluation: `SBEV_THREADS`, else the available cores.
pub fn threads() -> usize {
    std::env::var("SBEV_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Class probabilities for every sample, split across worker threads.
pub fn predict_all(model: &SbevModel, samples: &[LoadedSample]) -> Result<Vec<Tensor>, CliError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let workers = threads().min(samples.len());
    let chunk = samples.len().div_ceil(workers);
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|x| predict_probs(model, x)).collect::<Result<Vec<_>, _>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut probs = Vec::with_capacity(samples.len());
    for p in parts {
        probs.extend(p?);
    }
    Ok(probs)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<LoadedSet, CliError> {
    let path = cfg.data.join(format!("{split}.json"));
    Ok(LoadedSet::load(&path, cfg.model.variant == Variant::PseudoLidar)?)
}

fn same_geometry(a: &DatasetManifest, b: &DatasetManifest) -> Result<(), CliError> {
    if a.rig != b.rig || a.plane != b.plane || a.layout != b.layout {
        return Err(CliError::Data("train and test manifests disagree on rig, plane or layout".into()));
    }
    Ok(())
}

pub fn new_model(cfg: &RunConfig, manifest: &DatasetManifest, seed: u64) -> Result<SbevModel, CliError> {
    Ok(SbevModel::new(
        cfg.model.clone(),
        manifest.rig,
        manifest.plane,
        manifest.layout,
        sub_seed(seed, purpose::INIT),
    )?)
}

/// Loads a checkpoint whose model configuration must equal `cfg.model`.
fn load_model(cfg: &RunConfig, manifest: &DatasetManifest, path: &Path) -> Result<SbevModel, CliError> {
    let meta = read_checkpoint_meta(path)?;
    if meta.config != cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} ({} variant) does not match the configured model ({} variant)",
            path.display(),
            meta.config.variant,
            cfg.model.variant
        )));
    }
    let mut model = SbevModel::new(cfg.model.clone(), manifest.rig, manifest.plane, manifest.layout, 0)?;
    load_checkpoint_into(path, &mut model)?;
    Ok(model)
}

fn one_checkpoint(cfg: &RunConfig) -> Result<&Path, CliError> {
    match cfg.checkpoints.as_slice() {
        [p] => Ok(p),
        _ => Err(CliError::Usage(format!(
            "expected exactly one checkpoint, got {}; pass --checkpoints <path>",
            cfg.checkpoints.len()
        ))),
    }
}

fn write_report(out: &Path, name: &str, report: &EvalReport, class_names: &[String]) -> Result<(), CliError> {
    write_text(&out.join(format!("{name}.csv")), &report.to_csv(class_names))?;
    write_json(&out.join(format!("{name}.json")), report)
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg, "data")?;
    let n_train = ((cfg.n_train as f64 * cfg.fraction).ceil() as usize).max(1);
    for (n, split) in [(n_train, Split::Train), (cfg.n_test, Split::Test)] {
        let m = make_dataset(n, cfg.data_seed, split, &cfg.scene, &cfg.rig, &cfg.plane, &cfg.layout, &out)?;
        println!("{}: {} samples", split.name(), m.samples.len());
    }
    Ok(())
}

/// Argmax layout as a palette image, far rows on top; invisible cells are dimmed.
pub fn layout_image(classes: &[u8], mask: &[u8], manifest: &DatasetManifest) -> RgbImage {
    let (nx, ny) = (manifest.layout.nx, manifest.layout.ny);
    let mut img = RgbImage::new(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            let mut rgb = manifest.palette.get(usize::from(classes[k])).copied().unwrap_or([255, 255, 255]);
            if mask[k] == 0 {
                rgb = rgb.map(|c| c / 4);
            }
            img.set(i, ny - 1 - j, rgb);
        }
    }
    img
}

fn mask_image(mask: &[u8], nx: usize, ny: usize) -> Vec<u8> {
    let mut out = vec![0u8; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            out[(ny - 1 - j) * nx + i] = if mask[j * nx + i] != 0 { 255 } else { 0 };
        }
    }
    out
}

/// Writes prediction, ground truth and mask images for each sample.
pub fn write_predictions(
    dir: &Path,
    probs: &[Tensor],
    samples: &[LoadedSample],
    manifest: &DatasetManifest,
) -> sbev_core::Result<()> {
    fs::create_dir_all(dir)?;
    let (nx, ny) = (manifest.layout.nx, manifest.layout.ny);
    for (p, s) in probs.iter().zip(samples) {
        let pred = argmax_channels(p);
        write_ppm(&dir.join(format!("{}_pred.ppm", s.id)), &layout_image(&pred, &s.gt.mask, manifest))?;
        write_ppm(&dir.join(format!("{}_gt.ppm", s.id)), &layout_image(&s.gt.classes, &s.gt.mask, manifest))?;
        write_pgm(&dir.join(format!("{}_mask.pgm", s.id)), nx, ny, &mask_image(&s.gt.mask, nx, ny))?;
    }
    Ok(())
}

/// Trains one model into `out`: `model.ckpt` after every finished epoch
/// (so a numeric failure leaves the last good one), `loss.csv`, optional
/// snapshots, and the final test report.
pub fn train_into(
    cfg: &RunConfig,
    out: &Path,
    train_set: &LoadedSet,
    test_set: &LoadedSet,
) -> Result<(SbevModel, EvalReport), CliError> {
    let mut resolved = cfg.clone();
    resolved.out = Some(out.to_path_buf());
    (resolved.train.seed, resolved.probe.seed) = (cfg.seed, cfg.seed);
    write_json(&out.join(CONFIG_FILE), &resolved)?;
    let mut model = new_model(cfg, &train_set.manifest, cfg.seed)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    let tc = &resolved.train;
    let mut records: Vec<EpochRecord> = Vec::new();
    let manifest = &test_set.manifest;
    let snap_n = cfg.snapshot_samples.min(test_set.samples.len());
    let result = train(&mut model, &train_set.samples, Some(&test_set.samples), tc, |rec, m| {
        records.push(rec.clone());
        let log = sbev_core::train::TrainLog { epochs: records.clone() };
        fs::write(out.join("loss.csv"), log.to_csv())?;
        save_checkpoint(&ckpt, m)?;
        if tc.snapshot_every > 0 && rec.epoch % tc.snapshot_every == 0 {
            let dir = out.join("snapshots").join(format!("epoch_{:03}", rec.epoch));
            save_checkpoint(&dir.join("model.ckpt"), m)?;
            let samples = &test_set.samples[..snap_n];
            let probs = samples.iter().map(|s| predict_probs(m, s)).collect::<sbev_core::Result<Vec<_>>>()?;
            write_predictions(&dir, &probs, samples, manifest)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, sbev_core::SbevError::Numeric(_)) {
            log::error!("training diverged; {} holds the last good epoch", ckpt.display());
        }
        return Err(e.into());
    }
    let probs = predict_all(&model, &test_set.samples)?;
    let report = report_from_probs(&probs, &test_set.samples, &manifest.layout, &cfg.eval_options())?;
    write_report(out, "report", &report, &manifest.class_names)?;
    Ok((model, report))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg, "runs/train")?;
    let train_set = load_split(cfg, "train")?.take_fraction(cfg.fraction)?;
    let test_set = load_split(cfg, "test")?;
    same_geometry(&train_set.manifest, &test_set.manifest)?;
    let (_, report) = train_into(cfg, &out, &train_set, &test_set)?;
    println!("final test mIoU {:.4}", report.miou_or_zero());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = one_checkpoint(cfg)?;
    let test_set = load_split(cfg, "test")?;
    let model = load_model(cfg, &test_set.manifest, ckpt)?;
    let out = prepare_out(cfg, "runs/eval")?;
    let probs = predict_all(&model, &test_set.samples)?;
    let report = report_from_probs(&probs, &test_set.samples, &test_set.manifest.layout, &cfg.eval_options())?;
    write_report(&out, "report", &report, &test_set.manifest.class_names)?;
    println!("mIoU {:.4} over {} visible cells", report.miou_or_zero(), report.n_visible);
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = one_checkpoint(cfg)?;
    let test_set = load_split(cfg, "test")?;
    let model = load_model(cfg, &test_set.manifest, ckpt)?;
    let out = prepare_out(cfg, "runs/predict")?;
    let n = match cfg.predict_limit {
        0 => test_set.samples.len(),
        k => k.min(test_set.samples.len()),
    };
    let samples = &test_set.samples[..n];
    let probs = predict_all(&model, samples)?;
    write_predictions(&out, &probs, samples, &test_set.manifest)?;
    println!("wrote {n} predictions to {}", out.display());
    Ok(())
}

pub fn cmd_sweep_fraction(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg, "runs/sweep")?;
    let full = load_split(cfg, "train")?;
    let test_set = load_split(cfg, "test")?;
    same_geometry(&full.manifest, &test_set.manifest)?;
    let mut csv = String::from("fraction,n_train,miou\n");
    for &f in &cfg.fractions {
        let subset = full.take_fraction(f)?;
        let dir = out.join(format!("fraction_{f}"));
        fs::create_dir_all(&dir)?;
        let sub = RunConfig {
            fraction: f,
            ..cfg.clone()
        };
        let (_, report) = train_into(&sub, &dir, &subset, &test_set)?;
        let _ = writeln!(csv, "{f},{},{:.6}", subset.samples.len(), report.miou_or_zero());
        write_text(&out.join("sweep.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EnsembleSummary {
    pub members: Vec<PathBuf>,
    pub member_miou: Vec<f64>,
    pub member_mean: f64,
    pub member_std: f64,
    pub ensemble: EvalReport,
}

/// Averages member probabilities; every member must share one configuration.
pub fn ensemble_report(
    models: &[SbevModel],
    test_set: &LoadedSet,
    options: &sbev_core::train::EvalOptions,
) -> Result<(Vec<f64>, EvalReport), CliError> {
    let Some(first) = models.first() else {
        return Err(CliError::Usage("ensemble needs members".into()));
    };
    let meta = CheckpointMeta::of(first);
    if models.iter().any(|m| CheckpointMeta::of(m) != meta) {
        return Err(CliError::Usage("ensemble members have different configurations".into()));
    }
    let layout = &test_set.manifest.layout;
    let mut member_probs = Vec::new();
    let mut member_miou = Vec::new();
    for m in models {
        let probs = predict_all(m, &test_set.samples)?;
        member_miou.push(report_from_probs(&probs, &test_set.samples, layout, options)?.miou_or_zero());
        member_probs.push(probs);
    }
    let averaged = (0..test_set.samples.len())
        .map(|k| ensemble_average(&member_probs.iter().map(|p| p[k].clone()).collect::<Vec<_>>()))
        .collect::<sbev_core::Result<Vec<_>>>()?;
    let report = report_from_probs(&averaged, &test_set.samples, layout, options)?;
    Ok((member_miou, report))
}

pub fn cmd_ensemble(cfg: &RunConfig) -> Result<(), CliError> {
    let out = prepare_out(cfg, "runs/ensemble")?;
    let test_set = load_split(cfg, "test")?;
    let mut paths = cfg.checkpoints.clone();
    if paths.is_empty() {
        if cfg.members < 2 {
            return Err(CliError::Usage("an ensemble needs at least 2 members".into()));
        }
        let train_set = load_split(cfg, "train")?.take_fraction(cfg.fraction)?;
        same_geometry(&train_set.manifest, &test_set.manifest)?;
        for k in 0..cfg.members {
            let dir = out.join(format!("member_{k}"));
            fs::create_dir_all(&dir)?;
            let member = RunConfig {
                seed: cfg.seed + k as u64,
                ..cfg.clone()
            };
            train_into(&member, &dir, &train_set, &test_set)?;
            paths.push(dir.join("model.ckpt"));
        }
    } else if paths.len() < 2 {
        return Err(CliError::Usage("an ensemble needs at least 2 member checkpoints".into()));
    }
    let models = paths
        .iter()
        .map(|p| load_model(cfg, &test_set.manifest, p))
        .collect::<Result<Vec<_>, _>>()?;
    let (member_miou, ensemble) = ensemble_report(&models, &test_set, &cfg.eval_options())?;
    let mean = member_miou.iter().sum::<f64>() / member_miou.len() as f64;
    let summary = EnsembleSummary {
        members: paths,
        member_std: std_dev(&member_miou),
        member_mean: mean,
        member_miou,
        ensemble,
    };
    let mut csv = String::from("kind,name,miou\n");
    for (p, m) in summary.members.iter().zip(&summary.member_miou) {
        let _ = writeln!(csv, "member,{},{m:.6}", p.display());
    }
    let _ = writeln!(csv, "member_mean,,{:.6}", summary.member_mean);
    let _ = writeln!(csv, "member_std,,{:.6}", summary.member_std);
    let _ = writeln!(csv, "ensemble,,{:.6}", summary.ensemble.miou_or_zero());
    write_text(&out.join("ensemble.csv"), &csv)?;
    write_json(&out.join("ensemble.json"), &summary)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.checkpoints.is_empty() {
        return Err(CliError::Usage("probe needs --checkpoints".into()));
    }
    let train_set = load_split(cfg, "train")?.take_fraction(cfg.fraction)?;
    let test_set = load_split(cfg, "test")?;
    let out = prepare_out(cfg, "runs/probe")?;
    let mut csv = String::from("checkpoint,variant,three_pixel_error,constant_baseline_error\n");
    let mut reports: Vec<(PathBuf, ProbeReport)> = Vec::new();
    for p in &cfg.checkpoints {
        // each checkpoint brings its own model configuration
        let meta = read_checkpoint_meta(p)?;
        let mut model = SbevModel::new(meta.config, meta.rig, meta.plane, meta.layout, 0)?;
        load_checkpoint_into(p, &mut model)?;
        let r = disparity_probe(&model, &train_set.samples, &test_set.samples, &cfg.probe)?;
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6}",
            p.display(),
            model.variant(),
            r.three_pixel_error,
            r.constant_baseline_error
        );
        write_text(&out.join("probe.csv"), &csv)?;
        reports.push((p.clone(), r));
    }
    write_json(&out.join("probe.json"), &reports)?;
    print!("{csv}");
    Ok(())
}
