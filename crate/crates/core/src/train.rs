//! Dataset loading, the training loop and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sbev_autograd::{AdamConfig, AdamState, Graph, Tensor};

use crate::baselines::pseudo_lidar_bev;
use crate::error::{config_err, Result, SbevError};
use crate::io::{manifest_root, read_manifest, read_sample, DatasetManifest, Sample};
use crate::metrics::{argmax_channels, softmax_channels, training_loss, ApPool, DistanceCounts, DistanceMode, IouCounts, EvalReport};
use crate::network::{ModelInput, SbevModel};
use crate::scenesim::SemanticMap;

/// Purposes a run seed is split into.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const ORDER: u64 = 2;
    pub const PROBE: u64 = 3;
}

/// Derives an independent seed for one purpose (splitmix64 finalizer).
pub fn sub_seed(seed: u64, purpose: u64) -> u64 {
    let mut z = seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A sample converted to network inputs.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub left: Tensor,
    pub right: Tensor,
    pub gt: SemanticMap,
    pub depth: Vec<f32>,
    pub front_classes: Vec<u8>,
    pub pseudo_lidar: Option<Tensor>,
}

impl LoadedSample {
    pub fn from_sample(sample: &Sample, manifest: &DatasetManifest, with_pseudo_lidar: bool) -> Result<Self> {
        let pseudo_lidar = if with_pseudo_lidar {
            Some(pseudo_lidar_bev(&sample.depth.data, &sample.front_classes, &manifest.rig, &manifest.layout)?)
        } else {
            None
        };
        Ok(Self {
            id: sample.id.clone(),
            left: sample.left.to_tensor(),
            right: sample.right.to_tensor(),
            gt: sample.gt.clone(),
            depth: sample.depth.data.clone(),
            front_classes: sample.front_classes.clone(),
            pseudo_lidar,
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            left: &self.left,
            right: &self.right,
            pseudo_lidar: self.pseudo_lidar.as_ref(),
        }
    }
}

/// A manifest with all of its samples in memory.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl LoadedSet {
    pub fn load(manifest_path: &Path, with_pseudo_lidar: bool) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        Self::from_manifest(manifest, &manifest_root(manifest_path), with_pseudo_lidar)
    }

    pub fn from_manifest(manifest: DatasetManifest, root: &Path, with_pseudo_lidar: bool) -> Result<Self> {
        let samples = manifest
            .samples
            .iter()
            .map(|rec| {
                let s = read_sample(root, rec, manifest.layout.classes)?;
                LoadedSample::from_sample(&s, &manifest, with_pseudo_lidar)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    /// The first `fraction` of the samples, in manifest order.
    pub fn take_fraction(&self, fraction: f64) -> Result<Self> {
        let manifest = self.manifest.take_fraction(fraction)?;
        let samples = self.samples[..manifest.samples.len()].to_vec();
        Ok(Self { manifest, samples })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Divide the masked loss by the visible-cell count.
    pub normalize_loss: bool,
    /// Evaluate on the test set after every epoch.
    pub eval_each_epoch: bool,
    /// Save a snapshot every N epochs; 0 disables snapshots.
    pub snapshot_every: usize,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm limit per optimizer step; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

/// Per-epoch learning rate, starting from `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` toward zero over the run.
    Cosine,
}

impl LrSchedule {
    /// Learning rate of `epoch` (1-based) out of `epochs`.
    pub fn lr(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = (epoch - 1) as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 2,
            lr: 1e-3,
            seed: 0,
            normalize_loss: true,
            eval_each_epoch: true,
            snapshot_every: 0,
            lr_schedule: LrSchedule::Cosine,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return config_err(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_miou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_miou\n");
        for e in &self.epochs {
            let m = e.test_miou.map_or_else(String::new, |m| format!("{m:.6}"));
            out.push_str(&format!("{},{:.9},{m}\n", e.epoch, e.train_loss));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Trains `model` in place. `on_epoch` runs after every epoch (for logging,
/// checkpoints and snapshots); an error from it stops training. A
/// non-finite loss or gradient aborts with [`SbevError::Numeric`] before any
/// parameter changes in that step.
pub fn train(
    model: &mut SbevModel,
    train_set: &[LoadedSample],
    test_set: Option<&[LoadedSample]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &SbevModel) -> Result<()>,
) -> Result<TrainLog> {
    config.validate()?;
    if train_set.is_empty() {
        return config_err("training set is empty");
    }
    let adam = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(&model.params, adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, purpose::ORDER));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        opt.config.lr = config.lr_schedule.lr(config.lr, epoch, config.epochs);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.params.zero_grad();
            for &k in batch {
                let s = &train_set[k];
                let mut g = Graph::new();
                let out = model.forward(&mut g, &s.input(), true)?;
                let loss = training_loss(&mut g, &out, &s.gt, config.normalize_loss)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(SbevError::Numeric(format!("loss {value} on sample {} in epoch {epoch}", s.id)));
                }
                total += value;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                let grads = g.backward(scaled)?;
                model.params.accumulate(&grads);
            }
            if let Some(c) = config.grad_clip {
                model.params.clip_grad_norm(c);
            }
            opt.step(&mut model.params).map_err(|e| SbevError::Numeric(format!("epoch {epoch}: {e}")))?;
        }
        let test_miou = match test_set {
            Some(t) if config.eval_each_epoch => Some(evaluate(model, t, &EvalOptions::default())?.miou_or_zero()),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            test_miou,
        };
        log::info!("epoch {epoch}: loss {:.5} test mIoU {:?}", rec.train_loss, rec.test_miou);
        on_epoch(&rec, model)?;
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Class probabilities `N_C × N_y × N_x` for one sample (inference mode).
pub fn predict_probs(model: &SbevModel, sample: &LoadedSample) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.input(), false)?;
    softmax_channels(g.value(out.logits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub distance_thresholds: Vec<f64>,
    pub pixel_ap: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            distance_thresholds: Vec::new(),
            pixel_ap: false,
        }
    }
}

impl EvalOptions {
    /// Distance bins at 5, 10, 15 and 20 m plus pixel AP.
    pub fn full() -> Self {
        Self {
            distance_thresholds: vec![5.0, 10.0, 15.0, 20.0],
            pixel_ap: true,
        }
    }
}

/// Accumulates global per-class counts over a set of probability maps.
pub fn report_from_probs(probs: &[Tensor], samples: &[LoadedSample], layout: &crate::geometry::LayoutSpec, options: &EvalOptions) -> Result<EvalReport> {
    if probs.len() != samples.len() {
        return config_err(format!("{} predictions for {} samples", probs.len(), samples.len()));
    }
    let classes = layout.classes;
    let mut counts = IouCounts::new(classes);
    let mut bins = Vec::new();
    if !options.distance_thresholds.is_empty() {
        for mode in [DistanceMode::Min, DistanceMode::Max] {
            bins.push(DistanceCounts::new(layout, &options.distance_thresholds, mode)?);
        }
    }
    let mut ap = options.pixel_ap.then(|| ApPool::new(classes));
    for (p, s) in probs.iter().zip(samples) {
        let pred = argmax_channels(p);
        let mask: Vec<bool> = s.gt.mask.iter().map(|&m| m != 0).collect();
        counts.add(&pred, &s.gt.classes, &mask)?;
        for b in &mut bins {
            b.add(&pred, &s.gt)?;
        }
        if let Some(pool) = &mut ap {
            pool.add(p.data(), &s.gt);
        }
    }
    let mut report = counts.report();
    report.distance_bins = bins.iter().flat_map(DistanceCounts::summary).collect();
    report.pixel_ap = ap.map(|pool| pool.ap());
    Ok(report)
}

pub fn evaluate(model: &SbevModel, samples: &[LoadedSample], options: &EvalOptions) -> Result<EvalReport> {
    let probs = samples.iter().map(|s| predict_probs(model, s)).collect::<Result<Vec<_>>>()?;
    report_from_probs(&probs, samples, &model.layout, options)
}
