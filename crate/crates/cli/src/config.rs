//! Run configuration: defaults, `--config` files and `--key value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sbev_core::geometry::{GroundPlane, LayoutSpec, StereoRig};
use sbev_core::network::ModelConfig;
use sbev_core::probe::ProbeConfig;
use sbev_core::scenesim::SceneParams;
use sbev_core::train::{EvalOptions, TrainConfig};

use crate::error::CliError;

/// Every setting of every command. The defaults are the benchmark runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; initialization, data order and probes derive from it.
    pub seed: u64,
    /// Seed of the synthetic dataset.
    pub data_seed: u64,
    /// Dataset directory holding `train.json` and `test.json`.
    pub data: PathBuf,
    /// Output directory; each command has its own default.
    pub out: Option<PathBuf>,
    pub force: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Leading share of the training set that is used (or generated).
    pub fraction: f64,
    pub scene: SceneParams,
    pub rig: StereoRig,
    pub plane: GroundPlane,
    pub layout: LayoutSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Checkpoints read by eval, predict, ensemble and probe.
    pub checkpoints: Vec<PathBuf>,
    /// Ensemble size when no member checkpoints are given.
    pub members: usize,
    pub fractions: Vec<f64>,
    pub distance_thresholds: Vec<f64>,
    pub pixel_ap: bool,
    /// Test samples rendered with every snapshot.
    pub snapshot_samples: usize,
    /// Samples written by predict; 0 writes all of them.
    pub predict_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1,
            data: PathBuf::from("data"),
            out: None,
            force: false,
            n_train: 400,
            n_test: 100,
            fraction: 1.0,
            scene: SceneParams::default(),
            rig: StereoRig::default(),
            plane: GroundPlane::default(),
            layout: LayoutSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            checkpoints: Vec::new(),
            members: 3,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            distance_thresholds: vec![5.0, 10.0, 15.0, 20.0],
            pixel_ap: true,
            snapshot_samples: 4,
            predict_limit: 0,
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file, then the overrides, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let patch: Value =
                serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch, "")?;
        }
        for (key, raw) in parse_overrides(overrides)? {
            set_path(&mut value, &key, &raw)?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.probe.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: sbev_core::SbevError| CliError::Usage(e.to_string());
        self.rig.validate().map_err(usage)?;
        self.plane.validate().map_err(usage)?;
        self.layout.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        if self.model.classes != self.layout.classes {
            return Err(CliError::Usage(format!(
                "model.classes = {} but layout.classes = {}",
                self.model.classes, self.layout.classes
            )));
        }
        for &f in self.fractions.iter().chain([&self.fraction]) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CliError::Usage(format!("fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            distance_thresholds: self.distance_thresholds.clone(),
            pixel_ap: self.pixel_ap,
        }
    }
}

/// Splits `--key value` and `--key=value` pairs; a bare `--flag` means `true`.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument {arg:?}; overrides look like --key value")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.replace('-', "_"), v.to_string()));
            continue;
        }
        let value = match it.peek() {
            Some(next) if !next.starts_with("--") => it.next().cloned().unwrap_or_default(),
            _ => "true".to_string(),
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Usage(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
        }
        (b, p) => *b = p,
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o: &mut Map<String, Value>| o.get_mut(part))
            .ok_or_else(|| CliError::Usage(format!("unknown option --{key}")))?;
    }
    *slot = match slot {
        Value::String(_) | Value::Null if !looks_like_json(raw) => Value::String(raw.to_string()),
        Value::Array(_) if !raw.starts_with('[') => Value::Array(raw.split(',').map(parse_scalar).collect()),
        _ => parse_scalar(raw),
    };
    Ok(())
}

fn looks_like_json(raw: &str) -> bool {
    raw == "null" || raw.starts_with('{') || raw.starts_with('"')
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::resolve(
            None,
            &args("--train.epochs 3 --model.variant cmd --seed=7 --checkpoints a.ckpt,b.ckpt --data d --force"),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.variant, sbev_core::network::Variant::Cmd);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.probe.seed), (7, 7, 7));
        assert_eq!(cfg.checkpoints, vec![PathBuf::from("a.ckpt"), PathBuf::from("b.ckpt")]);
        assert_eq!(cfg.data, PathBuf::from("d"));
        assert!(cfg.force);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for bad in ["--train.epoch 3", "--model.variant nope", "--fraction 0", "stray", "--train.lr -1"] {
            assert!(matches!(RunConfig::resolve(None, &args(bad)), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn config_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"epochs": 9, "lr": 0.01}, "members": 2}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), &args("--train.epochs 4")).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.lr, cfg.members), (4, 0.01, 2));
        std::fs::write(&p, r#"{"train": {"epochz": 9}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(None, &args("--out x --train.snapshot_every 2")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap(), cfg);
    }
}
