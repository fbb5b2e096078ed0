//! Disparity regression probe on a frozen refined volume: one 3D
//! convolution to a single cost channel, softmax over the planes, and the
//! expected plane disparity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sbev_autograd::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{config_err, Result, SbevError};
use crate::metrics::three_pixel_error;
use crate::network::SbevModel;
use crate::train::{purpose, sub_seed, LoadedSample};

/// Softmax over the plane axis of a `1 × 1 × D × H × W` cost volume,
/// weighted by the plane disparities: returns `1 × 1 × 1 × H × W`.
pub fn soft_argmax(g: &mut Graph, cost: Var, plane_disparity: &[f64]) -> Result<Var> {
    let s = g.shape(cost).to_vec();
    if s.len() != 5 || s[0] != 1 || s[1] != 1 || s[2] != plane_disparity.len() {
        return config_err(format!("cost volume {s:?} does not match {} planes", plane_disparity.len()));
    }
    let plane = s[3] * s[4];
    let p = g.softmax(cost, 2)?;
    let weights = Tensor::from_fn(&s, |k| plane_disparity[k / plane]);
    let w = g.constant(weights);
    let weighted = g.mul(p, w)?;
    Ok(g.sum_axis(weighted, 2)?)
}

/// Ground-truth disparity at feature resolution: image pixel `(ds·i, ds·j)`
/// for feature pixel `(i, j)`, which is where the strided extractor centers
/// its receptive field. Pixels without a surface or beyond `max_disparity`
/// are invalid.
pub fn feature_disparity(depth: &[f32], model: &SbevModel) -> (Vec<f64>, Vec<bool>) {
    let rig = &model.rig;
    let ds = model.config.feat_downsample;
    let (fw, fh) = (rig.width / ds, rig.height / ds);
    let mut disp = vec![0.0; fw * fh];
    let mut valid = vec![false; fw * fh];
    for i in 0..fh {
        for j in 0..fw {
            let z = f64::from(depth[(i * ds) * rig.width + j * ds]);
            if z > 0.0 {
                let d = rig.f * rig.baseline / z;
                disp[i * fw + j] = d;
                valid[i * fw + j] = d <= model.config.max_disparity;
            }
        }
    }
    (disp, valid)
}

/// Frozen-trunk features and targets of one sample.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub volume: Tensor,
    pub disparity: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn probe_samples(model: &SbevModel, samples: &[LoadedSample]) -> Result<Vec<ProbeSample>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let v = model.volume(&mut g, &s.left, &s.right)?;
            let (disparity, valid) = feature_disparity(&s.depth, model);
            Ok(ProbeSample {
                volume: g.value(v).clone(),
                disparity,
                valid,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DisparityProbe {
    pub params: ParamStore,
    weight: ParamId,
    bias: ParamId,
    plane_disparity: Vec<f64>,
}

impl DisparityProbe {
    pub fn new(volume_channels: usize, plane_disparity: Vec<f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let weight = params.he_uniform("probe.weight", &[1, volume_channels, 3, 3, 3], volume_channels * 27, &mut rng)?;
        let bias = params.zeros("probe.bias", &[1])?;
        Ok(Self {
            params,
            weight,
            bias,
            plane_disparity,
        })
    }

    pub fn for_model(model: &SbevModel, seed: u64) -> Result<Self> {
        let step = model.config.disp_step();
        let planes = (0..model.config.disparities).map(|k| k as f64 * step).collect();
        Self::new(model.config.volume_channels, planes, seed)
    }

    /// Disparity map `1 × 1 × 1 × H' × W'` in image pixels.
    pub fn forward(&self, g: &mut Graph, volume: Var) -> Result<Var> {
        let w = self.params.bind(g, self.weight);
        let b = self.params.bind(g, self.bias);
        let cost = g.conv3d(volume, w, b, 1, 1)?;
        soft_argmax(g, cost, &self.plane_disparity)
    }

    pub fn predict(&self, volume: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.constant(volume.clone());
        let d = self.forward(&mut g, v)?;
        Ok(g.value(d).data().to_vec())
    }

    /// Masked-L1 regression with Adam, one sample per step.
    pub fn fit(&mut self, train: &[ProbeSample], config: &ProbeConfig) -> Result<Vec<f64>> {
        let mut opt = AdamState::new(
            &self.params,
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        );
        let mut losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut total = 0.0;
            for s in train {
                let mut g = Graph::new();
                let v = g.constant(s.volume.clone());
                let d = self.forward(&mut g, v)?;
                let mask: Vec<f64> = s.valid.iter().map(|&v| f64::from(u8::from(v))).collect();
                let loss = g.masked_l1(d, &s.disparity, &mask)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(SbevError::Numeric(format!("probe loss {value} in epoch {epoch}")));
                }
                total += value;
                self.params.zero_grad();
                let grads = g.backward(loss)?;
                self.params.accumulate(&grads);
                opt.step(&mut self.params)?;
            }
            losses.push(total / train.len().max(1) as f64);
        }
        Ok(losses)
    }

    pub fn error(&self, samples: &[ProbeSample]) -> Result<f64> {
        let (mut pred, mut gt, mut valid) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            pred.extend(self.predict(&s.volume)?);
            gt.extend_from_slice(&s.disparity);
            valid.extend_from_slice(&s.valid);
        }
        three_pixel_error(&pred, &gt, &valid)
    }
}

/// Three-pixel error of predicting the median training disparity everywhere.
pub fn constant_disparity_error(train: &[ProbeSample], test: &[ProbeSample]) -> Result<f64> {
    let mut values: Vec<f64> = train
        .iter()
        .flat_map(|s| s.disparity.iter().zip(&s.valid).filter(|(_, &v)| v).map(|(&d, _)| d))
        .collect();
    if values.is_empty() {
        return config_err("no valid training disparities");
    }
    values.sort_by(f64::total_cmp);
    let median = values[values.len() / 2];
    let (mut gt, mut valid) = (Vec::new(), Vec::new());
    for s in test {
        gt.extend_from_slice(&s.disparity);
        valid.extend_from_slice(&s.valid);
    }
    three_pixel_error(&vec![median; gt.len()], &gt, &valid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub three_pixel_error: f64,
    pub constant_baseline_error: f64,
    pub train_losses: Vec<f64>,
}

/// Fits a probe on the frozen trunk of `model` and scores it on `test`.
pub fn disparity_probe(model: &SbevModel, train: &[LoadedSample], test: &[LoadedSample], config: &ProbeConfig) -> Result<ProbeReport> {
    if !model.variant().uses_stereo() {
        return config_err(format!("variant {} has no disparity volume", model.variant()));
    }
    let train_p = probe_samples(model, train)?;
    let test_p = probe_samples(model, test)?;
    let mut probe = DisparityProbe::for_model(model, sub_seed(config.seed, purpose::PROBE))?;
    let train_losses = probe.fit(&train_p, config)?;
    Ok(ProbeReport {
        three_pixel_error: probe.error(&test_p)?,
        constant_baseline_error: constant_disparity_error(&train_p, &test_p)?,
        train_losses,
    })
}
