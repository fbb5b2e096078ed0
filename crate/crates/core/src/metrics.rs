//! Training objectives and evaluation quantities: masked IoU, distance bins,
//! pixel AP, 3-pixel disparity error and ensemble averaging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use sbev_autograd::{Graph, Tensor, Var};

use crate::error::{config_err, Result, SbevError};
use crate::geometry::LayoutSpec;
use crate::network::ForwardOutput;
use crate::scenesim::SemanticMap;

/// Visibility-masked cross entropy of `1 × N_C × N_y × N_x` logits.
pub fn loss_supervised(g: &mut Graph, logits: Var, gt: &SemanticMap, normalize: bool) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    let logits = if s.len() == 4 && s[0] == 1 {
        g.reshape(logits, &s[1..])?
    } else {
        logits
    };
    Ok(g.masked_softmax_ce(logits, &gt.targets(), &gt.mask_f64(), normalize)?)
}

/// `L_r(ipm) + L_r(stereo) + L_KT` for a CMD training forward pass.
pub fn loss_cmd(g: &mut Graph, out: &ForwardOutput, gt: &SemanticMap, normalize: bool) -> Result<Var> {
    let (Some(ipm), Some(kt)) = (out.ipm_logits, out.distill) else {
        return config_err("loss_cmd needs a CMD forward pass in training mode");
    };
    let l_ipm = loss_supervised(g, ipm, gt, normalize)?;
    let l_stereo = loss_supervised(g, out.logits, gt, normalize)?;
    let s = g.add(l_ipm, l_stereo)?;
    Ok(g.add(s, kt)?)
}

/// Training loss for any variant.
pub fn training_loss(g: &mut Graph, out: &ForwardOutput, gt: &SemanticMap, normalize: bool) -> Result<Var> {
    if out.ipm_logits.is_some() {
        loss_cmd(g, out, gt, normalize)
    } else {
        loss_supervised(g, out.logits, gt, normalize)
    }
}

/// Per-class intersection and union counts, accumulated over samples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub visible: u64,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
            visible: 0,
        }
    }

    /// Adds the cells where `mask` is set. Class values outside the range
    /// are rejected.
    pub fn add(&mut self, pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != mask.len() {
            return config_err(format!("pred/gt/mask sizes {}/{}/{}", pred.len(), gt.len(), mask.len()));
        }
        let n = self.union.len();
        for ((&p, &t), &m) in pred.iter().zip(gt).zip(mask) {
            if !m {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return config_err(format!("class {} out of range 0..{n}", p.max(t)));
            }
            self.visible += 1;
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let per_class_iou: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        EvalReport {
            per_class_iou,
            miou,
            n_visible: self.visible,
            distance_bins: Vec::new(),
            pixel_ap: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Cells at least the threshold away from the camera.
    Min,
    /// Cells at most the threshold away.
    Max,
}

impl DistanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::Min => "min",
            DistanceMode::Max => "max",
        }
    }

    fn keeps(self, distance: f64, threshold: f64) -> bool {
        match self {
            DistanceMode::Min => distance >= threshold,
            DistanceMode::Max => distance <= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub threshold: f64,
    pub mode: DistanceMode,
    pub miou: Option<f64>,
    pub n_visible: u64,
}

/// IoU summary. Classes whose union is empty have no IoU and are left out
/// of the mean; `miou` is `None` when no class is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub n_visible: u64,
    #[serde(default)]
    pub distance_bins: Vec<DistanceBin>,
    #[serde(default)]
    pub pixel_ap: Option<Vec<Option<f64>>>,
}

impl EvalReport {
    pub fn miou_or_zero(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }

    /// One row per class, then a summary row, then one row per distance bin.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let mut out = String::from("kind,name,iou,ap\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let ap = self.pixel_ap.as_ref().and_then(|a| a.get(c).copied().flatten());
            let _ = writeln!(out, "class,{name},{},{}", fmt(*iou), fmt(ap));
        }
        let _ = writeln!(out, "summary,miou,{},", fmt(self.miou));
        for b in &self.distance_bins {
            let _ = writeln!(out, "distance_{},{},{},", b.mode.name(), b.threshold, fmt(b.miou));
        }
        out
    }
}

/// IoU of one prediction against a visibility-masked ground truth.
pub fn masked_macro_iou(pred: &[u8], gt: &SemanticMap, n_classes: usize) -> Result<EvalReport> {
    let mut counts = IouCounts::new(n_classes);
    let mask: Vec<bool> = gt.mask.iter().map(|&m| m != 0).collect();
    counts.add(pred, &gt.classes, &mask)?;
    Ok(counts.report())
}

/// Euclidean distance of every cell center from the camera, row-major.
pub fn cell_distances(layout: &LayoutSpec) -> Vec<f64> {
    let mut d = Vec::with_capacity(layout.cells());
    for j in 0..layout.ny {
        for i in 0..layout.nx {
            let (x, y) = layout.cell_center(i, j);
            d.push(x.hypot(y));
        }
    }
    d
}

/// Per-threshold counts restricted by cell distance; accumulates over samples.
#[derive(Clone, Debug)]
pub struct DistanceCounts {
    pub thresholds: Vec<f64>,
    pub mode: DistanceMode,
    pub bins: Vec<IouCounts>,
    distances: Vec<f64>,
}

impl DistanceCounts {
    pub fn new(layout: &LayoutSpec, thresholds: &[f64], mode: DistanceMode) -> Result<Self> {
        if thresholds.windows(2).any(|w| w[0] > w[1]) {
            return config_err("distance thresholds must be ascending");
        }
        Ok(Self {
            thresholds: thresholds.to_vec(),
            mode,
            bins: vec![IouCounts::new(layout.classes); thresholds.len()],
            distances: cell_distances(layout),
        })
    }

    pub fn add(&mut self, pred: &[u8], gt: &SemanticMap) -> Result<()> {
        for (t, counts) in self.thresholds.iter().zip(&mut self.bins) {
            let mask: Vec<bool> = gt
                .mask
                .iter()
                .zip(&self.distances)
                .map(|(&m, &d)| m != 0 && self.mode.keeps(d, *t))
                .collect();
            counts.add(pred, &gt.classes, &mask)?;
        }
        Ok(())
    }

    pub fn reports(&self) -> Vec<EvalReport> {
        self.bins.iter().map(IouCounts::report).collect()
    }

    pub fn summary(&self) -> Vec<DistanceBin> {
        self.thresholds
            .iter()
            .zip(&self.bins)
            .map(|(&threshold, c)| {
                let r = c.report();
                DistanceBin {
                    threshold,
                    mode: self.mode,
                    miou: r.miou,
                    n_visible: r.n_visible,
                }
            })
            .collect()
    }
}

/// Masked IoU over cells whose center distance passes each threshold.
pub fn distance_binned_iou(
    pred: &[u8],
    gt: &SemanticMap,
    layout: &LayoutSpec,
    thresholds: &[f64],
    mode: DistanceMode,
) -> Result<Vec<EvalReport>> {
    let mut d = DistanceCounts::new(layout, thresholds, mode)?;
    d.add(pred, gt)?;
    Ok(d.reports())
}

/// Average precision of one class: step-wise area under the precision-recall
/// curve, one step per distinct score. Ties are ranked together. `None`
/// when the class has no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Per-class AP over visible cells. `scores` is `N_C × cells`.
pub fn pixel_ap(scores: &[f64], gt: &SemanticMap, n_classes: usize) -> Result<Vec<Option<f64>>> {
    let cells = gt.classes.len();
    if scores.len() != n_classes * cells {
        return config_err(format!("scores hold {} values, expected {n_classes}×{cells}", scores.len()));
    }
    let visible: Vec<usize> = (0..cells).filter(|&i| gt.mask[i] != 0).collect();
    Ok((0..n_classes)
        .map(|c| {
            let s: Vec<f64> = visible.iter().map(|&i| scores[c * cells + i]).collect();
            let p: Vec<bool> = visible.iter().map(|&i| gt.classes[i] as usize == c).collect();
            average_precision(&s, &p)
        })
        .collect())
}

/// Accumulates visible-cell scores across samples for a pooled AP.
#[derive(Clone, Debug, Default)]
pub struct ApPool {
    scores: Vec<Vec<f64>>,
    positive: Vec<Vec<bool>>,
}

impl ApPool {
    pub fn new(classes: usize) -> Self {
        Self {
            scores: vec![Vec::new(); classes],
            positive: vec![Vec::new(); classes],
        }
    }

    pub fn add(&mut self, scores: &[f64], gt: &SemanticMap) {
        let cells = gt.classes.len();
        for c in 0..self.scores.len() {
            for i in (0..cells).filter(|&i| gt.mask[i] != 0) {
                self.scores[c].push(scores[c * cells + i]);
                self.positive[c].push(gt.classes[i] as usize == c);
            }
        }
    }

    pub fn ap(&self) -> Vec<Option<f64>> {
        self.scores.iter().zip(&self.positive).map(|(s, p)| average_precision(s, p)).collect()
    }
}

/// Fraction of valid pixels whose disparity is off by more than 3 px.
pub fn three_pixel_error(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return config_err("three_pixel_error: size mismatch");
    }
    let (mut bad, mut n) = (0usize, 0usize);
    for ((p, t), &v) in pred.iter().zip(gt).zip(valid) {
        if v {
            n += 1;
            if (p - t).abs() > 3.0 {
                bad += 1;
            }
        }
    }
    if n == 0 {
        return config_err("three_pixel_error: empty valid mask");
    }
    Ok(bad as f64 / n as f64)
}

/// Softmax over the channel axis of a `[1 ×] N_C × H × W` logit tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    let (c, plane) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => return config_err(format!("expected C×H×W logits, got {s:?}")),
    };
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let m = (0..c).map(|k| x[k * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (x[k * plane + p] - m).exp();
            out[k * plane + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * plane + p] /= z;
        }
    }
    let shape = [c, s[s.len() - 2], s[s.len() - 1]];
    Ok(Tensor::new(&shape, out)?)
}

/// Class index of the largest channel per cell; ties go to the lower class.
pub fn argmax_channels(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let c = s[s.len() - 3];
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let x = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if x[k * plane + p] > x[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Arithmetic mean of member probability maps.
pub fn ensemble_average(members: &[Tensor]) -> Result<Tensor> {
    let first = members
        .first()
        .ok_or_else(|| SbevError::Config("ensemble needs at least one member".into()))?;
    let mut acc = vec![0.0; first.len()];
    for m in members {
        if m.shape() != first.shape() {
            return config_err(format!("member shape {:?} differs from {:?}", m.shape(), first.shape()));
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Tensor::new(first.shape(), acc)?)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}
