//! Scalar objectives with hand-written gradients.

/// Per-pixel softmax over `classes` channel planes of `plane` pixels.
/// Returns probabilities in the same `classes × plane` layout.
pub(crate) fn softmax_planes(logits: &[f64], classes: usize, plane: usize) -> Vec<f64> {
    let mut probs = vec![0.0; classes * plane];
    for p in 0..plane {
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits[c * plane + p]);
        }
        let mut z = 0.0;
        for c in 0..classes {
            let e = (logits[c * plane + p] - max).exp();
            probs[c * plane + p] = e;
            z += e;
        }
        for c in 0..classes {
            probs[c * plane + p] /= z;
        }
    }
    probs
}

/// Masked cross entropy. Returns (loss, normalizer, probabilities).
pub(crate) fn masked_ce_forward(
    logits: &[f64],
    target: &[usize],
    mask: &[f64],
    classes: usize,
    normalize: bool,
) -> (f64, f64, Vec<f64>) {
    let plane = target.len();
    let mut total = 0.0;
    let mut weight = 0.0;
    for p in 0..plane {
        let v = mask[p];
        if v == 0.0 {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for c in 0..classes {
            max = max.max(logits[c * plane + p]);
        }
        let lse = max
            + (0..classes)
                .map(|c| (logits[c * plane + p] - max).exp())
                .sum::<f64>()
                .ln();
        total += v * (lse - logits[target[p] * plane + p]);
        weight += v;
    }
    let norm = if normalize { weight.max(1.0) } else { 1.0 };
    let probs = softmax_planes(logits, classes, plane);
    (total / norm, norm, probs)
}

pub(crate) fn masked_ce_backward(
    probs: &[f64],
    target: &[usize],
    mask: &[f64],
    classes: usize,
    norm: f64,
    grad: f64,
    grad_logits: &mut [f64],
) {
    let plane = target.len();
    for p in 0..plane {
        let v = mask[p];
        if v == 0.0 {
            continue;
        }
        let scale = grad * v / norm;
        for c in 0..classes {
            let indicator = if target[p] == c { 1.0 } else { 0.0 };
            grad_logits[c * plane + p] += scale * (probs[c * plane + p] - indicator);
        }
    }
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
