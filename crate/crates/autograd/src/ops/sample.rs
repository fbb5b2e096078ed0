//! Bilinear resampling kernels: grid sampling and the horizontally shifted
//! disparity volume.

/// Bilinear taps of a continuous source coordinate: up to four
/// `(flat index, weight)` pairs inside an `h × w` plane, zero-padded outside.
#[inline]
fn taps(col: f64, row: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let mut out = [(0, 0.0); 4];
    if !col.is_finite() || !row.is_finite() {
        return out;
    }
    let x0 = col.floor();
    let y0 = row.floor();
    let fx = col - x0;
    let fy = row - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, &(x, y, wgt)) in out.iter_mut().zip(&corners) {
        if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
            *slot = (y as usize * w + x as usize, wgt);
        }
    }
    out
}

/// `input` is `n × c × h × w`, `grid` is `n × ho × wo × 2` holding (col, row).
pub(crate) fn grid_sample_forward(
    input: &[f64],
    grid: &[f64],
    [n, c, h, w]: [usize; 4],
    [ho, wo]: [usize; 2],
) -> Vec<f64> {
    let plane_in = h * w;
    let plane_out = ho * wo;
    let mut out = vec![0.0; n * c * plane_out];
    for b in 0..n {
        for p in 0..plane_out {
            let g = (b * plane_out + p) * 2;
            let t = taps(grid[g], grid[g + 1], h, w);
            for ch in 0..c {
                let src = &input[(b * c + ch) * plane_in..(b * c + ch + 1) * plane_in];
                let mut acc = 0.0;
                for &(idx, wgt) in &t {
                    if wgt != 0.0 {
                        acc += wgt * src[idx];
                    }
                }
                out[(b * c + ch) * plane_out + p] = acc;
            }
        }
    }
    out
}

pub(crate) fn grid_sample_backward(
    grid: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    [n, c, h, w]: [usize; 4],
    [ho, wo]: [usize; 2],
) {
    let plane_in = h * w;
    let plane_out = ho * wo;
    for b in 0..n {
        for p in 0..plane_out {
            let g = (b * plane_out + p) * 2;
            let t = taps(grid[g], grid[g + 1], h, w);
            for ch in 0..c {
                let go = grad_out[(b * c + ch) * plane_out + p];
                if go == 0.0 {
                    continue;
                }
                let dst = &mut grad_in[(b * c + ch) * plane_in..(b * c + ch + 1) * plane_in];
                for &(idx, wgt) in &t {
                    if wgt != 0.0 {
                        dst[idx] += wgt * go;
                    }
                }
            }
        }
    }
}

/// Linear taps for reading `row[x - shift]`; positions whose source falls
/// outside `[0, w-1]` are vacated and read as zero.
#[inline]
fn shift_taps(x: usize, shift: f64, w: usize) -> Option<(usize, f64, f64)> {
    let src = x as f64 - shift;
    if src < 0.0 || src > (w - 1) as f64 {
        return None;
    }
    let x0 = src.floor();
    let frac = src - x0;
    Some((x0 as usize, 1.0 - frac, frac))
}

/// Concatenation volume `n × 2c × d × h × w`: plane k holds the reference
/// features followed by the target features shifted right by `shifts[k]`.
pub(crate) fn cost_volume_forward(
    reference: &[f64],
    target: &[f64],
    shifts: &[f64],
    [n, c, h, w]: [usize; 4],
) -> Vec<f64> {
    let d = shifts.len();
    let plane = h * w;
    let mut out = vec![0.0; n * 2 * c * d * plane];
    for b in 0..n {
        for ch in 0..c {
            let r = &reference[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let t = &target[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (k, &s) in shifts.iter().enumerate() {
                let ref_base = ((b * 2 * c + ch) * d + k) * plane;
                out[ref_base..ref_base + plane].copy_from_slice(r);
                let tgt_base = ((b * 2 * c + c + ch) * d + k) * plane;
                for y in 0..h {
                    let row = &t[y * w..(y + 1) * w];
                    for x in 0..w {
                        if let Some((x0, w0, w1)) = shift_taps(x, s, w) {
                            let mut v = w0 * row[x0];
                            if w1 != 0.0 {
                                v += w1 * row[x0 + 1];
                            }
                            out[tgt_base + y * w + x] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn cost_volume_backward(
    grad_out: &[f64],
    shifts: &[f64],
    [n, c, h, w]: [usize; 4],
    mut grad_ref: Option<&mut [f64]>,
    mut grad_tgt: Option<&mut [f64]>,
) {
    let d = shifts.len();
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            for (k, &s) in shifts.iter().enumerate() {
                if let Some(gr) = grad_ref.as_deref_mut() {
                    let base = ((b * 2 * c + ch) * d + k) * plane;
                    let dst = &mut gr[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    for (a, g) in dst.iter_mut().zip(&grad_out[base..base + plane]) {
                        *a += g;
                    }
                }
                if let Some(gt) = grad_tgt.as_deref_mut() {
                    let base = ((b * 2 * c + c + ch) * d + k) * plane;
                    let dst = &mut gt[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            if let Some((x0, w0, w1)) = shift_taps(x, s, w) {
                                let go = grad_out[base + y * w + x];
                                dst[y * w + x0] += w0 * go;
                                if w1 != 0.0 {
                                    dst[y * w + x0 + 1] += w1 * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
