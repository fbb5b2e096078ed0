//! Dense 2D/3D convolution via per-slice im2col and GEMM.
//!
//! A 2D convolution is run as a 3D one with unit depth and a depth-1 kernel,
//! so both share the same kernels. The 3D case is decomposed over kernel
//! depth: each input depth slice is unrolled once with a 2D im2col, and every
//! output slice accumulates `W[:, :, kd] · cols(id)` over the kernel taps
//! that reach it. This keeps unrolled buffers at `c_in·kh·kw` rows instead of
//! `c_in·kd·kh·kw` and shares them between neighbouring output slices.

use crate::gemm::{gemm, MatRef};

/// Geometry of one convolution call, all extents in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// input (depth, height, width)
    pub input: [usize; 3],
    /// kernel (depth, height, width)
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn output(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (self.input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    /// Rows of a 2D unrolled slice: `c_in · kh · kw`.
    fn slice_rows(&self) -> usize {
        self.c_in * self.kernel[1] * self.kernel[2]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output().iter().product()
    }

    fn out_plane(&self) -> usize {
        let [_, oh, ow] = self.output();
        oh * ow
    }

    /// Input depth slice read by output slice `od` through kernel tap `kd`.
    fn source_slice(&self, od: usize, kd: usize) -> Option<usize> {
        let id = (od * self.stride[0] + kd) as isize - self.pad[0] as isize;
        (id >= 0 && (id as usize) < self.input[0]).then_some(id as usize)
    }
}

/// Output columns `ox` whose source column `ox·stride + k − pad` lies inside
/// `[0, iw)`, as a half-open range.
fn valid_cols(ow: usize, iw: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ox·stride + k − pad ≤ iw − 1
    let limit = iw + pad;
    let hi = if limit > k { ((limit - k - 1) / stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unrolls input depth slice `id` (all channels) into block `id` of `cols`,
/// a row-major `c_in·kh·kw × oh·ow` matrix.
fn im2col(g: &ConvGeom, input: &[f64], id: usize, cols: &mut [f64]) {
    let [_, ih, iw] = g.input;
    let [_, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output();
    let [_, sh, sw] = g.stride;
    let [_, ph, pw] = g.pad;
    let plane = oh * ow;
    let vol = g.in_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let src_slice = &input[c * vol + id * ih * iw..c * vol + (id + 1) * ih * iw];
        for zh in 0..kh {
            for zw in 0..kw {
                let off = (id * g.slice_rows() + row) * plane;
                let dst = &mut cols[off..off + plane];
                row += 1;
                let (lo, hi) = valid_cols(ow, iw, zw, sw, pw);
                for oy in 0..oh {
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * sh + zh) as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize || lo >= hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &src_slice[iy as usize * iw..(iy as usize + 1) * iw];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = lo * sw + zw - pw;
                    if sw == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[start + k * sw];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds the columns of depth slice `id` back into `grad_input`.
fn col2im(g: &ConvGeom, cols: &[f64], id: usize, grad_input: &mut [f64]) {
    let [_, ih, iw] = g.input;
    let [_, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output();
    let [_, sh, sw] = g.stride;
    let [_, ph, pw] = g.pad;
    let plane = oh * ow;
    let vol = g.in_volume();
    let mut row = 0;
    for c in 0..g.c_in {
        let base = c * vol + id * ih * iw;
        for zh in 0..kh {
            for zw in 0..kw {
                let off = (id * g.slice_rows() + row) * plane;
                let src = &cols[off..off + plane];
                row += 1;
                let (lo, hi) = valid_cols(ow, iw, zw, sw, pw);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * sh + zh) as isize - ph as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst = &mut grad_input[base + iy as usize * iw..base + (iy as usize + 1) * iw];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    let start = lo * sw + zw - pw;
                    if sw == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (k, v) in s.iter().enumerate() {
                            dst[start + k * sw] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Repacks `c_out × c_in × kd × kh × kw` weights into `kd` contiguous
/// `c_out × (c_in·kh·kw)` matrices.
fn pack_weights(g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
    let [kd, kh, kw] = g.kernel;
    let taps = kh * kw;
    let rows = g.slice_rows();
    let mut packed = vec![0.0; kd * g.c_out * rows];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for z in 0..kd {
                let src = ((o * g.c_in + c) * kd + z) * taps;
                let dst = (z * g.c_out + o) * rows + c * taps;
                packed[dst..dst + taps].copy_from_slice(&weight[src..src + taps]);
            }
        }
    }
    packed
}

fn unpack_add_weights(g: &ConvGeom, packed: &[f64], weight: &mut [f64]) {
    let [kd, kh, kw] = g.kernel;
    let taps = kh * kw;
    let rows = g.slice_rows();
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for z in 0..kd {
                let dst = ((o * g.c_in + c) * kd + z) * taps;
                let src = (z * g.c_out + o) * rows + c * taps;
                for (d, s) in weight[dst..dst + taps].iter_mut().zip(&packed[src..src + taps]) {
                    *d += s;
                }
            }
        }
    }
}

/// Unrolls every input depth slice of one batch item, one block per slice.
fn unroll_all(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let mut cols = vec![0.0; g.input[0] * g.slice_rows() * g.out_plane()];
    for id in 0..g.input[0] {
        im2col(g, input, id, &mut cols);
    }
    cols
}

/// Pairs `(od, id)` of output slices fed by kernel tap `kd`.
fn taps(g: &ConvGeom, kd: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..g.output()[0]).filter_map(move |od| g.source_slice(od, kd).map(|id| (od, id)))
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_vol = g.out_volume();
    let plane = g.out_plane();
    let rows = g.slice_rows();
    let chunk = rows * plane;
    let in_len = g.c_in * g.in_volume();
    let packed = pack_weights(g, weight);
    let mut out = vec![0.0; g.batch * g.c_out * out_vol];
    for n in 0..g.batch {
        let cols = unroll_all(g, &input[n * in_len..(n + 1) * in_len]);
        let dst = &mut out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
        for (o, chunk_out) in dst.chunks_mut(out_vol).enumerate() {
            chunk_out.fill(bias[o]);
        }
        for kd in 0..g.kernel[0] {
            let w = &packed[kd * g.c_out * rows..(kd + 1) * g.c_out * rows];
            for (od, id) in taps(g, kd) {
                gemm(
                    MatRef::row_major(w, g.c_out, rows),
                    MatRef::row_major(&cols[id * chunk..(id + 1) * chunk], rows, plane),
                    1.0,
                    &mut dst[od * plane..],
                    out_vol,
                );
            }
        }
    }
    out
}

/// Gradient buffers to accumulate into; `None` skips that gradient.
pub(crate) struct ConvGrads<'a> {
    pub input: Option<&'a mut [f64]>,
    pub weight: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

pub(crate) fn backward(g: &ConvGeom, input: &[f64], weight: &[f64], grad_out: &[f64], mut grads: ConvGrads<'_>) {
    let out_vol = g.out_volume();
    let plane = g.out_plane();
    let rows = g.slice_rows();
    let chunk = rows * plane;
    let in_len = g.c_in * g.in_volume();
    let kd_n = g.kernel[0];
    // output-gradient slice `od` as a c_out × plane matrix
    fn dout(go: &[f64], od: usize, c_out: usize, plane: usize, out_vol: usize) -> MatRef<'_> {
        MatRef {
            data: &go[od * plane..],
            rows: c_out,
            cols: plane,
            rs: out_vol,
            cs: 1,
        }
    }

    if let Some(gb) = grads.bias.as_deref_mut() {
        for n in 0..g.batch {
            let go = &grad_out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            for (o, chunk) in go.chunks(out_vol).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
    }
    if let Some(gw) = grads.weight.as_deref_mut() {
        let mut packed_grad = vec![0.0; kd_n * g.c_out * rows];
        for n in 0..g.batch {
            let cols = unroll_all(g, &input[n * in_len..(n + 1) * in_len]);
            let go = &grad_out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            for kd in 0..kd_n {
                for (od, id) in taps(g, kd) {
                    gemm(
                        dout(go, od, g.c_out, plane, out_vol),
                        MatRef::transposed(&cols[id * chunk..(id + 1) * chunk], plane, rows),
                        1.0,
                        &mut packed_grad[kd * g.c_out * rows..(kd + 1) * g.c_out * rows],
                        rows,
                    );
                }
            }
        }
        unpack_add_weights(g, &packed_grad, gw);
    }

    if let Some(gi) = grads.input.as_deref_mut() {
        if is_same_conv(g) {
            input_grad_transposed(g, weight, grad_out, gi);
            return;
        }
        let packed = pack_weights(g, weight);
        let mut dcols = vec![0.0; g.input[0] * chunk];
        for n in 0..g.batch {
            let go = &grad_out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
            dcols.fill(0.0);
            for kd in 0..kd_n {
                let w = &packed[kd * g.c_out * rows..(kd + 1) * g.c_out * rows];
                for (od, id) in taps(g, kd) {
                    gemm(
                        MatRef::transposed(w, rows, g.c_out),
                        dout(go, od, g.c_out, plane, out_vol),
                        1.0,
                        &mut dcols[id * chunk..(id + 1) * chunk],
                        plane,
                    );
                }
            }
            let gi_n = &mut gi[n * in_len..(n + 1) * in_len];
            for id in 0..g.input[0] {
                col2im(g, &dcols, id, gi_n);
            }
        }
    }
}

/// Stride 1 with symmetric "same" padding on every axis.
fn is_same_conv(g: &ConvGeom) -> bool {
    (0..3).all(|a| g.stride[a] == 1 && 2 * g.pad[a] + 1 == g.kernel[a])
}

/// For a stride-1 "same" convolution the input gradient is itself a "same"
/// convolution of the output gradient with the spatially flipped, channel
/// transposed kernel. Running it forward avoids a `c_in·k³`-row col2im.
fn input_grad_transposed(g: &ConvGeom, weight: &[f64], grad_out: &[f64], gi: &mut [f64]) {
    let [kd, kh, kw] = g.kernel;
    let taps = kd * kh * kw;
    let mut flipped = vec![0.0; weight.len()];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            let src = &weight[(o * g.c_in + c) * taps..(o * g.c_in + c + 1) * taps];
            let dst = &mut flipped[(c * g.c_out + o) * taps..(c * g.c_out + o + 1) * taps];
            for (t, v) in src.iter().enumerate() {
                dst[taps - 1 - t] = *v;
            }
        }
    }
    let tg = ConvGeom {
        c_in: g.c_out,
        c_out: g.c_in,
        input: g.output(),
        ..*g
    };
    let zero_bias = vec![0.0; g.c_in];
    let out = forward(&tg, grad_out, &flipped, &zero_bias);
    for (d, v) in gi.iter_mut().zip(&out) {
        *d += v;
    }
}
