//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! value together with whatever the backward rule needs. Nodes refer to their
//! parents by index, and parents always precede children, so walking the node
//! list backwards is a valid topological order for gradient propagation.
//!
//! A graph serves exactly one backward pass. Parameters enter the graph as
//! copies tagged with their [`ParamId`]; after [`Graph::backward`] the returned
//! [`Gradients`] can be folded into a [`crate::ParamStore`].

use crate::error::{arg_err, shape_err, AutogradError, Result};
use crate::ops::conv::{self, ConvGeom, ConvGrads};
use crate::ops::loss::{self, sign};
use crate::ops::sample;
use crate::tensor::{strides, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside a [`crate::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    GridSample {
        input: Var,
        grid: Tensor,
    },
    CostVolume {
        reference: Var,
        target: Var,
        shifts: Vec<f64>,
    },
    MaskedCe {
        logits: Var,
        target: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
        norm: f64,
        classes: usize,
    },
    L1FirstK {
        a: Var,
        b: Var,
        k: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        norm: f64,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2d(Var),
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `var`, if it requires
    /// grad and was reached. Intermediate nodes do not retain gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter bound into the graph. A parameter bound
    /// more than once appears once per binding.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Channels and pixel count of a `C×H×W` or `1×C×H×W` map.
fn channel_map_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] | [1, c, h, w] => Ok((*c, *h, *w)),
        _ => shape_err(op, format!("expected C×H×W or 1×C×H×W, got {shape:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a copy of a parameter value. Frozen parameters are bound with
    /// `trainable = false` and behave like constants.
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> Var {
        self.push(value.clone(), Op::Param(id), trainable)
    }

    fn conv(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeom, out_shape: Vec<usize>) -> Var {
        let data = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(&out_shape, data).expect("conv output shape");
        self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    fn check_conv(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Var,
        spatial: usize,
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.len() != spatial + 2 {
            return shape_err(op, format!("input rank {} (shape {xs:?}), expected {}", xs.len(), spatial + 2));
        }
        if ws.len() != spatial + 2 {
            return shape_err(op, format!("weight rank {} (shape {ws:?}), expected {}", ws.len(), spatial + 2));
        }
        if ws[1] != xs[1] {
            return shape_err(
                op,
                format!("input channels: weight expects {}, input has {}", ws[1], xs[1]),
            );
        }
        let k = ws[2];
        if ws[2..].iter().any(|&e| e != k) {
            return shape_err(op, format!("kernel must be cubic/square, got {:?}", &ws[2..]));
        }
        if k % 2 == 0 {
            return arg_err(op, format!("kernel size {k} must be odd"));
        }
        if bs != [ws[0]] {
            return shape_err(op, format!("bias length: expected [{}], got {bs:?}", ws[0]));
        }
        if stride == 0 {
            return arg_err(op, "stride must be at least 1");
        }
        for (a, &extent) in xs[2..].iter().enumerate() {
            if extent + 2 * pad < k {
                return shape_err(
                    op,
                    format!("spatial dim {a}: extent {extent} with pad {pad} is smaller than kernel {k}"),
                );
            }
        }
        if input == weight || input == bias || weight == bias {
            return arg_err(op, "input, weight and bias must be distinct nodes");
        }
        Ok(())
    }

    /// `N×C_in×H×W` ⊛ `C_out×C_in×k×k` + bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv("conv2d", input, weight, bias, 2, stride, pad)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            input: [1, xs[2], xs[3]],
            kernel: [1, ws[2], ws[3]],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        };
        let [_, oh, ow] = geom.output();
        Ok(self.conv(input, weight, bias, geom, vec![xs[0], ws[0], oh, ow]))
    }

    /// `N×C_in×D×H×W` ⊛ `C_out×C_in×k×k×k` + bias.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_conv("conv3d", input, weight, bias, 3, stride, pad)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            stride: [stride; 3],
            pad: [pad; 3],
        };
        let [od, oh, ow] = geom.output();
        Ok(self.conv(input, weight, bias, geom, vec![xs[0], ws[0], od, oh, ow]))
    }

    /// Bilinear sampling of `input` (`N×C×H×W`) at the continuous pixel
    /// coordinates in `grid` (`N×H_out×W_out×2`, last axis = (col, row)).
    /// Taps outside the source read as zero. Differentiable in `input` only.
    pub fn grid_sample(&mut self, input: Var, grid: &Tensor) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let gs = grid.shape();
        if xs.len() != 4 {
            return shape_err("grid_sample", format!("input must be N×C×H×W, got {xs:?}"));
        }
        if gs.len() != 4 || gs[3] != 2 {
            return shape_err("grid_sample", format!("grid must be N×H×W×2, got {gs:?}"));
        }
        if gs[0] != xs[0] {
            return shape_err("grid_sample", format!("batch: input {} vs grid {}", xs[0], gs[0]));
        }
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let out = sample::grid_sample_forward(self.value(input).data(), grid.data(), dims, [gs[1], gs[2]]);
        let value = Tensor::new(&[xs[0], xs[1], gs[1], gs[2]], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            Op::GridSample {
                input,
                grid: grid.clone(),
            },
            rg,
        ))
    }

    /// Disparity concatenation volume: `N×2C×D×H×W` where plane `k` stacks
    /// `reference` over `target` shifted right by `shifts[k]` pixels (linear
    /// interpolation, vacated columns zero).
    pub fn cost_volume(&mut self, reference: Var, target: Var, shifts: &[f64]) -> Result<Var> {
        let rs = self.shape(reference).to_vec();
        if rs.len() != 4 || self.shape(target) != rs.as_slice() {
            return shape_err(
                "cost_volume",
                format!("reference {rs:?} and target {:?} must be equal N×C×H×W", self.shape(target)),
            );
        }
        if shifts.is_empty() || shifts.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return arg_err("cost_volume", "shifts must be non-empty, finite and non-negative");
        }
        let dims = [rs[0], rs[1], rs[2], rs[3]];
        let out = sample::cost_volume_forward(self.value(reference).data(), self.value(target).data(), shifts, dims);
        let value = Tensor::new(&[rs[0], 2 * rs[1], shifts.len(), rs[2], rs[3]], out)?;
        let rg = self.rg(reference) || self.rg(target);
        Ok(self.push(
            value,
            Op::CostVolume {
                reference,
                target,
                shifts: shifts.to_vec(),
            },
            rg,
        ))
    }

    /// Visibility-masked softmax cross entropy over a `C×H×W` logit map.
    /// With `normalize` the sum is divided by `max(1, Σ mask)`.
    pub fn masked_softmax_ce(&mut self, logits: Var, target: &[usize], mask: &[f64], normalize: bool) -> Result<Var> {
        let (classes, h, w) = channel_map_dims("masked_softmax_ce", self.shape(logits))?;
        let plane = h * w;
        if target.len() != plane || mask.len() != plane {
            return shape_err(
                "masked_softmax_ce",
                format!("target/mask length {}/{} vs {h}×{w} logits", target.len(), mask.len()),
            );
        }
        if let Some(bad) = target.iter().find(|&&t| t >= classes) {
            return arg_err("masked_softmax_ce", format!("target class {bad} out of range 0..{classes}"));
        }
        let (value, norm, probs) =
            loss::masked_ce_forward(self.value(logits).data(), target, mask, classes, normalize);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedCe {
                logits,
                target: target.to_vec(),
                mask: mask.to_vec(),
                probs,
                norm,
                classes,
            },
            rg,
        ))
    }

    /// Mean absolute difference over the first `k` channels of two
    /// `C×H×W` maps with equal spatial size.
    pub fn l1_first_k(&mut self, a: Var, b: Var, k: usize) -> Result<Var> {
        let (ca, ha, wa) = channel_map_dims("l1_first_k", self.shape(a))?;
        let (cb, hb, wb) = channel_map_dims("l1_first_k", self.shape(b))?;
        if (ha, wa) != (hb, wb) {
            return shape_err("l1_first_k", format!("spatial {ha}×{wa} vs {hb}×{wb}"));
        }
        if k == 0 {
            return arg_err("l1_first_k", "K must be positive");
        }
        if k > ca.min(cb) {
            return arg_err("l1_first_k", format!("K = {k} exceeds channels ({ca}, {cb})"));
        }
        let n = k * ha * wa;
        let da = &self.value(a).data()[..n];
        let db = &self.value(b).data()[..n];
        let value = da.iter().zip(db).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(value), Op::L1FirstK { a, b, k }, rg))
    }

    /// `Σ mask·|pred − target| / max(1, Σ mask)`.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return shape_err("masked_l1", format!("pred has {n} values, target {}, mask {}", target.len(), mask.len()));
        }
        let norm = mask.iter().sum::<f64>().max(1.0);
        let value = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((p, t), m)| m * (p - t).abs())
            .sum::<f64>()
            / norm;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                norm,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a.max(0.0)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| a * factor).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return arg_err("sum_axis", format!("axis {axis} for rank {}", shape.len()));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return arg_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return arg_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} incompatible with {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over `N×C×H×W`; odd trailing rows and
    /// columns are dropped.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return shape_err("maxpool2d", format!("need N×C×H×W with H,W ≥ 2, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], oh, ow], out)?,
            Op::MaxPool2d { input: x, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `N×C×H×W`.
    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("upsample2d", format!("need N×C×H×W, got {s:?}"));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?, Op::Upsample2d(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return arg_err("permute", format!("{perm:?} is not a permutation of rank {}", s.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let offsets = permute_offsets(&s, perm);
        let src = self.value(x).data();
        let out = offsets.iter().map(|&o| src[o]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                input: x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return arg_err("softmax", format!("axis {axis} for rank {}", s.len()));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[at(a)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax { input: x, axis }, rg))
    }

    /// Reverse pass from a scalar `loss`. The graph cannot be differentiated
    /// again afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutogradError::GraphConsumed);
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(AutogradError::NonScalarRoot(root.value.shape().to_vec()));
        }
        let root_rg = root.requires_grad;
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut params = Vec::new();
        let mut done: Vec<Option<Tensor>> = vec![None; n];
        if root_rg {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, Var(i))),
                op => {
                    self.propagate(op, &node.value, &g, &mut grads);
                    continue;
                }
            }
            done[i] = Some(Tensor::new(node.value.shape(), g).expect("grad shape"));
        }
        params.reverse();
        Ok(Gradients { grads: done, params })
    }

    /// Adds into the gradient buffer of `v` if it participates in
    /// differentiation.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                self.acc(grads, *bias, |gb| {
                    conv::backward(geom, x, w, g, ConvGrads { input: None, weight: None, bias: Some(gb) })
                });
                self.acc(grads, *weight, |gw| {
                    conv::backward(geom, x, w, g, ConvGrads { input: None, weight: Some(gw), bias: None })
                });
                self.acc(grads, *input, |gi| {
                    conv::backward(geom, x, w, g, ConvGrads { input: Some(gi), weight: None, bias: None })
                });
            }
            Op::GridSample { input, grid } => {
                let s = self.shape(*input);
                let dims = [s[0], s[1], s[2], s[3]];
                let gs = grid.shape();
                self.acc(grads, *input, |gi| {
                    sample::grid_sample_backward(grid.data(), g, gi, dims, [gs[1], gs[2]])
                });
            }
            Op::CostVolume {
                reference,
                target,
                shifts,
            } => {
                let s = self.shape(*reference);
                let dims = [s[0], s[1], s[2], s[3]];
                self.acc(grads, *reference, |gr| sample::cost_volume_backward(g, shifts, dims, Some(gr), None));
                self.acc(grads, *target, |gt| sample::cost_volume_backward(g, shifts, dims, None, Some(gt)));
            }
            Op::MaskedCe {
                logits,
                target,
                mask,
                probs,
                norm,
                classes,
            } => {
                self.acc(grads, *logits, |gl| {
                    loss::masked_ce_backward(probs, target, mask, *classes, *norm, g[0], gl)
                });
            }
            Op::L1FirstK { a, b, k } => {
                let plane: usize = self.shape(*a).iter().rev().take(2).product();
                let n = k * plane;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / n as f64;
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        ga[i] += scale * sign(va[i] - vb[i]);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        gb[i] -= scale * sign(va[i] - vb[i]);
                    }
                });
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let vp = self.value(*pred).data();
                self.acc(grads, *pred, |gp| {
                    for i in 0..gp.len() {
                        gp[i] += g[0] * mask[i] * sign(vp[i] - target[i]) / norm;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if vx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                self.acc(grads, *x, |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += f * s;
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                self.acc(grads, *input, |gx| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let total = out.shape()[*axis];
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.acc(grads, v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::MaxPool2d { input, argmax } => {
                self.acc(grads, *input, |gx| {
                    for (o, &at) in argmax.iter().enumerate() {
                        gx[at] += g[o];
                    }
                });
            }
            Op::Upsample2d(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                self.acc(grads, *x, |gx| {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Permute { input, perm } => {
                let offsets = permute_offsets(self.shape(*input), perm);
                self.acc(grads, *input, |gx| {
                    for (o, &src) in offsets.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                self.acc(grads, *input, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Input flat offset for every output element (in output order) of a
/// permutation of `shape` by `perm`.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            off += step[a];
            if idx[a] < out_shape[a] {
                break;
            }
            off -= step[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    offsets
}
