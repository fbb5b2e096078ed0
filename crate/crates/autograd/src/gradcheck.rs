//! Central finite-difference gradient checking.
//!
//! [`check`] compares the analytic gradient of a scalar function of several
//! tensors against `(f(x + h) − f(x − h)) / 2h`, element by element.
//! [`op_suite`] lists one randomized case generator per differentiable
//! operation of the engine.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds a scalar from graph inputs bound in the same order as the tensors.
pub type ScalarFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` between analytic and numeric
/// gradients, with an absolute floor for all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn evaluate(inputs: &[Tensor], f: &ScalarFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Worst relative error over all inputs for step `h`.
pub fn check(inputs: &[Tensor], h: f64, f: &ScalarFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = evaluate(&probe, f)?;
            probe[i].data_mut()[j] = x - h;
            let down = evaluate(&probe, f)?;
            probe[i].data_mut()[j] = x;
            numeric[j] = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(out ⊙ r)` for a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output element.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// One randomized instance: input tensors and the scalar function under test.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: ScalarFn,
}

/// Named case generator.
pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut StdRng) -> Case,
}

fn projected(out_shape: Vec<usize>, rng: &mut StdRng, op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> ScalarFn {
    let r = uniform(rng, &out_shape);
    Box::new(move |g, v| {
        let out = op(g, v)?;
        project(g, out, &r)
    })
}

fn conv2d_case(rng: &mut StdRng) -> Case {
    let stride = rng.gen_range(1..=2);
    let k = [1, 3][rng.gen_range(0..2)];
    let pad = rng.gen_range(0..=k / 2);
    let (ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(k..=5), rng.gen_range(k..=5));
    let n = rng.gen_range(1..=2);
    let inputs = vec![uniform(rng, &[n, ci, h, w]), uniform(rng, &[co, ci, k, k]), uniform(rng, &[co])];
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let f = projected(vec![n, co, oh, ow], rng, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad));
    Case { inputs, f }
}

fn conv3d_case(rng: &mut StdRng) -> Case {
    let stride = rng.gen_range(1..=2);
    let k = [1, 3][rng.gen_range(0..2)];
    let pad = rng.gen_range(0..=k / 2);
    let (ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let d = rng.gen_range(k..=4);
    let (h, w) = (rng.gen_range(k..=4), rng.gen_range(k..=4));
    let inputs = vec![uniform(rng, &[1, ci, d, h, w]), uniform(rng, &[co, ci, k, k, k]), uniform(rng, &[co])];
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let f = projected(vec![1, co, o(d), o(h), o(w)], rng, move |g, v| g.conv3d(v[0], v[1], v[2], stride, pad));
    Case { inputs, f }
}

fn grid_sample_case(rng: &mut StdRng) -> Case {
    let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5));
    let (ho, wo) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    // includes partially and fully out-of-range taps
    let grid = Tensor::from_fn(&[1, ho, wo, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h } as f64;
        rng.gen_range(-1.5..extent + 0.5)
    });
    let inputs = vec![uniform(rng, &[1, c, h, w])];
    let f = projected(vec![1, c, ho, wo], rng, move |g, v| g.grid_sample(v[0], &grid));
    Case { inputs, f }
}

fn cost_volume_case(rng: &mut StdRng) -> Case {
    let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=6));
    let d = rng.gen_range(1..=4);
    let step = rng.gen_range(0.2..1.3);
    let shifts: Vec<f64> = (0..d).map(|k| k as f64 * step).collect();
    let inputs = vec![uniform(rng, &[1, c, h, w]), uniform(rng, &[1, c, h, w])];
    let f = projected(vec![1, 2 * c, d, h, w], rng, move |g, v| g.cost_volume(v[0], v[1], &shifts));
    Case { inputs, f }
}

fn masked_ce_case(rng: &mut StdRng) -> Case {
    let (c, h, w) = (rng.gen_range(2..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let target: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..c)).collect();
    let mask: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
    let normalize = rng.gen_bool(0.5);
    let inputs = vec![Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-2.0..2.0))];
    Case {
        inputs,
        f: Box::new(move |g, v| g.masked_softmax_ce(v[0], &target, &mask, normalize)),
    }
}

fn l1_case(rng: &mut StdRng) -> Case {
    let (ca, cb) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let k = rng.gen_range(1..=ca.min(cb));
    let inputs = vec![uniform(rng, &[ca, h, w]), uniform(rng, &[cb, h, w])];
    Case {
        inputs,
        f: Box::new(move |g, v| g.l1_first_k(v[0], v[1], k)),
    }
}

fn masked_l1_case(rng: &mut StdRng) -> Case {
    let n = rng.gen_range(1..=12);
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
    let inputs = vec![uniform(rng, &[n])];
    Case {
        inputs,
        f: Box::new(move |g, v| g.masked_l1(v[0], &target, &mask)),
    }
}

fn unary_case(rng: &mut StdRng, op: fn(&mut Graph, Var) -> Result<Var>, shape: Vec<usize>, out: Vec<usize>) -> Case {
    let inputs = vec![uniform(rng, &shape)];
    Case {
        inputs,
        f: projected(out, rng, move |g, v| op(g, v[0])),
    }
}

fn small_shape(rng: &mut StdRng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn relu_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    unary_case(rng, |g, x| Ok(g.relu(x)), s.clone(), s)
}

fn scale_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 2);
    unary_case(rng, |g, x| Ok(g.scale(x, -1.7)), s.clone(), s)
}

fn sum_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    unary_case(rng, |g, x| Ok(g.sum(x)), s, vec![1])
}

fn sum_axis_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    let mut out = s.clone();
    out[1] = 1;
    unary_case(rng, |g, x| g.sum_axis(x, 1), s, out)
}

fn add_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    let inputs = vec![uniform(rng, &s), uniform(rng, &s)];
    Case {
        f: projected(s, rng, |g, v| g.add(v[0], v[1])),
        inputs,
    }
}

fn mul_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    let inputs = vec![uniform(rng, &s), uniform(rng, &s)];
    Case {
        f: projected(s, rng, |g, v| g.mul(v[0], v[1])),
        inputs,
    }
}

fn concat_case(rng: &mut StdRng) -> Case {
    let axis = rng.gen_range(0..3);
    let a = small_shape(rng, 3);
    let mut b = a.clone();
    b[axis] = rng.gen_range(1..=3);
    let mut out = a.clone();
    out[axis] += b[axis];
    let inputs = vec![uniform(rng, &a), uniform(rng, &b)];
    Case {
        f: projected(out, rng, move |g, v| g.concat(&[v[0], v[1]], axis)),
        inputs,
    }
}

fn maxpool_case(rng: &mut StdRng) -> Case {
    let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5));
    unary_case(rng, |g, x| g.maxpool2d(x), vec![1, c, h, w], vec![1, c, h / 2, w / 2])
}

fn upsample_case(rng: &mut StdRng) -> Case {
    let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    unary_case(rng, |g, x| g.upsample2d(x), vec![1, c, h, w], vec![1, c, 2 * h, 2 * w])
}

fn reshape_case(rng: &mut StdRng) -> Case {
    let (a, b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    unary_case(rng, move |g, x| {
        let n = g.value(x).len();
        g.reshape(x, &[n])
    }, vec![a, b, 2], vec![a * b * 2])
}

fn permute_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 4);
    let out = vec![s[2], s[0], s[3], s[1]];
    unary_case(rng, |g, x| g.permute(x, &[2, 0, 3, 1]), s, out)
}

fn softmax_case(rng: &mut StdRng) -> Case {
    let s = small_shape(rng, 3);
    unary_case(rng, |g, x| g.softmax(x, 1), s.clone(), s)
}

/// Every differentiable operation of the engine.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase { name: "conv2d", make: conv2d_case },
        OpCase { name: "conv3d", make: conv3d_case },
        OpCase { name: "grid_sample", make: grid_sample_case },
        OpCase { name: "cost_volume", make: cost_volume_case },
        OpCase { name: "masked_softmax_ce", make: masked_ce_case },
        OpCase { name: "l1_first_k", make: l1_case },
        OpCase { name: "masked_l1", make: masked_l1_case },
        OpCase { name: "relu", make: relu_case },
        OpCase { name: "add", make: add_case },
        OpCase { name: "mul", make: mul_case },
        OpCase { name: "scale", make: scale_case },
        OpCase { name: "sum", make: sum_case },
        OpCase { name: "sum_axis", make: sum_axis_case },
        OpCase { name: "concat", make: concat_case },
        OpCase { name: "maxpool2d", make: maxpool_case },
        OpCase { name: "upsample2d", make: upsample_case },
        OpCase { name: "reshape", make: reshape_case },
        OpCase { name: "permute", make: permute_case },
        OpCase { name: "softmax", make: softmax_case },
    ]
}

/// Worst relative error of each operation over `instances` random cases.
pub fn run_suite(instances: usize, h: f64, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (i, case) in op_suite().into_iter().enumerate() {
        let mut rng = StdRng::seed_from_u64(seed.wrapping_add(i as u64 * 7919));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let c = (case.make)(&mut rng);
            worst = worst.max(check(&c.inputs, h, &c.f)?);
        }
        out.push((case.name, worst));
    }
    Ok(out)
}
