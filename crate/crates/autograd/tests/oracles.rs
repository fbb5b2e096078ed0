//! Kernels checked against direct loop implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbev_autograd::checkpoint::{read_tensors, write_tensors};
use sbev_autograd::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b_ * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, d, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _, _] = w.shape().try_into().unwrap();
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = Tensor::zeros(&[n, co, od, oh, ow]);
    let at = |z: usize, kz: usize| (z * stride + kz) as isize - pad as isize;
    for b_ in 0..n {
        for oc in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[oc];
                        for c in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (iz, iy, ix) = (at(z, kz), at(y, ky), at(xx, kx));
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x.data()[(((b_ * ci + c) * d + iz) * h + iy) * wd + ix]
                                            * w.data()[(((oc * ci + c) * k + kz) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((b_ * co + oc) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Scalar bilinear read with zero padding, one pixel at a time.
fn bilinear_at(img: &[f64], h: usize, w: usize, col: f64, row: f64) -> f64 {
    let pixel = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let (x0, y0) = (col.floor() as i64, row.floor() as i64);
    let (ax, ay) = (col - x0 as f64, row - y0 as f64);
    let top = (1.0 - ax) * pixel(x0, y0) + ax * pixel(x0 + 1, y0);
    let bottom = (1.0 - ax) * pixel(x0, y0 + 1) + ax * pixel(x0 + 1, y0 + 1);
    (1.0 - ay) * top + ay * bottom
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vw, vb, 1, 1).unwrap();
    let want = naive_conv2d(&x, &w, &b, 1, 1);
    assert!(g.value(y).max_abs_diff(&want) <= 1e-12);

    for trial in 0..10 {
        let stride = 1 + trial % 2;
        let x = random(&mut rng, &[2, 3, 6, 7]);
        let w = random(&mut rng, &[4, 3, 3, 3]);
        let b = random(&mut rng, &[4]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vw, vb, stride, 1).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_conv2d(&x, &w, &b, stride, 1)) <= 1e-12);
    }
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..6 {
        let stride = 1 + trial % 2;
        let pad = trial % 2;
        let x = random(&mut rng, &[1, 2, 4, 5, 6]);
        let w = random(&mut rng, &[3, 2, 3, 3, 3]);
        let b = random(&mut rng, &[3]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(vx, vw, vb, stride, pad).unwrap();
        assert!(g.value(y).max_abs_diff(&naive_conv3d(&x, &w, &b, stride, pad)) <= 1e-12);
    }
}

#[test]
fn grid_sample_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, ho, wo) = (3, 6, 7, 5, 4);
    let input = random(&mut rng, &[1, c, h, w]);
    let grid = Tensor::from_fn(&[1, ho, wo, 2], |i| {
        if i % 2 == 0 { rng.gen_range(0.0..(w - 1) as f64) } else { rng.gen_range(0.0..(h - 1) as f64) }
    });
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.grid_sample(x, &grid).unwrap();
    let out = g.value(y).data();
    let mut worst: f64 = 0.0;
    for ch in 0..c {
        for p in 0..ho * wo {
            let want = bilinear_at(&input.data()[ch * h * w..(ch + 1) * h * w], h, w, grid.data()[2 * p], grid.data()[2 * p + 1]);
            worst = worst.max((out[ch * ho * wo + p] - want).abs());
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[1, 4, 3, 8, 8]);
    let w = random(&mut rng, &[5, 4, 3, 3, 3]);
    let b = random(&mut rng, &[5]);
    let run = || {
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3d(vx, vw, vb, 1, 1).unwrap();
        g.value(y).clone()
    };
    let a = run();
    let b2 = run();
    assert!(a.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in proptest::collection::vec(any::<f64>(), 1..40),
        name in "[a-z_.0-9]{1,16}",
    ) {
        let t = Tensor::new(&[values.len()], values.clone()).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[(&name, &t)]).unwrap();
        let back = read_tensors(buf.as_slice()).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, want);
    }

    #[test]
    fn identity_grid_is_identity(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = random(&mut rng, &[1, 2, h, w]);
        let grid = Tensor::from_fn(&[1, h, w, 2], |i| {
            let cell = i / 2;
            if i % 2 == 0 { (cell % w) as f64 } else { (cell / w) as f64 }
        });
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = g.grid_sample(x, &grid).unwrap();
        prop_assert_eq!(g.value(y), &input);
    }
}
