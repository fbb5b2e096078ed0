use sbev_autograd::gradcheck::{check, run_suite, ScalarFn};
use sbev_autograd::{Graph, Tensor};

#[test]
fn every_op_matches_central_differences() {
    let report = run_suite(20, 1e-5, 0x5eed).unwrap();
    for (name, err) in &report {
        assert!(*err <= 1e-5, "{name}: relative error {err:e}");
    }
    assert!(report.len() >= 19);
}

#[test]
fn composite_network_gradient() {
    // conv -> relu -> pool -> upsample -> concat with skip -> 1x1 conv -> ce
    let inputs = vec![
        Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0),
        Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 6.0),
        Tensor::from_fn(&[3], |i| i as f64 * 0.1),
        Tensor::from_fn(&[2, 5, 1, 1], |i| ((i * 5 % 9) as f64 - 4.0) / 4.0),
        Tensor::from_fn(&[2], |i| i as f64 * -0.2),
    ];
    let target: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mask: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let f: ScalarFn = Box::new(move |g: &mut Graph, v| {
        let c = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        let r = g.relu(c);
        let p = g.maxpool2d(r)?;
        let u = g.upsample2d(p)?;
        let cat = g.concat(&[u, v[0]], 1)?;
        let logits = g.conv2d(cat, v[3], v[4], 1, 0)?;
        g.masked_softmax_ce(logits, &target, &mask, true)
    });
    let err = check(&inputs, 1e-5, &f).unwrap();
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn masked_pixels_get_exactly_zero_gradient() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::from_fn(&[3, 2, 3], |i| (i as f64 * 0.7).cos()));
    let target = [0, 1, 2, 0, 1, 2];
    let mask = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let loss = g.masked_softmax_ce(logits, &target, &mask, true).unwrap();
    let grads = g.backward(loss).unwrap();
    let gl = grads.get(logits).unwrap().data();
    for p in 0..6 {
        for c in 0..3 {
            let v = gl[c * 6 + p];
            if mask[p] == 0.0 {
                assert_eq!(v, 0.0);
            }
        }
    }
}
