use std::sync::OnceLock;

use sbev_autograd::{Graph, Tensor};
use sbev_core::geometry::{GroundPlane, LayoutSpec, StereoRig};
use sbev_core::io::{read_manifest, DatasetManifest};
use sbev_core::network::{ModelConfig, SbevModel, Variant};
use sbev_core::probe::*;
use sbev_core::scenesim::{make_dataset, SceneParams, Split};
use sbev_core::train::*;
use sbev_core::SbevError;

fn rig() -> StereoRig {
    StereoRig::new(100.0, 63.5, 24.0, 0.4, 128, 96).unwrap()
}

fn layout() -> LayoutSpec {
    LayoutSpec {
        x_min: -12.0,
        x_max: 12.0,
        y_min: 2.0,
        y_max: 26.0,
        nx: 48,
        ny: 48,
        classes: 5,
    }
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        channels: 4,
        disparities: 8,
        max_disparity: 16.0,
        volume_channels: 2,
        reduced_channels: 4,
        distill_k: 2,
        unet_widths: vec![4, 8],
        ..ModelConfig::default()
    }
}

struct Data {
    _dir: tempfile::TempDir,
    train: LoadedSet,
    test: LoadedSet,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (r, p, l, sp) = (rig(), GroundPlane::flat(1.4), layout(), SceneParams::default());
        make_dataset(10, 7, Split::Train, &sp, &r, &p, &l, dir.path()).unwrap();
        make_dataset(4, 7, Split::Test, &sp, &r, &p, &l, dir.path()).unwrap();
        let train = LoadedSet::load(&dir.path().join("train.json"), true).unwrap();
        let test = LoadedSet::load(&dir.path().join("test.json"), true).unwrap();
        Data { _dir: dir, train, test }
    })
}

fn model(variant: Variant, seed: u64) -> SbevModel {
    SbevModel::new(tiny(variant), rig(), GroundPlane::flat(1.4), layout(), seed).unwrap()
}

fn run(variant: Variant, seed: u64, epochs: usize) -> (TrainLog, SbevModel) {
    let d = data();
    let mut m = model(variant, sub_seed(seed, purpose::INIT));
    let config = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let log = train(&mut m, &d.train.samples, Some(&d.test.samples), &config, |_, _| Ok(())).unwrap();
    (log, m)
}

#[test]
fn loss_falls_over_five_epochs() {
    let (log, _) = run(Variant::Full, 0, 5);
    let losses = log.losses();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(log.epochs.iter().all(|e| e.test_miou.is_some()));
}

#[test]
fn same_seed_gives_identical_logs() {
    let (a, ma) = run(Variant::StereoOnly, 3, 2);
    let (b, mb) = run(Variant::StereoOnly, 3, 2);
    assert_eq!(a.to_csv(), b.to_csv());
    for ((_, x), (_, y)) in ma.params.iter().zip(mb.params.iter()) {
        assert_eq!(x.value, y.value);
    }
    let (c, _) = run(Variant::StereoOnly, 4, 2);
    assert_ne!(a.losses(), c.losses());
}

#[test]
fn every_variant_trains_one_epoch() {
    for v in Variant::ALL {
        let (log, m) = run(v, 1, 1);
        assert!(log.losses()[0].is_finite(), "{v}");
        let r = evaluate(&m, &data().test.samples, &EvalOptions::full()).unwrap();
        assert_eq!(r.distance_bins.len(), 8);
        assert_eq!(r.pixel_ap.as_ref().unwrap().len(), 5);
    }
}

#[test]
fn on_epoch_error_stops_training() {
    let d = data();
    let mut m = model(Variant::StereoOnly, 1);
    let config = TrainConfig {
        epochs: 3,
        eval_each_epoch: false,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let err = train(&mut m, &d.train.samples[..2], None, &config, |rec, _| {
        seen += 1;
        assert_eq!(rec.test_miou, None);
        Err(SbevError::Config(format!("stop at {}", rec.epoch)))
    })
    .unwrap_err();
    assert_eq!(seen, 1);
    assert!(err.to_string().contains("stop at 1"));
}

#[test]
fn diverging_training_is_reported() {
    let d = data();
    let mut m = model(Variant::StereoOnly, 1);
    let id = m.params.id("unet.head.bias").unwrap();
    m.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    let config = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let before = m.params.clone();
    let err = train(&mut m, &d.train.samples, None, &config, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, SbevError::Numeric(_)), "{err}");
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { lr: f64::NAN, ..TrainConfig::default() },
        TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "bogus": 1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
    assert_eq!(c, TrainConfig { epochs: 2, ..TrainConfig::default() });
}

#[test]
fn take_fraction_keeps_leading_samples() {
    let d = data();
    let half = d.train.take_fraction(0.5).unwrap();
    assert_eq!(half.samples.len(), 5);
    let ids: Vec<_> = half.samples.iter().map(|s| s.id.clone()).collect();
    let all: Vec<_> = d.train.samples[..5].iter().map(|s| s.id.clone()).collect();
    assert_eq!(ids, all);
    let m: DatasetManifest = read_manifest(&d._dir.path().join("train.json")).unwrap();
    assert_eq!(half.manifest.samples[..], m.samples[..5]);
}

#[test]
fn sub_seeds_differ_by_purpose() {
    let s = [purpose::INIT, purpose::ORDER, purpose::PROBE].map(|p| sub_seed(9, p));
    assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
    assert_eq!(sub_seed(9, purpose::INIT), s[0]);
    assert_ne!(sub_seed(10, purpose::INIT), s[0]);
}

#[test]
fn soft_argmax_of_a_peaked_cost_picks_its_plane() {
    let planes = [0.0, 1.5, 3.0, 4.5];
    let (h, w) = (2, 3);
    let peak = |k: usize| (k * 7) % 4;
    let cost = Tensor::from_fn(&[1, 1, 4, h, w], |idx| {
        let (d, p) = (idx / (h * w), idx % (h * w));
        if d == peak(p) {
            1e3
        } else {
            0.0
        }
    });
    let mut g = Graph::new();
    let c = g.constant(cost);
    let out = soft_argmax(&mut g, c, &planes).unwrap();
    assert_eq!(g.shape(out), &[1, 1, 1, h, w]);
    for (p, v) in g.value(out).data().iter().enumerate() {
        assert!((v - planes[peak(p)]).abs() < 1e-12);
    }
    let flat = Tensor::zeros(&[1, 1, 4, h, w]);
    let c = g.constant(flat);
    let out = soft_argmax(&mut g, c, &planes).unwrap();
    assert!(g.value(out).data().iter().all(|v| (v - 2.25).abs() < 1e-12));
    let c = g.constant(Tensor::zeros(&[1, 1, 3, h, w]));
    assert!(soft_argmax(&mut g, c, &planes).is_err());
}

#[test]
fn feature_disparity_samples_depth_on_the_stride() {
    let m = model(Variant::StereoOnly, 1);
    let mut depth = vec![0f32; 128 * 96];
    depth[(4 * 3) * 128 + 4 * 5] = 10.0;
    depth[(4 * 3) * 128 + 4 * 6] = 1.0;
    depth[(4 * 3) * 128 + 4 * 7 + 1] = 10.0;
    let (disp, valid) = feature_disparity(&depth, &m);
    assert_eq!(disp.len(), 24 * 32);
    assert!((disp[3 * 32 + 5] - 4.0).abs() < 1e-6);
    assert!(valid[3 * 32 + 5]);
    // 40 px exceeds the 16 px range of the tiny model
    assert!(!valid[3 * 32 + 6]);
    assert!(!valid[3 * 32 + 7]);
    assert_eq!(valid.iter().filter(|&&v| v).count(), 1);
}

#[test]
fn probe_leaves_the_trunk_untouched() {
    let d = data();
    let (_, m) = run(Variant::StereoOnly, 2, 1);
    let before = m.params.clone();
    let config = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let report = disparity_probe(&m, &d.train.samples, &d.test.samples, &config).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.value, b.value);
    }
    assert_eq!(report.train_losses.len(), 2);
    assert!((0.0..=1.0).contains(&report.three_pixel_error));
    assert!((0.0..=1.0).contains(&report.constant_baseline_error));
    let again = disparity_probe(&m, &d.train.samples, &d.test.samples, &config).unwrap();
    assert_eq!(report, again);
}

#[test]
fn probe_output_shape_and_fit() {
    let d = data();
    let m = model(Variant::StereoOnly, 5);
    let samples = probe_samples(&m, &d.train.samples[..3]).unwrap();
    assert_eq!(samples[0].volume.shape(), &[1, 2, 8, 24, 32]);
    let mut probe = DisparityProbe::for_model(&m, 1).unwrap();
    assert_eq!(probe.predict(&samples[0].volume).unwrap().len(), 24 * 32);
    let losses = probe.fit(&samples, &ProbeConfig { epochs: 8, ..ProbeConfig::default() }).unwrap();
    assert!(losses[7] < losses[0], "{losses:?}");
}

#[test]
fn probe_rejects_ipm_only_models() {
    let d = data();
    let m = model(Variant::IpmOnly, 5);
    assert!(disparity_probe(&m, &d.train.samples[..1], &d.test.samples[..1], &ProbeConfig::default()).is_err());
}

#[test]
fn cosine_schedule_decays_from_the_base_rate() {
    let s = LrSchedule::Cosine;
    assert_eq!(s.lr(1e-3, 1, 40), 1e-3);
    assert!((s.lr(1e-3, 21, 40) - 5e-4).abs() < 1e-15);
    let rates: Vec<f64> = (1..=40).map(|e| s.lr(1e-3, e, 40)).collect();
    assert!(rates.windows(2).all(|w| w[1] < w[0]));
    assert!(rates[39] > 0.0);
    assert_eq!(LrSchedule::Constant.lr(1e-3, 40, 40), 1e-3);
}
