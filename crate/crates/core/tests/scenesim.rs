use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbev_core::geometry::{GroundPlane, LayoutSpec, StereoRig};
use sbev_core::scenesim::*;

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

fn empty_scene(ground: u8) -> SceneSpec {
    SceneSpec {
        ground_class: ground,
        ground_color: [0.4, 0.5, 0.3],
        boxes: Vec::new(),
        strips: Vec::new(),
        texture_seed: 9,
        texture_amplitude: 0.3,
    }
}

fn car(center: [f64; 2], size: [f64; 3], yaw: f64) -> SceneBox {
    SceneBox {
        class: CAR,
        center,
        size,
        yaw,
        color: [0.9, 0.05, 0.05],
    }
}

#[test]
fn sampling_is_deterministic() {
    let p = SceneParams::default();
    for seed in [0, 1, 77, u64::MAX] {
        assert_eq!(sample_scene(seed, &p, &layout()), sample_scene(seed, &p, &layout()));
    }
}

#[test]
fn every_class_appears_in_a_tenth_of_scenes() {
    let l = layout();
    let p = SceneParams::default();
    let mut seen = [0usize; 5];
    for seed in 0..1000 {
        let gt = gt_layout(&sample_scene(seed, &p, &l), &l);
        for c in 0..5u8 {
            if gt.contains(&c) {
                seen[c as usize] += 1;
            }
        }
    }
    for (c, &n) in seen.iter().enumerate() {
        assert!(n >= 100, "class {} appears in only {n} of 1000 scenes", CLASS_NAMES[c]);
    }
}

#[test]
fn every_scene_has_an_object_in_view() {
    let (l, r) = (layout(), rig());
    let p = SceneParams::default();
    for seed in 0..300 {
        let scene = sample_scene(seed, &p, &l);
        let gt = gt_layout(&scene, &l);
        let visible_object = (0..l.ny).any(|j| {
            (0..l.nx).any(|i| {
                let (x, y) = l.cell_center(i, j);
                OPAQUE.contains(&gt[j * l.nx + i]) && in_fov(x, y, r.fov_deg())
            })
        });
        assert!(visible_object, "seed {seed}");
        for b in &scene.boxes {
            assert!(b.size[2] > 0.0 && (b.class as usize) < l.classes);
            let inside = (0..480).any(|a| {
                (0..480).any(|c| b.contains(l.x_min + (a as f64 + 0.5) * 0.05, l.y_min + (c as f64 + 0.5) * 0.05))
            });
            assert!(inside, "seed {seed}: box {b:?} misses the layout");
        }
    }
}

#[test]
fn empty_params_give_ground_only() {
    let l = layout();
    let scene = sample_scene(5, &SceneParams::empty(), &l);
    assert!(scene.boxes.is_empty() && scene.strips.is_empty());
    assert!(gt_layout(&scene, &l).iter().all(|&c| c == scene.ground_class));
}

#[test]
fn axis_aligned_car_footprint() {
    let l = layout();
    let mut scene = empty_scene(TERRAIN);
    scene.boxes.push(car([0.0, 10.0], [2.0, 4.0, 1.5], 0.0));
    let gt = gt_layout(&scene, &l);
    for j in 0..l.ny {
        for i in 0..l.nx {
            let (x, y) = l.cell_center(i, j);
            let inside = x.abs() <= 1.0 && (y - 10.0).abs() <= 2.0;
            assert_eq!(gt[j * l.nx + i] == CAR, inside, "cell ({i},{j})");
        }
    }
}

#[test]
fn rotated_car_matches_supersampling() {
    let l = layout();
    let mut scene = empty_scene(TERRAIN);
    scene.boxes.push(car([1.3, 12.2], [2.0, 4.5, 1.5], std::f64::consts::FRAC_PI_4));
    let gt = gt_layout(&scene, &l);
    // fraction of 10×10 sub-samples per cell inside the footprint
    let (cw, cd) = (l.cell_width(), l.cell_depth());
    let mut frac = vec![0.0; l.cells()];
    let (sx, sy) = std::f64::consts::FRAC_PI_4.sin_cos();
    for j in 0..l.ny {
        for i in 0..l.nx {
            let mut hits = 0;
            for a in 0..10 {
                for b in 0..10 {
                    let x = l.x_min + (i as f64 + (a as f64 + 0.5) / 10.0) * cw - 1.3;
                    let y = l.y_min + (j as f64 + (b as f64 + 0.5) / 10.0) * cd - 12.2;
                    let (lx, ly) = (sy * x + sx * y, -sx * x + sy * y);
                    if lx.abs() <= 1.0 && ly.abs() <= 2.25 {
                        hits += 1;
                    }
                }
            }
            frac[j * l.nx + i] = hits as f64 / 100.0;
        }
    }
    let mut car_cells = 0;
    for j in 0..l.ny {
        for i in 0..l.nx {
            let dense = frac[j * l.nx + i] >= 0.5;
            let got = gt[j * l.nx + i] == CAR;
            car_cells += usize::from(got);
            if dense != got {
                let near_boundary = (j.saturating_sub(1)..=(j + 1).min(l.ny - 1)).any(|jj| {
                    (i.saturating_sub(1)..=(i + 1).min(l.nx - 1)).any(|ii| {
                        let f = frac[jj * l.nx + ii];
                        f > 0.0 && f < 1.0
                    })
                });
                assert!(near_boundary, "cell ({i},{j}) differs away from the boundary");
            }
        }
    }
    assert!(car_cells > 20);
}

#[test]
fn no_opaque_cells_gives_the_fov_wedge() {
    let l = layout();
    let fov = rig().fov_deg();
    let gt = vec![ROAD; l.cells()];
    let mask = visibility_mask(&gt, &l, &OPAQUE, fov);
    for j in 0..l.ny {
        for i in 0..l.nx {
            let (x, y) = l.cell_center(i, j);
            assert_eq!(mask[j * l.nx + i] == 1, in_fov(x, y, fov));
        }
    }
}

#[test]
fn single_opaque_cell_casts_a_shadow() {
    let l = layout();
    let mut gt = vec![ROAD; l.cells()];
    let (i0, j0) = l.cell_of(0.1, 10.1).unwrap();
    gt[j0 * l.nx + i0] = CAR;
    let mask = visibility_mask(&gt, &l, &OPAQUE, rig().fov_deg());
    assert_eq!(mask[j0 * l.nx + i0], 1);
    for j in j0 + 1..l.ny {
        assert_eq!(mask[j * l.nx + i0], 0, "row {j} behind the car is visible");
    }
    for j in 0..j0 {
        assert_eq!(mask[j * l.nx + i0], 1);
    }
}

/// Cell visible when at least half of 64 rays toward an 8×8 lattice of
/// points inside it reach the cell without entering another opaque cell.
fn dense_visibility(gt: &[u8], l: &LayoutSpec, fov: f64) -> Vec<u8> {
    let (cw, cd) = (l.cell_width(), l.cell_depth());
    let step = cw.min(cd) / 4.0;
    let mut mask = vec![0u8; l.cells()];
    for j in 0..l.ny {
        for i in 0..l.nx {
            let (xc, yc) = l.cell_center(i, j);
            if !in_fov(xc, yc, fov) {
                continue;
            }
            let mut clear = 0;
            for a in 0..8 {
                for b in 0..8 {
                    let tx = l.x_min + (i as f64 + (a as f64 + 0.5) / 8.0) * cw;
                    let ty = l.y_min + (j as f64 + (b as f64 + 0.5) / 8.0) * cd;
                    let len = tx.hypot(ty);
                    let n = (len / step).ceil() as usize;
                    let blocked = (0..n).any(|k| {
                        let t = k as f64 / n as f64;
                        match l.cell_of(tx * t, ty * t) {
                            Some((ci, cj)) => (ci, cj) != (i, j) && OPAQUE.contains(&gt[cj * l.nx + ci]),
                            None => false,
                        }
                    });
                    clear += usize::from(!blocked);
                }
            }
            mask[j * l.nx + i] = u8::from(clear >= 32);
        }
    }
    mask
}

#[test]
fn visibility_matches_dense_ray_oracle() {
    let l = layout();
    let fov = rig().fov_deg();
    let p = SceneParams::default();
    let (mut agree, mut total) = (0usize, 0usize);
    for seed in 0..50 {
        let gt = gt_layout(&sample_scene(1000 + seed, &p, &l), &l);
        let fast = visibility_mask(&gt, &l, &OPAQUE, fov);
        let dense = dense_visibility(&gt, &l, fov);
        agree += fast.iter().zip(&dense).filter(|(a, b)| a == b).count();
        total += fast.len();
    }
    let rate = agree as f64 / total as f64;
    assert!(rate >= 0.99, "agreement {rate:.4}");
}

#[test]
fn random_occupancy_visibility_matches_oracle() {
    let l = layout();
    let fov = rig().fov_deg();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let gt: Vec<u8> = (0..l.cells()).map(|_| if rng.gen_bool(0.03) { CAR } else { ROAD }).collect();
        let fast = visibility_mask(&gt, &l, &OPAQUE, fov);
        let dense = dense_visibility(&gt, &l, fov);
        let agree = fast.iter().zip(&dense).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / l.cells() as f64 >= 0.97);
    }
}

#[test]
fn fronto_parallel_face_disparity() {
    let r = rig();
    let plane = GroundPlane::flat(1.4);
    let z = 10.0;
    let mut scene = empty_scene(TERRAIN);
    scene.texture_amplitude = 0.0;
    scene.boxes.push(car([0.0, z + 2.0], [2.13, 4.0, 3.0], 0.0));
    for (x, zz) in [(-1.065, -1.4), (1.065, -1.4), (-1.065, 1.6), (1.065, 1.6)] {
        let (ul, vl) = r.project([x, z, zz]).unwrap();
        let (ur, vr) = r.project_target([x, z, zz]).unwrap();
        assert!((ul - ur - r.f * r.baseline / z).abs() <= 1e-12);
        assert!((vl - vr).abs() <= 1e-12);
    }
    let frame = render_stereo(&scene, &r, &plane);
    let v = 30;
    let is_red = |img: &sbev_core::io::RgbImage, u: usize| {
        let [cr, cg, _] = img.get(u, v);
        cr > 150 && cg < 40
    };
    let first_l = (0..r.width).find(|&u| is_red(&frame.left, u)).unwrap();
    let first_r = (0..r.width).find(|&u| is_red(&frame.right, u)).unwrap();
    let last_l = (0..r.width).rev().find(|&u| is_red(&frame.left, u)).unwrap();
    let last_r = (0..r.width).rev().find(|&u| is_red(&frame.right, u)).unwrap();
    let d = (r.f * r.baseline / z).round() as usize;
    assert_eq!(first_l - first_r, d);
    assert_eq!(last_l - last_r, d);
    assert_eq!(first_l as f64, (r.cx - r.f * 1.065 / z).ceil());
}

#[test]
fn empty_scene_depth_matches_ray_plane() {
    let r = rig();
    let plane = GroundPlane::flat(1.4);
    let scene = empty_scene(TERRAIN);
    let frame = render_stereo(&scene, &r, &plane);
    for v in 0..r.height {
        let expected = (v as f64 > r.cy).then(|| plane.c * r.f / (v as f64 - r.cy));
        for u in [0usize, 63, 64, 127] {
            let exact = depth_at(&scene, &r, &plane, u as f64, v as f64);
            let stored = f64::from(frame.depth.data[v * r.width + u]);
            match expected {
                Some(y) => {
                    assert!((exact.unwrap() - y).abs() <= 1e-6, "row {v}");
                    assert!((stored - y).abs() <= 1e-6 * y, "row {v}: stored {stored} vs {y}");
                }
                None => {
                    assert!(exact.is_none());
                    assert_eq!(stored, 0.0);
                }
            }
        }
    }
}

#[test]
fn rectified_rig_keeps_rows() {
    let r = rig();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let p = [rng.gen_range(-10.0..10.0), rng.gen_range(0.5..40.0), rng.gen_range(-2.0..3.0)];
        let (_, vl) = r.project(p).unwrap();
        let (_, vr) = r.project_target(p).unwrap();
        assert!((vl - vr).abs() <= 1e-9);
    }
}

#[test]
fn rendering_is_deterministic() {
    let (r, l) = (rig(), layout());
    let plane = GroundPlane::flat(1.4);
    let scene = sample_scene(3, &SceneParams::default(), &l);
    assert_eq!(render_stereo(&scene, &r, &plane), render_stereo(&scene, &r, &plane));
}

#[test]
fn visible_car_cells_are_seen_in_the_image() {
    let (r, l) = (rig(), layout());
    let plane = GroundPlane::flat(1.4);
    let (mut seen, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let scene = sample_scene(500 + seed, &SceneParams::default(), &l);
        let frame = render_stereo(&scene, &r, &plane);
        let gt = semantic_map(&scene, &l, r.fov_deg());
        for j in 0..l.ny {
            for i in 0..l.nx {
                let k = j * l.nx + i;
                if gt.classes[k] != CAR || gt.mask[k] == 0 {
                    continue;
                }
                let (x, y) = l.cell_center(i, j);
                let Some((u, v)) = r.project([x, y, -plane.c + 0.3]) else { continue };
                if u < 0.0 || v < 0.0 || u > (r.width - 1) as f64 || v > (r.height - 1) as f64 {
                    continue;
                }
                total += 1;
                let (u, v) = (u.round() as i64, v.round() as i64);
                let near = (-2..=2).any(|dv| {
                    (-2..=2).any(|du| {
                        let (uu, vv) = (u + du, v + dv);
                        uu >= 0
                            && vv >= 0
                            && (uu as usize) < r.width
                            && (vv as usize) < r.height
                            && frame.front_classes[vv as usize * r.width + uu as usize] == CAR
                    })
                });
                seen += usize::from(near);
            }
        }
    }
    assert!(total > 50);
    assert!(seen as f64 >= 0.95 * total as f64, "{seen} of {total} visible car cells seen");
}

#[test]
fn train_and_test_seeds_are_disjoint() {
    for run in [0u64, 1, 12345] {
        let train: HashSet<u64> = (0..5000).map(|k| scene_seed(run, Split::Train, k)).collect();
        assert_eq!(train.len(), 5000);
        assert!((0..5000).all(|k| !train.contains(&scene_seed(run, Split::Test, k))));
    }
}
