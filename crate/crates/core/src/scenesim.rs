//! Procedural street scenes: sampling, stereo rendering, top-down ground
//! truth and occlusion-aware visibility.

use std::f64::consts::{FRAC_PI_2, PI};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{GroundPlane, LayoutSpec, StereoRig};
use crate::io::{write_manifest, write_sample, DatasetManifest, DepthMap, RgbImage, Sample, MANIFEST_VERSION};

pub const ROAD: u8 = 0;
pub const TERRAIN: u8 = 1;
pub const CAR: u8 = 2;
pub const SIDEWALK: u8 = 3;
pub const BUILDING: u8 = 4;

pub const CLASS_NAMES: [&str; 5] = ["road", "terrain", "car", "sidewalk", "building"];

/// Visualization palette, one RGB triple per class.
pub const PALETTE: [[u8; 3]; 5] = [[128, 64, 128], [107, 142, 35], [0, 0, 142], [244, 35, 232], [70, 70, 70]];

/// Classes that hide what lies behind them.
pub const OPAQUE: [u8; 2] = [CAR, BUILDING];

/// Front-view label for pixels that see no surface.
pub const SKY_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub class: u8,
    /// Footprint center (x, y) in meters.
    pub center: [f64; 2],
    /// Width (across), length (along the yaw direction), height, meters.
    pub size: [f64; 3],
    /// Rotation of the length axis away from +y, counter-clockwise, radians.
    pub yaw: f64,
    pub color: [f64; 3],
}

impl SceneBox {
    /// Footprint-local coordinates of a ground point.
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= self.size[0] / 2.0 && ly.abs() <= self.size[1] / 2.0
    }

    /// Footprint corners in world coordinates.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hl) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)].map(|(lx, ly)| (self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly))
    }

    fn bounds(&self) -> [f64; 4] {
        let cs = self.corners();
        let xs = cs.map(|p| p.0);
        let ys = cs.map(|p| p.1);
        [
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ]
    }
}

/// Axis-aligned ground strip painted with a class (road, sidewalk).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strip {
    pub class: u8,
    /// x_min, x_max, y_min, y_max in meters.
    pub bounds: [f64; 4],
    pub color: [f64; 3],
}

impl Strip {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, x1, y0, y1] = self.bounds;
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub ground_class: u8,
    pub ground_color: [f64; 3],
    pub boxes: Vec<SceneBox>,
    /// Later strips paint over earlier ones.
    pub strips: Vec<Strip>,
    pub texture_seed: u64,
    /// Peak relative brightness change of the surface texture.
    pub texture_amplitude: f64,
}

/// Knobs of the scene sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Inclusive car count range.
    pub cars: [usize; 2],
    /// Inclusive building count range.
    pub buildings: [usize; 2],
    pub streets: bool,
    pub cross_street_prob: f64,
    pub texture_amplitude: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            cars: [2, 8],
            buildings: [0, 4],
            streets: true,
            cross_street_prob: 0.3,
            texture_amplitude: 0.3,
        }
    }
}

impl SceneParams {
    /// Bare textured ground.
    pub fn empty() -> Self {
        Self {
            cars: [0, 0],
            buildings: [0, 0],
            streets: false,
            cross_street_prob: 0.0,
            texture_amplitude: 0.3,
        }
    }
}

const CAR_COLORS: [[f64; 3]; 7] = [
    [0.75, 0.12, 0.10],
    [0.12, 0.22, 0.70],
    [0.92, 0.92, 0.90],
    [0.08, 0.08, 0.10],
    [0.90, 0.75, 0.15],
    [0.10, 0.50, 0.45],
    [0.60, 0.62, 0.66],
];

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let k = 1.0 + rng.gen_range(-amount..amount);
    base.map(|c| (c * k).clamp(0.0, 1.0))
}

fn overlaps(a: [f64; 4], b: [f64; 4], margin: f64) -> bool {
    a[0] < b[1] + margin && b[0] < a[1] + margin && a[2] < b[3] + margin && b[2] < a[3] + margin
}

fn intersects_layout(b: [f64; 4], layout: &LayoutSpec) -> bool {
    b[0] < layout.x_max && b[1] > layout.x_min && b[2] < layout.y_max && b[3] > layout.y_min
}

/// Draws a street scene deterministically from `seed`.
pub fn sample_scene(seed: u64, params: &SceneParams, layout: &LayoutSpec) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_color = jitter(&mut rng, [0.30, 0.45, 0.20], 0.15);
    let texture_seed = rng.gen();
    let mut scene = SceneSpec {
        ground_class: TERRAIN,
        ground_color,
        boxes: Vec::new(),
        strips: Vec::new(),
        texture_seed,
        texture_amplitude: params.texture_amplitude,
    };

    // main street along y: road flanked by sidewalks
    let road_center = rng.gen_range(-2.5..2.5);
    let road_width = rng.gen_range(6.0..9.0);
    let walk = [rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0)];
    let (road_l, road_r) = (road_center - road_width / 2.0, road_center + road_width / 2.0);
    let (y_near, y_far) = (-5.0, layout.y_max + 60.0);
    let road_color = jitter(&mut rng, [0.36, 0.36, 0.38], 0.1);
    let walk_color = jitter(&mut rng, [0.68, 0.64, 0.58], 0.1);
    let mut cross = None;
    if params.streets {
        scene.strips.push(Strip {
            class: SIDEWALK,
            bounds: [road_l - walk[0], road_l, y_near, y_far],
            color: walk_color,
        });
        scene.strips.push(Strip {
            class: SIDEWALK,
            bounds: [road_r, road_r + walk[1], y_near, y_far],
            color: walk_color,
        });
        scene.strips.push(Strip {
            class: ROAD,
            bounds: [road_l, road_r, y_near, y_far],
            color: road_color,
        });
        if rng.gen_bool(params.cross_street_prob) {
            let y0 = rng.gen_range(layout.y_min + 6.0..layout.y_max - 8.0);
            let w = rng.gen_range(6.0..8.0);
            scene.strips.push(Strip {
                class: ROAD,
                bounds: [layout.x_min - 40.0, layout.x_max + 40.0, y0, y0 + w],
                color: road_color,
            });
            cross = Some((y0, y0 + w));
        }
    }

    let mut taken: Vec<[f64; 4]> = Vec::new();
    let n_cars = rng.gen_range(params.cars[0]..=params.cars[1]);
    let lanes = [road_center - road_width / 4.0, road_center + road_width / 4.0];
    for k in 0..n_cars {
        for _attempt in 0..50 {
            let size = [rng.gen_range(1.7..2.0), rng.gen_range(3.8..4.8), rng.gen_range(1.4..1.7)];
            let on_cross = cross.is_some() && k > 0 && rng.gen_bool(0.3);
            let (center, yaw) = if k == 0 {
                // keep one car well inside the field of view
                let lane = if lanes[0].abs() < lanes[1].abs() { lanes[0] } else { lanes[1] };
                let y = rng.gen_range(8.0..18.0);
                let x = if params.streets { lane + rng.gen_range(-0.4..0.4) } else { rng.gen_range(-1.5..1.5) };
                ([x, y], rng.gen_range(-0.1..0.1))
            } else if on_cross {
                let (y0, y1) = cross.expect("cross street exists");
                let x = rng.gen_range(layout.x_min..layout.x_max);
                let y = (y0 + y1) / 2.0 + rng.gen_range(-1.2..1.2);
                ([x, y], FRAC_PI_2 + rng.gen_range(-0.1..0.1))
            } else {
                let x = if params.streets {
                    lanes[rng.gen_range(0..2)] + rng.gen_range(-0.5..0.5)
                } else {
                    rng.gen_range(layout.x_min..layout.x_max)
                };
                let y = rng.gen_range(layout.y_min + 4.0..layout.y_max + 1.0);
                let flip = if rng.gen_bool(0.5) { PI } else { 0.0 };
                ([x, y], flip + rng.gen_range(-0.15..0.15))
            };
            let base = CAR_COLORS[rng.gen_range(0..CAR_COLORS.len())];
            let color = jitter(&mut rng, base, 0.1);
            let b = SceneBox {
                class: CAR,
                center,
                size,
                yaw,
                color,
            };
            let bb = b.bounds();
            let too_close = bb[2] < layout.y_min + 1.5;
            if too_close || !intersects_layout(bb, layout) || taken.iter().any(|t| overlaps(*t, bb, 0.6)) {
                continue;
            }
            taken.push(bb);
            scene.boxes.push(b);
            break;
        }
    }

    let n_buildings = rng.gen_range(params.buildings[0]..=params.buildings[1]);
    for _ in 0..n_buildings {
        for _attempt in 0..50 {
            let w = rng.gen_range(4.0..9.0);
            let l = rng.gen_range(5.0..12.0);
            let h = rng.gen_range(3.0..8.0);
            let gap = rng.gen_range(0.5..3.0);
            let left = rng.gen_bool(0.5);
            let x = if left {
                road_l - walk[0] - gap - w / 2.0
            } else {
                road_r + walk[1] + gap + w / 2.0
            };
            let y = rng.gen_range(layout.y_min..layout.y_max);
            let color = jitter(&mut rng, [0.55, 0.42, 0.35], 0.25);
            let b = SceneBox {
                class: BUILDING,
                center: [x, y],
                size: [w, l, h],
                yaw: rng.gen_range(-0.05..0.05),
                color,
            };
            let bb = b.bounds();
            let crosses_street = cross.is_some_and(|(y0, y1)| bb[2] < y1 + 1.0 && bb[3] > y0 - 1.0);
            if !intersects_layout(bb, layout) || crosses_street || taken.iter().any(|t| overlaps(*t, bb, 1.0)) {
                continue;
            }
            taken.push(bb);
            scene.boxes.push(b);
            break;
        }
    }
    scene
}

/// Occlusion-free top-down class of a ground point.
pub fn class_at(scene: &SceneSpec, x: f64, y: f64) -> u8 {
    let mut best: Option<&SceneBox> = None;
    for b in &scene.boxes {
        if b.contains(x, y) && best.is_none_or(|o| b.size[2] > o.size[2]) {
            best = Some(b);
        }
    }
    if let Some(b) = best {
        return b.class;
    }
    scene
        .strips
        .iter()
        .rev()
        .find(|s| s.contains(x, y))
        .map_or(scene.ground_class, |s| s.class)
}

/// BEV class grid plus visibility mask, row-major with row 0 nearest.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub nx: usize,
    pub ny: usize,
    pub classes: Vec<u8>,
    pub mask: Vec<u8>,
}

impl SemanticMap {
    pub fn targets(&self) -> Vec<usize> {
        self.classes.iter().map(|&c| c as usize).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| f64::from(m)).collect()
    }

    pub fn visible(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Samples the scene at every cell center.
pub fn gt_layout(scene: &SceneSpec, layout: &LayoutSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(layout.cells());
    for j in 0..layout.ny {
        for i in 0..layout.nx {
            let (x, y) = layout.cell_center(i, j);
            out.push(class_at(scene, x, y));
        }
    }
    out
}

/// Whether the direction to `(x, y)` lies inside the horizontal field of view.
pub fn in_fov(x: f64, y: f64, fov_deg: f64) -> bool {
    y > 0.0 && x.atan2(y).abs() <= fov_deg.to_radians() / 2.0
}

/// Cells crossed by the segment from `from` to `to`, in order, via grid
/// traversal (Amanatides & Woo). Cells outside the layout are skipped.
fn traverse(layout: &LayoutSpec, from: (f64, f64), to: (f64, f64), mut visit: impl FnMut(usize, usize) -> bool) {
    let (cw, cd) = (layout.cell_width(), layout.cell_depth());
    // work in cell units
    let p0 = ((from.0 - layout.x_min) / cw, (from.1 - layout.y_min) / cd);
    let p1 = ((to.0 - layout.x_min) / cw, (to.1 - layout.y_min) / cd);
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let mut cx = p0.0.floor() as i64;
    let mut cy = p0.1.floor() as i64;
    let (ex, ey) = (p1.0.floor() as i64, p1.1.floor() as i64);
    let step_x = if dx > 0.0 { 1 } else { -1 };
    let step_y = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let next_boundary = |p: f64, c: i64, d: f64| if d > 0.0 { (c + 1) as f64 - p } else { p - c as f64 };
    let mut t_max_x = if dx != 0.0 { next_boundary(p0.0, cx, dx) / dx.abs() } else { f64::INFINITY };
    let mut t_max_y = if dy != 0.0 { next_boundary(p0.1, cy, dy) / dy.abs() } else { f64::INFINITY };
    let limit = (ex - cx).abs() + (ey - cy).abs() + 2;
    for _ in 0..=limit {
        if cx >= 0 && cy >= 0 && (cx as usize) < layout.nx && (cy as usize) < layout.ny && !visit(cx as usize, cy as usize) {
            return;
        }
        if cx == ex && cy == ey {
            return;
        }
        if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
        }
    }
}

/// 2D ray cast from the BEV origin: a cell is visible when its center is in
/// the field of view and no opaque cell lies strictly before it on the ray.
pub fn visibility_mask(gt: &[u8], layout: &LayoutSpec, opaque: &[u8], fov_deg: f64) -> Vec<u8> {
    let mut mask = vec![0u8; layout.cells()];
    for j in 0..layout.ny {
        for i in 0..layout.nx {
            let (x, y) = layout.cell_center(i, j);
            if !in_fov(x, y, fov_deg) {
                continue;
            }
            let mut blocked = false;
            traverse(layout, (0.0, 0.0), (x, y), |ci, cj| {
                if (ci, cj) == (i, j) {
                    return false;
                }
                if opaque.contains(&gt[cj * layout.nx + ci]) {
                    blocked = true;
                    return false;
                }
                true
            });
            mask[j * layout.nx + i] = u8::from(!blocked);
        }
    }
    mask
}

/// Ground truth map for a scene: classes and visibility.
pub fn semantic_map(scene: &SceneSpec, layout: &LayoutSpec, fov_deg: f64) -> SemanticMap {
    let classes = gt_layout(scene, layout);
    let mask = visibility_mask(&classes, layout, &OPAQUE, fov_deg);
    SemanticMap {
        nx: layout.nx,
        ny: layout.ny,
        classes,
        mask,
    }
}

fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in [0, 1] with smoothstep blending.
fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let base = p.map(f64::floor);
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let [bx, by, bz] = base.map(|b| b as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (ox, oy, oz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [(ox, 0), (oy, 1), (oz, 2)]
            .iter()
            .map(|&(o, a)| if o == 1 { frac[a] } else { 1.0 - frac[a] })
            .product::<f64>();
        acc += w * hash3(seed, bx + ox, by + oy, bz + oz);
    }
    acc
}

/// Multiplicative surface texture around 1 with peak deviation `amplitude`.
pub fn texture(seed: u64, amplitude: f64, p: [f64; 3]) -> f64 {
    let fine = value_noise(seed, p.map(|v| v / 0.25));
    let coarse = value_noise(seed.wrapping_add(1), p.map(|v| v / 1.1));
    1.0 + amplitude * (2.0 * (0.65 * fine + 0.35 * coarse) - 1.0)
}

/// Rendered stereo pair with per-pixel reference depth and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: RgbImage,
    pub right: RgbImage,
    /// Reference-camera depth (forward distance) in meters; 0 where no surface.
    pub depth: DepthMap,
    /// Reference-camera class per pixel; [`SKY_LABEL`] where no surface.
    pub front_classes: Vec<u8>,
}

struct Hit {
    t: f64,
    color: [f64; 3],
    class: u8,
    /// Lambert-style shade from the surface orientation.
    shade: f64,
}

fn intersect_box(b: &SceneBox, plane: &GroundPlane, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let z0 = plane.z_at(b.center[0], b.center[1]);
    let (ox, oy) = (o[0] - b.center[0], o[1] - b.center[1]);
    let lo = [c * ox + s * oy, -s * ox + c * oy, o[2] - z0];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let half = [b.size[0] / 2.0, b.size[1] / 2.0];
    let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, b.size[2])];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    for a in 0..3 {
        let (lo_b, hi_b) = bounds[a];
        if ld[a].abs() < 1e-12 {
            if lo[a] < lo_b || lo[a] > hi_b {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo_b - lo[a]) / ld[a], (hi_b - lo[a]) / ld[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
        }
        t1 = t1.min(tb);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let shade = match axis {
        2 => 1.0,
        1 => 0.85,
        _ => 0.7,
    };
    Some((t0, shade))
}

fn trace(scene: &SceneSpec, plane: &GroundPlane, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let denom = d[2] + plane.a * d[0] + plane.b * d[1];
    if denom < -1e-12 {
        let t = -(plane.c + plane.a * o[0] + plane.b * o[1] + o[2]) / denom;
        if t > 0.0 {
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            let (class, color) = match scene.strips.iter().rev().find(|s| s.contains(x, y)) {
                Some(s) => (s.class, s.color),
                None => (scene.ground_class, scene.ground_color),
            };
            best = Some(Hit { t, color, class, shade: 1.0 });
        }
    }
    for b in &scene.boxes {
        if let Some((t, shade)) = intersect_box(b, plane, o, d) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                best = Some(Hit {
                    t,
                    color: b.color,
                    class: b.class,
                    shade,
                });
            }
        }
    }
    best
}

fn render_view(scene: &SceneSpec, rig: &StereoRig, plane: &GroundPlane, cam_x: f64, mut on_hit: impl FnMut(usize, Option<&Hit>)) -> RgbImage {
    let mut img = RgbImage::new(rig.width, rig.height);
    for v in 0..rig.height {
        for u in 0..rig.width {
            let d = [(u as f64 - rig.cx) / rig.f, 1.0, -(v as f64 - rig.cy) / rig.f];
            let o = [cam_x, 0.0, 0.0];
            let hit = trace(scene, plane, o, d);
            let rgb = match &hit {
                Some(h) => {
                    let p = [o[0] + h.t * d[0], o[1] + h.t * d[1], o[2] + h.t * d[2]];
                    let k = h.shade * texture(scene.texture_seed, scene.texture_amplitude, p);
                    h.color.map(|c| c * k)
                }
                None => {
                    let g = (v as f64 / rig.height as f64).min(1.0);
                    [0.55 + 0.2 * g, 0.70 + 0.15 * g, 0.92]
                }
            };
            img.set(u, v, rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
            on_hit(v * rig.width + u, hit.as_ref());
        }
    }
    img
}

/// Renders both views by casting one ray per pixel center and keeping the
/// nearest surface, which is exactly what a per-pixel z-buffer resolves to.
pub fn render_stereo(scene: &SceneSpec, rig: &StereoRig, plane: &GroundPlane) -> StereoFrame {
    let n = rig.width * rig.height;
    let mut depth = vec![0f32; n];
    let mut front = vec![SKY_LABEL; n];
    let left = render_view(scene, rig, plane, 0.0, |k, hit| {
        if let Some(h) = hit {
            depth[k] = h.t as f32;
            front[k] = h.class;
        }
    });
    let right = render_view(scene, rig, plane, rig.baseline, |_, _| {});
    StereoFrame {
        left,
        right,
        depth: DepthMap {
            width: rig.width,
            height: rig.height,
            data: depth,
        },
        front_classes: front,
    }
}

/// Exact reference depth of the surface seen through pixel `(u, v)`.
pub fn depth_at(scene: &SceneSpec, rig: &StereoRig, plane: &GroundPlane, u: f64, v: f64) -> Option<f64> {
    let d = [(u - rig.cx) / rig.f, 1.0, -(v - rig.cy) / rig.f];
    trace(scene, plane, [0.0; 3], d).map(|h| h.t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Per-scene seed. Train and test draw from disjoint halves of the seed
/// space for any run seed.
pub fn scene_seed(seed: u64, split: Split, index: u32) -> u64 {
    let base = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) & !((1u64 << 33) - 1);
    let half = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 32,
    };
    base | half | u64::from(index)
}

/// Samples, renders and labels one scene.
pub fn generate_sample(
    id: &str,
    seed: u64,
    params: &SceneParams,
    rig: &StereoRig,
    plane: &GroundPlane,
    layout: &LayoutSpec,
) -> Sample {
    let scene = sample_scene(seed, params, layout);
    let frame = render_stereo(&scene, rig, plane);
    let gt = semantic_map(&scene, layout, rig.fov_deg());
    Sample {
        id: id.to_string(),
        left: frame.left,
        right: frame.right,
        depth: frame.depth,
        gt,
        front_classes: frame.front_classes,
        scene,
    }
}

/// Generates `n` samples of `split` under `out_dir` and writes
/// `<out_dir>/<split>.json`.
#[allow(clippy::too_many_arguments)]
pub fn make_dataset(
    n: usize,
    seed: u64,
    split: Split,
    params: &SceneParams,
    rig: &StereoRig,
    plane: &GroundPlane,
    layout: &LayoutSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    rig.validate()?;
    plane.validate()?;
    layout.validate()?;
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        let id = format!("{}_{k:06}", split.name());
        let index = u32::try_from(k).map_err(|_| crate::SbevError::Config("too many samples".into()))?;
        let sample = generate_sample(&id, scene_seed(seed, split, index), params, rig, plane, layout);
        samples.push(write_sample(out_dir, &sample)?);
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        split: split.name().to_string(),
        seed,
        rig: *rig,
        plane: *plane,
        layout: *layout,
        class_names: CLASS_NAMES.iter().take(layout.classes).map(|s| s.to_string()).collect(),
        palette: PALETTE.iter().take(layout.classes).copied().collect(),
        samples,
    };
    write_manifest(&out_dir.join(format!("{}.json", split.name())), &manifest)?;
    Ok(manifest)
}
