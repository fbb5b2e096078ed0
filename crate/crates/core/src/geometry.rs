//! Camera geometry for a rectified stereo rig looking along +y.
//!
//! World frame: x lateral-right, y forward, z up, with the reference camera
//! at the origin. Image columns `u` grow to the right, rows `v` downward, and
//! the center of pixel `k` sits at coordinate `k`. The ground is described by
//! its drop below the camera, `a·x + b·y + c`, so `c` is the camera height
//! over flat ground and ground points are `(x, y, −(a·x + b·y + c))`.

use serde::{Deserialize, Serialize};

use sbev_autograd::Tensor;

use crate::error::{config_err, Result, SbevError};

/// Pinhole intrinsics shared by both cameras plus the horizontal baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Baseline in meters; the target camera sits at `(+baseline, 0, 0)`.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

/// The desk-scale benchmark rig: 128×96 images, about 65° horizontal field of view.
impl Default for StereoRig {
    fn default() -> Self {
        Self {
            f: 100.0,
            cx: 63.5,
            cy: 24.0,
            baseline: 0.4,
            width: 128,
            height: 96,
        }
    }
}

impl StereoRig {
    pub fn new(f: f64, cx: f64, cy: f64, baseline: f64, width: usize, height: usize) -> Result<Self> {
        let rig = Self {
            f,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return config_err(format!("focal length must be positive, got {}", self.f));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return config_err(format!("baseline must be positive, got {}", self.baseline));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return config_err(format!("c_x = {} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return config_err(format!("c_y = {} outside (0, {})", self.cy, self.height));
        }
        Ok(())
    }

    /// Horizontal field of view in degrees, `2·atan(W / 2f)`.
    pub fn fov_deg(&self) -> f64 {
        2.0 * (self.width as f64 / (2.0 * self.f)).atan().to_degrees()
    }

    /// Projects a world point into the reference image; `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        project_from(self, p, 0.0)
    }

    /// Projects a world point into the target image.
    pub fn project_target(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        project_from(self, p, self.baseline)
    }
}

fn project_from(rig: &StereoRig, p: [f64; 3], cam_x: f64) -> Option<(f64, f64)> {
    let [x, y, z] = p;
    if y <= 0.0 {
        return None;
    }
    Some((rig.cx + rig.f * (x - cam_x) / y, rig.cy - rig.f * z / y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for GroundPlane {
    fn default() -> Self {
        Self::flat(1.4)
    }
}

impl GroundPlane {
    pub fn flat(height: f64) -> Self {
        Self {
            a: 0.0,
            b: 0.0,
            c: height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return config_err(format!("camera must be above the ground, c = {}", self.c));
        }
        if self.a.abs() >= 1.0 || self.b.abs() >= 1.0 {
            return config_err(format!("ground too steep: a = {}, b = {}", self.a, self.b));
        }
        Ok(())
    }

    /// Height of the ground surface at `(x, y)` in the camera-centered frame.
    pub fn z_at(&self, x: f64, y: f64) -> f64 {
        -(self.a * x + self.b * y + self.c)
    }

    pub fn point(&self, x: f64, y: f64) -> [f64; 3] {
        [x, y, self.z_at(x, y)]
    }
}

/// Metric extent and resolution of the bird's-eye-view grid.
///
/// Column `i` spans x, row `j` spans y with row 0 nearest to the camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub classes: usize,
}

/// 24 m × 24 m in front of the camera at 0.5 m cells, five classes.
impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            x_min: -12.0,
            x_max: 12.0,
            y_min: 2.0,
            y_max: 26.0,
            nx: 48,
            ny: 48,
            classes: 5,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return config_err("layout bounds must satisfy min < max");
        }
        if self.nx == 0 || self.ny == 0 || self.classes == 0 {
            return config_err("layout grid and class count must be positive");
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn cell_depth(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Metric center of cell (column `i`, row `j`).
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.cell_width(),
            self.y_min + (j as f64 + 0.5) * self.cell_depth(),
        )
    }

    /// Cell containing `(x, y)`, if inside the layout.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = (x - self.x_min) / self.cell_width();
        let fj = (y - self.y_min) / self.cell_depth();
        if fi < 0.0 || fj < 0.0 || !fi.is_finite() || !fj.is_finite() {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }
}

/// Coordinate used for cells with no source; far enough out that the whole
/// bilinear support misses the source.
pub const INVALID_COORD: f64 = -1.0e6;

/// Per-cell continuous source coordinates `(col, row)` for a warp.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    coords: Vec<f64>,
    valid: Vec<bool>,
}

impl SamplingGrid {
    fn build(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Self {
        let mut coords = Vec::with_capacity(height * width * 2);
        let mut valid = Vec::with_capacity(height * width);
        for j in 0..height {
            for i in 0..width {
                match f(i, j) {
                    Some((c, r)) if c.is_finite() && r.is_finite() => {
                        coords.extend([c, r]);
                        valid.push(true);
                    }
                    _ => {
                        coords.extend([INVALID_COORD, INVALID_COORD]);
                        valid.push(false);
                    }
                }
            }
        }
        Self {
            height,
            width,
            coords,
            valid,
        }
    }

    /// `(col, row)` for cell (column `i`, row `j`).
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        let k = 2 * (j * self.width + i);
        (self.coords[k], self.coords[k + 1])
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[j * self.width + i]
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Grid in the `1 × H × W × 2` layout expected by `Graph::grid_sample`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width, 2], self.coords.clone()).expect("grid extents are consistent")
    }
}

/// Triangulates a reference-image pixel with disparity `d` to BEV meters.
pub fn disparity_to_bev(u: f64, d: f64, rig: &StereoRig) -> Result<(f64, f64)> {
    if !(d > 0.0) {
        return Err(SbevError::Geometry(format!("disparity must be positive, got {d}")));
    }
    Ok(((u - rig.cx) * rig.baseline / d, rig.f * rig.baseline / d))
}

pub fn bev_to_disparity(x: f64, y: f64, rig: &StereoRig) -> Result<(f64, f64)> {
    if !(y > 0.0) {
        return Err(SbevError::Geometry(format!("point must be in front of the camera, y = {y}")));
    }
    Ok((rig.cx + rig.f * x / y, rig.f * rig.baseline / y))
}

/// Intersects the ray through pixel `(u, v)` with the ground plane.
pub fn ipm_pixel_to_ground(u: f64, v: f64, rig: &StereoRig, plane: &GroundPlane) -> Result<(f64, f64)> {
    // ray (x, y, z) = t·((u − c_x)/f, 1, −(v − c_y)/f); solve z = −(a·x + b·y + c)
    let denom = v - rig.cy - plane.a * (u - rig.cx) - plane.b * rig.f;
    if denom < 1e-9 {
        return Err(SbevError::Horizon { u, v });
    }
    let y = plane.c * rig.f / denom;
    Ok(((u - rig.cx) * y / rig.f, y))
}

/// Ground-to-image homography acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if !(w > 0.0) {
            return None;
        }
        let u = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
        let v = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
        Some((u, v))
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self(self.0.map(|row| row.map(|e| e * lambda)))
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

pub fn homography_ground_to_image(rig: &StereoRig, plane: &GroundPlane) -> Result<Homography> {
    let (f, a, b, c) = (rig.f, plane.a, plane.b, plane.c);
    let h = Homography([[f, rig.cx, 0.0], [f * a, rig.cy + f * b, f * c], [0.0, 1.0, 0.0]]);
    if h.det().abs() < 1e-12 * f * f {
        return Err(SbevError::Geometry(format!("degenerate ground plane (c = {c})")));
    }
    Ok(h)
}

/// Maps each BEV cell to `(col, row)` in a reduced disparity volume whose
/// columns are image columns divided by `feat_downsample` and whose rows are
/// disparities divided by `disp_step`.
pub fn make_stereo_bev_grid(
    rig: &StereoRig,
    layout: &LayoutSpec,
    vol_w: usize,
    vol_d: usize,
    feat_downsample: usize,
    disp_step: f64,
) -> Result<SamplingGrid> {
    if feat_downsample == 0 || !(disp_step > 0.0) {
        return config_err("feat_downsample must be ≥ 1 and disp_step > 0");
    }
    let (max_col, max_row) = (vol_w as f64 - 1.0, vol_d as f64 - 1.0);
    Ok(SamplingGrid::build(layout.ny, layout.nx, |i, j| {
        let (x, y) = layout.cell_center(i, j);
        let (u, d) = bev_to_disparity(x, y, rig).ok()?;
        let (col, row) = (u / feat_downsample as f64, d / disp_step);
        (col >= 0.0 && col <= max_col && row >= 0.0 && row <= max_row).then_some((col, row))
    }))
}

/// Maps each BEV cell to its ground-plane pixel in a source map of
/// `src_w × src_h` whose pixels are image pixels divided by `src_downsample`.
pub fn make_ipm_grid(
    rig: &StereoRig,
    plane: &GroundPlane,
    layout: &LayoutSpec,
    src_w: usize,
    src_h: usize,
    src_downsample: usize,
) -> Result<SamplingGrid> {
    if src_downsample == 0 {
        return config_err("src_downsample must be ≥ 1");
    }
    let h = homography_ground_to_image(rig, plane)?;
    let s = src_downsample as f64;
    let (max_col, max_row) = (src_w as f64 - 1.0, src_h as f64 - 1.0);
    Ok(SamplingGrid::build(layout.ny, layout.nx, |i, j| {
        let (x, y) = layout.cell_center(i, j);
        let (u, v) = h.apply(x, y)?;
        let (col, row) = (u / s, v / s);
        (col >= 0.0 && col <= max_col && row >= 0.0 && row <= max_row).then_some((col, row))
    }))
}
