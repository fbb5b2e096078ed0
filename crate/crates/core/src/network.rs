//! Stereo BEV layout network, its ablation variants and the two geometric
//! baselines, all assembled from autograd ops and precomputed warp grids.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sbev_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{config_err, Result, SbevError};
use crate::geometry::{make_ipm_grid, make_stereo_bev_grid, GroundPlane, LayoutSpec, StereoRig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StereoOnly,
    StereoPlusRgbIpm,
    StereoPlusFeatIpm,
    Full,
    Cmd,
    /// Ground-truth depth and front-view classes splatted to BEV, then a U-Net.
    PseudoLidar,
    /// RGB inverse perspective mapping of the reference image, then a U-Net.
    IpmOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::StereoOnly,
        Variant::StereoPlusRgbIpm,
        Variant::StereoPlusFeatIpm,
        Variant::Full,
        Variant::Cmd,
        Variant::PseudoLidar,
        Variant::IpmOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StereoOnly => "stereo_only",
            Variant::StereoPlusRgbIpm => "stereo_plus_rgb_ipm",
            Variant::StereoPlusFeatIpm => "stereo_plus_feat_ipm",
            Variant::Full => "full",
            Variant::Cmd => "cmd",
            Variant::PseudoLidar => "pseudo_lidar",
            Variant::IpmOnly => "ipm_only",
        }
    }

    pub fn uses_stereo(self) -> bool {
        !matches!(self, Variant::PseudoLidar | Variant::IpmOnly)
    }

    pub fn uses_rgb_ipm(self) -> bool {
        matches!(self, Variant::StereoPlusRgbIpm | Variant::Full | Variant::IpmOnly)
    }

    pub fn uses_feat_ipm(self) -> bool {
        matches!(self, Variant::StereoPlusFeatIpm | Variant::Full | Variant::Cmd)
    }

    pub fn needs_pseudo_lidar(self) -> bool {
        self == Variant::PseudoLidar
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SbevError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| SbevError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Backbone feature channels `C`.
    pub channels: usize,
    pub feat_downsample: usize,
    /// Disparity planes `D`.
    pub disparities: usize,
    /// Largest disparity covered by the volume, in image pixels.
    pub max_disparity: f64,
    /// Channels of the refined 3D volume.
    pub volume_channels: usize,
    /// Channels `C'` of the reduced volume.
    pub reduced_channels: usize,
    /// Distilled channels `K`.
    pub distill_k: usize,
    /// U-Net encoder widths, one per level.
    pub unet_widths: Vec<usize>,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            channels: 8,
            feat_downsample: 4,
            disparities: 16,
            max_disparity: 24.0,
            volume_channels: 4,
            reduced_channels: 16,
            distill_k: 4,
            unet_widths: vec![16, 32, 64],
            classes: 5,
        }
    }
}

impl ModelConfig {
    /// Disparity between consecutive volume planes in image pixels.
    pub fn disp_step(&self) -> f64 {
        self.max_disparity / self.disparities as f64
    }

    /// Plane shifts in feature pixels.
    pub fn shifts(&self) -> Vec<f64> {
        let step = self.disp_step() / self.feat_downsample as f64;
        (0..self.disparities).map(|k| k as f64 * step).collect()
    }

    pub fn validate(&self, rig: &StereoRig, layout: &LayoutSpec) -> Result<()> {
        if self.feat_downsample == 0 || rig.width % self.feat_downsample != 0 || rig.height % self.feat_downsample != 0 {
            return config_err(format!(
                "image {}×{} not divisible by feat_downsample {}",
                rig.width, rig.height, self.feat_downsample
            ));
        }
        if self.feat_downsample != 4 {
            return config_err("the feature extractor has a fixed downsample factor of 4");
        }
        if self.disparities < 2 {
            return config_err("at least two disparity planes are required");
        }
        if !(self.max_disparity > 0.0 && self.max_disparity < rig.width as f64) {
            return config_err(format!("max_disparity {} outside (0, image width)", self.max_disparity));
        }
        if self.channels == 0 || self.volume_channels == 0 || self.reduced_channels == 0 {
            return config_err("channel counts must be positive");
        }
        if self.variant == Variant::Cmd && (self.distill_k == 0 || self.distill_k > self.channels.min(self.reduced_channels)) {
            return config_err(format!(
                "distill_k = {} must lie in 1..={}",
                self.distill_k,
                self.channels.min(self.reduced_channels)
            ));
        }
        if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
            return config_err("unet_widths must be non-empty and positive");
        }
        let factor = 1 << (self.unet_widths.len() - 1);
        if layout.nx % factor != 0 || layout.ny % factor != 0 {
            return config_err(format!("layout {}×{} not divisible by {factor}", layout.nx, layout.ny));
        }
        if self.classes != layout.classes {
            return config_err(format!("model has {} classes, layout has {}", self.classes, layout.classes));
        }
        Ok(())
    }

    /// Channels fed to the main U-Net.
    fn head_inputs(&self) -> usize {
        let v = self.variant;
        match v {
            Variant::PseudoLidar => self.classes,
            Variant::IpmOnly => 3,
            Variant::Cmd => self.reduced_channels,
            _ => {
                self.reduced_channels
                    + if v.uses_rgb_ipm() { 3 } else { 0 }
                    + if v.uses_feat_ipm() { self.channels } else { 0 }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
    three_d: bool,
}

impl Conv {
    fn new(
        params: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        three_d: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (shape, fan_in) = if three_d {
            (vec![c_out, c_in, k, k, k], c_in * k * k * k)
        } else {
            (vec![c_out, c_in, k, k], c_in * k * k)
        };
        let w = params.he_uniform(&format!("{name}.weight"), &shape, fan_in, rng)?;
        let b = params.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            w,
            b,
            stride,
            pad: k / 2,
            three_d,
        })
    }

    fn apply(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = params.bind(g, self.w);
        let b = params.bind(g, self.b);
        let y = if self.three_d {
            g.conv3d(x, w, b, self.stride, self.pad)?
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)?
        };
        Ok(y)
    }

    fn apply_relu(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let y = self.apply(g, params, x)?;
        Ok(g.relu(y))
    }
}

/// Two 3×3 convolutions with an identity skip: `relu(x + conv(relu(conv(x))))`.
#[derive(Clone, Copy, Debug)]
struct Residual {
    first: Conv,
    second: Conv,
}

impl Residual {
    fn new(params: &mut ParamStore, name: &str, c: usize, three_d: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            first: Conv::new(params, &format!("{name}.0"), c, c, 3, 1, three_d, rng)?,
            second: Conv::new(params, &format!("{name}.1"), c, c, 3, 1, three_d, rng)?,
        })
    }

    fn apply(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.apply_relu(g, params, x)?;
        let h = self.second.apply(g, params, h)?;
        let s = g.add(x, h)?;
        Ok(g.relu(s))
    }
}

#[derive(Clone, Debug)]
struct Extractor {
    down1: Conv,
    down2: Conv,
    block: Residual,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Refiner {
    entry: Conv,
    blocks: [Residual; 2],
}

#[derive(Clone, Debug)]
struct Reducer {
    first: Conv,
    second: Conv,
}

#[derive(Clone, Debug)]
struct UNet {
    down: Vec<(Conv, Conv)>,
    up: Vec<(Conv, Conv)>,
    head: Conv,
}

impl UNet {
    fn new(params: &mut ParamStore, name: &str, c_in: usize, widths: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut down = Vec::new();
        let mut prev = c_in;
        for (l, &w) in widths.iter().enumerate() {
            down.push((
                Conv::new(params, &format!("{name}.down{l}.0"), prev, w, 3, 1, false, rng)?,
                Conv::new(params, &format!("{name}.down{l}.1"), w, w, 3, 1, false, rng)?,
            ));
            prev = w;
        }
        let mut up = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            let w = widths[l];
            up.push((
                Conv::new(params, &format!("{name}.up{l}.0"), prev + w, w, 3, 1, false, rng)?,
                Conv::new(params, &format!("{name}.up{l}.1"), w, w, 3, 1, false, rng)?,
            ));
            prev = w;
        }
        let head = Conv::new(params, &format!("{name}.head"), prev, classes, 1, 1, false, rng)?;
        Ok(Self { down, up, head })
    }

    fn apply(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let mut skips = Vec::new();
        let mut h = x;
        for (l, (a, b)) in self.down.iter().enumerate() {
            if l > 0 {
                h = g.maxpool2d(h)?;
            }
            h = a.apply_relu(g, params, h)?;
            h = b.apply_relu(g, params, h)?;
            skips.push(h);
        }
        skips.pop();
        for (a, b) in &self.up {
            let skip = skips.pop().expect("one skip per decoder level");
            let u = g.upsample2d(h)?;
            let cat = g.concat(&[u, skip], 1)?;
            h = a.apply_relu(g, params, cat)?;
            h = b.apply_relu(g, params, h)?;
        }
        self.head.apply(g, params, h)
    }
}

/// Warp grids as `1 × N_y × N_x × 2` tensors.
#[derive(Clone, Debug)]
pub struct Grids {
    pub stereo: Tensor,
    pub ipm_image: Tensor,
    pub ipm_feature: Tensor,
}

impl Grids {
    pub fn build(config: &ModelConfig, rig: &StereoRig, plane: &GroundPlane, layout: &LayoutSpec) -> Result<Self> {
        let ds = config.feat_downsample;
        let (fw, fh) = (rig.width / ds, rig.height / ds);
        Ok(Self {
            stereo: make_stereo_bev_grid(rig, layout, fw, config.disparities, ds, config.disp_step())?.to_tensor(),
            ipm_image: make_ipm_grid(rig, plane, layout, rig.width, rig.height, 1)?.to_tensor(),
            ipm_feature: make_ipm_grid(rig, plane, layout, fw, fh, ds)?.to_tensor(),
        })
    }
}

/// Per-sample network inputs. Images are `1 × 3 × H × W`.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub left: &'a Tensor,
    pub right: &'a Tensor,
    /// `1 × N_C × N_y × N_x` splatted class evidence, pseudo-lidar variant only.
    pub pseudo_lidar: Option<&'a Tensor>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `1 × N_C × N_y × N_x`; the stereo head for CMD.
    pub logits: Var,
    /// CMD training only: logits of the IPM head.
    pub ipm_logits: Option<Var>,
    /// CMD training only: L1 between the first K IPM and stereo BEV channels.
    pub distill: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SbevModel {
    pub config: ModelConfig,
    pub rig: StereoRig,
    pub plane: GroundPlane,
    pub layout: LayoutSpec,
    pub params: ParamStore,
    grids: Grids,
    extractor: Option<Extractor>,
    refiner: Option<Refiner>,
    reducer: Option<Reducer>,
    unet: UNet,
    unet_ipm: Option<UNet>,
}

impl SbevModel {
    pub fn new(config: ModelConfig, rig: StereoRig, plane: GroundPlane, layout: LayoutSpec, seed: u64) -> Result<Self> {
        rig.validate()?;
        plane.validate()?;
        layout.validate()?;
        config.validate(&rig, &layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (c, cv, cr) = (config.channels, config.volume_channels, config.reduced_channels);
        let v = config.variant;

        let (mut extractor, mut refiner, mut reducer) = (None, None, None);
        if v.uses_stereo() {
            let p = &mut params;
            let r = &mut rng;
            extractor = Some(Extractor {
                down1: Conv::new(p, "extractor.down1", 3, c, 3, 2, false, r)?,
                down2: Conv::new(p, "extractor.down2", c, c, 3, 2, false, r)?,
                block: Residual::new(p, "extractor.block", c, false, r)?,
                out: Conv::new(p, "extractor.out", c, c, 3, 1, false, r)?,
            });
            refiner = Some(Refiner {
                entry: Conv::new(p, "refine.entry", 2 * c, cv, 3, 1, true, r)?,
                blocks: [Residual::new(p, "refine.block0", cv, true, r)?, Residual::new(p, "refine.block1", cv, true, r)?],
            });
            let fh = rig.height / config.feat_downsample;
            reducer = Some(Reducer {
                first: Conv::new(p, "reduce.0", cv * fh, cr, 3, 1, false, r)?,
                second: Conv::new(p, "reduce.1", cr, cr, 3, 1, false, r)?,
            });
        }
        let unet_name = if v == Variant::Cmd { "unet_stereo" } else { "unet" };
        let unet = UNet::new(&mut params, unet_name, config.head_inputs(), &config.unet_widths, config.classes, &mut rng)?;
        let unet_ipm = if v == Variant::Cmd {
            Some(UNet::new(&mut params, "unet_ipm", c, &config.unet_widths, config.classes, &mut rng)?)
        } else {
            None
        };
        let grids = Grids::build(&config, &rig, &plane, &layout)?;
        Ok(Self {
            config,
            rig,
            plane,
            layout,
            params,
            grids,
            extractor,
            refiner,
            reducer,
            unet,
            unet_ipm,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn grids(&self) -> &Grids {
        &self.grids
    }

    /// Replaces the IPM grids; the stereo grid is left untouched.
    pub fn set_ipm_grids(&mut self, image: Tensor, feature: Tensor) {
        self.grids.ipm_image = image;
        self.grids.ipm_feature = feature;
    }

    /// Names of trunk parameters: everything feeding the disparity volume.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("extractor.") || p.name.starts_with("refine."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Shared feature extractor: `1 × 3 × H × W` to `1 × C × H/4 × W/4`.
    pub fn extract_features(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let e = self.stereo_part(&self.extractor)?;
        let p = &self.params;
        let h = e.down1.apply_relu(g, p, image)?;
        let h = e.down2.apply_relu(g, p, h)?;
        let h = e.block.apply(g, p, h)?;
        e.out.apply(g, p, h)
    }

    /// Concatenation volume `1 × 2C × D × H' × W'`.
    pub fn build_feature_volume(&self, g: &mut Graph, f_ref: Var, f_tgt: Var) -> Result<Var> {
        Ok(g.cost_volume(f_ref, f_tgt, &self.config.shifts())?)
    }

    /// Two residual 3D blocks: `1 × 2C × D × H' × W'` to `1 × C_v × D × H' × W'`.
    pub fn refine_volume(&self, g: &mut Graph, volume: Var) -> Result<Var> {
        let r = self.stereo_part(&self.refiner)?;
        let p = &self.params;
        let mut h = r.entry.apply_relu(g, p, volume)?;
        for block in &r.blocks {
            h = block.apply(g, p, h)?;
        }
        Ok(h)
    }

    /// Folds the height axis into channels and convolves over (D, W'):
    /// `1 × C_v × D × H' × W'` to `1 × C' × D × W'`.
    pub fn reduce_volume(&self, g: &mut Graph, refined: Var) -> Result<Var> {
        let r = self.stereo_part(&self.reducer)?;
        let folded = fold_height(g, refined)?;
        let h = r.first.apply_relu(g, &self.params, folded)?;
        r.second.apply_relu(g, &self.params, h)
    }

    /// Inverse-warps the reduced volume onto the BEV grid.
    pub fn stereo_bev(&self, g: &mut Graph, reduced: Var) -> Result<Var> {
        let s = g.shape(reduced);
        let (d, w) = (self.config.disparities, self.rig.width / self.config.feat_downsample);
        if s.len() != 4 || s[2] != d || s[3] != w {
            return Err(SbevError::Config(format!("reduced volume {s:?} does not match the grid (D={d}, W'={w})")));
        }
        Ok(g.grid_sample(reduced, &self.grids.stereo)?)
    }

    /// RGB and feature IPM maps: `(1 × 3 × N_y × N_x, 1 × C × N_y × N_x)`.
    pub fn ipm_branch(&self, g: &mut Graph, image: Var, features: Option<Var>) -> Result<(Var, Option<Var>)> {
        let rgb = g.grid_sample(image, &self.grids.ipm_image)?;
        let feat = match features {
            Some(f) => Some(g.grid_sample(f, &self.grids.ipm_feature)?),
            None => None,
        };
        Ok((rgb, feat))
    }

    /// Refined volume for one stereo pair, used by the disparity probe.
    pub fn volume(&self, g: &mut Graph, left: &Tensor, right: &Tensor) -> Result<Var> {
        let l = g.constant(left.clone());
        let r = g.constant(right.clone());
        let fl = self.extract_features(g, l)?;
        let fr = self.extract_features(g, r)?;
        let v = self.build_feature_volume(g, fl, fr)?;
        self.refine_volume(g, v)
    }

    /// Full forward pass. With `training = false` the CMD variant evaluates
    /// only its stereo head and never reads the IPM grids.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput<'_>, training: bool) -> Result<ForwardOutput> {
        let v = self.config.variant;
        let expect = [1, 3, self.rig.height, self.rig.width];
        for (name, t) in [("left", input.left), ("right", input.right)] {
            if t.shape() != expect {
                return Err(SbevError::Config(format!("{name} image has shape {:?}, expected {expect:?}", t.shape())));
            }
        }
        let p = &self.params;
        match v {
            Variant::PseudoLidar => {
                let planes = input
                    .pseudo_lidar
                    .ok_or_else(|| SbevError::Config("pseudo_lidar variant requires splatted input".into()))?;
                let x = g.constant(planes.clone());
                let logits = self.unet.apply(g, p, x)?;
                return Ok(ForwardOutput { logits, ipm_logits: None, distill: None });
            }
            Variant::IpmOnly => {
                let img = g.constant(input.left.clone());
                let (rgb, _) = self.ipm_branch(g, img, None)?;
                let logits = self.unet.apply(g, p, rgb)?;
                return Ok(ForwardOutput { logits, ipm_logits: None, distill: None });
            }
            _ => {}
        }

        let left = g.constant(input.left.clone());
        let right = g.constant(input.right.clone());
        let f_ref = self.extract_features(g, left)?;
        let f_tgt = self.extract_features(g, right)?;
        let vol = self.build_feature_volume(g, f_ref, f_tgt)?;
        let refined = self.refine_volume(g, vol)?;
        let reduced = self.reduce_volume(g, refined)?;
        let r_stereo = self.stereo_bev(g, reduced)?;

        if v == Variant::Cmd {
            let logits = self.unet.apply(g, p, r_stereo)?;
            if !training {
                return Ok(ForwardOutput { logits, ipm_logits: None, distill: None });
            }
            let (_, feat) = self.ipm_branch(g, left, Some(f_ref))?;
            let r_feat = feat.expect("feature IPM requested");
            let head = self.unet_ipm.as_ref().expect("cmd owns an ipm head");
            let ipm_logits = head.apply(g, p, r_feat)?;
            // the IPM features are the target of the transfer term, not its subject
            let teacher = g.constant(g.value(r_feat).clone());
            let distill = g.l1_first_k(teacher, r_stereo, self.config.distill_k)?;
            return Ok(ForwardOutput {
                logits,
                ipm_logits: Some(ipm_logits),
                distill: Some(distill),
            });
        }

        let mut parts = Vec::with_capacity(3);
        if v.uses_rgb_ipm() || v.uses_feat_ipm() {
            let feats = v.uses_feat_ipm().then_some(f_ref);
            let (rgb, feat) = self.ipm_branch(g, left, feats)?;
            if let Some(f) = feat {
                parts.push(f);
            }
            if v.uses_rgb_ipm() {
                parts.push(rgb);
            }
        }
        parts.push(r_stereo);
        let bev = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let logits = self.unet.apply(g, p, bev)?;
        Ok(ForwardOutput { logits, ipm_logits: None, distill: None })
    }

    fn stereo_part<'a, T>(&self, part: &'a Option<T>) -> Result<&'a T> {
        part.as_ref()
            .ok_or_else(|| SbevError::Config(format!("variant {} has no stereo trunk", self.config.variant)))
    }
}

/// `1 × C × D × H × W` to `1 × (C·H) × D × W`, channel index `c·H + h`.
pub fn fold_height(g: &mut Graph, volume: Var) -> Result<Var> {
    let s = g.shape(volume).to_vec();
    if s.len() != 5 {
        return Err(SbevError::Config(format!("expected a rank-5 volume, got {s:?}")));
    }
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let p = g.permute(volume, &[0, 1, 3, 2, 4])?;
    Ok(g.reshape(p, &[n, c * h, d, w])?)
}
