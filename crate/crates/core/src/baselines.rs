//! Inputs of the two geometric baselines.

use sbev_autograd::{Graph, Tensor};

use crate::error::{config_err, Result};
use crate::geometry::{LayoutSpec, StereoRig};

/// Back-projects every labelled pixel with positive depth to the ground
/// plane footprint and splats its class into the containing BEV cell.
/// Counts are normalized per cell, giving `1 × N_C × N_y × N_x` class
/// frequencies (all zero where no point lands).
pub fn pseudo_lidar_bev(depth: &[f32], front_classes: &[u8], rig: &StereoRig, layout: &LayoutSpec) -> Result<Tensor> {
    let n = rig.width * rig.height;
    if depth.len() != n || front_classes.len() != n {
        return config_err(format!("depth/classes hold {}/{} pixels, rig has {n}", depth.len(), front_classes.len()));
    }
    let cells = layout.cells();
    let mut counts = vec![0.0; layout.classes * cells];
    let mut totals = vec![0.0; cells];
    for v in 0..rig.height {
        for u in 0..rig.width {
            let k = v * rig.width + u;
            let (z, class) = (f64::from(depth[k]), front_classes[k] as usize);
            if !(z > 0.0) || class >= layout.classes {
                continue;
            }
            let x = (u as f64 - rig.cx) * z / rig.f;
            if let Some((i, j)) = layout.cell_of(x, z) {
                let cell = j * layout.nx + i;
                counts[class * cells + cell] += 1.0;
                totals[cell] += 1.0;
            }
        }
    }
    for c in 0..layout.classes {
        for (cell, &t) in totals.iter().enumerate() {
            if t > 0.0 {
                counts[c * cells + cell] /= t;
            }
        }
    }
    Ok(Tensor::new(&[1, layout.classes, layout.ny, layout.nx], counts)?)
}

/// RGB inverse perspective mapping of a `1 × 3 × H × W` image onto the BEV
/// grid described by `img_grid`.
pub fn ipm_only_input(image: &Tensor, img_grid: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let y = g.grid_sample(x, img_grid)?;
    Ok(g.value(y).clone())
}
