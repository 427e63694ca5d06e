//! Converts ground-truth boxes into stage-1 supervision tensors (per FPN
//! level) and per-RoI stage-2 supervision.

use crate::boxes::{GroundTruthBox, ProposalRoI};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strides and size ranges of the feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub strides: Vec<usize>,
    /// Half-open [lo, hi) max-side intervals per level; the last hi is +inf.
    pub level_ranges: Vec<(f64, f64)>,
    pub image_h: usize,
    pub image_w: usize,
}

impl PyramidConfig {
    /// The standard five-level pyramid: strides 8..128, max-side splits at
    /// 64/128/256/512.
    pub fn standard(image_h: usize, image_w: usize) -> PyramidConfig {
        PyramidConfig {
            strides: vec![8, 16, 32, 64, 128],
            level_ranges: vec![
                (0.0, 64.0),
                (64.0, 128.0),
                (128.0, 256.0),
                (256.0, 512.0),
                (512.0, f64::INFINITY),
            ],
            image_h,
            image_w,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// Heatmap extent of a level.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        let s = self.strides[level];
        (self.image_h / s, self.image_w / s)
    }
}

/// Radius derivation parameters for Gaussian target rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    /// Minimum IoU the shifted-corner construction must preserve.
    pub min_iou: f64,
    /// Floor for sigma, in heatmap pixels.
    pub sigma_floor: f64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        GaussianSpec {
            min_iou: 0.3,
            sigma_floor: 1e-6,
        }
    }
}

/// Supervision tensors of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelTargets {
    /// [1, H/s, W/s] in [0, 1]; exactly 1 at positive cells.
    pub heatmap: Tensor,
    /// [2, H/s, W/s]; channel 0 = x offset, channel 1 = y offset; valid at positives.
    pub offset: Tensor,
    /// [1, H/s, W/s]; ground-truth scale (max side, image pixels) at positives.
    pub scale: Tensor,
    /// [1, H/s, W/s] in {0, 1}.
    pub pos_mask: Tensor,
}

/// All stage-1 supervision for one image.
#[derive(Debug, Clone)]
pub struct Stage1Targets {
    pub levels: Vec<LevelTargets>,
    /// Number of positive cells across levels (boxes minus collisions).
    pub n_pos: usize,
    /// Boxes that lost a contested positive cell to a larger box.
    pub collisions: usize,
}

/// Stage-2 supervision for one RoI.
#[derive(Debug, Clone)]
pub struct InstanceTargets {
    /// [1, m, m]; all zero for background instances.
    pub br_heatmap: Tensor,
    /// Fractional cell offsets in [0, 1); meaningful only for foreground.
    pub br_offset: (f64, f64),
    /// Class in [0, C]; C is the background label.
    pub class_label: usize,
    pub is_foreground: bool,
}

/// Level whose max-side range contains the box.
pub fn assign_fpn_level(gt: &GroundTruthBox, config: &PyramidConfig) -> usize {
    let side = gt.max_side();
    for (i, &(lo, hi)) in config.level_ranges.iter().enumerate() {
        if side >= lo && side < hi {
            return i;
        }
    }
    config.level_ranges.len() - 1
}

/// Corner-shift Gaussian radius: the least of the three quadratic-case roots
/// that keep IoU >= `min_iou` when corners move by the radius, floored at 0.
pub fn gaussian_radius(width: f64, height: f64, min_iou: f64) -> f64 {
    let (w, h) = (width, height);
    // one corner in, one out: r^2 - (w+h) r + wh (1-q)/(1+q) >= 0
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_iou) / (1.0 + min_iou);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // both corners in: 4 r^2 - 2 (w+h) r + (1-q) wh >= 0
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_iou) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 8.0;
    // both corners out: 4q r^2 + 2q (w+h) r + (q-1) wh <= 0
    let a3 = 4.0 * min_iou;
    let b3 = -2.0 * min_iou * (h + w);
    let c3 = (min_iou - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);
    r1.min(r2).min(r3).max(0.0)
}

fn sigma_for(width: f64, height: f64, spec: &GaussianSpec) -> f64 {
    (gaussian_radius(width, height, spec.min_iou) / 3.0).max(spec.sigma_floor)
}

/// Stamp exp(-d^2 / (2 sigma^2)) around `center`, max-merged into the map.
/// The center cell becomes exactly 1.
pub fn render_gaussian(heatmap: &mut Tensor, center: (i64, i64), sigma: f64) -> Result<()> {
    heatmap.expect_rank(3, "render_gaussian")?;
    let (h, w) = (heatmap.shape()[1], heatmap.shape()[2]);
    let (row, col) = center;
    if row < 0 || row >= h as i64 || col < 0 || col >= w as i64 {
        return Err(Error::CenterOutOfBounds { row, col, h, w });
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let data = heatmap.data_mut();
    for i in 0..h {
        let dy = i as f64 - row as f64;
        for j in 0..w {
            let dx = j as f64 - col as f64;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            let cell = &mut data[i * w + j];
            if v > *cell {
                *cell = v;
            }
        }
    }
    data[row as usize * w + col as usize] = 1.0;
    Ok(())
}

/// Encode all boxes of an image into per-level stage-1 targets.
///
/// Positive cell per box: floor of the top-left corner over the level stride.
/// Two boxes contesting a cell keep the larger-area one; losers are counted
/// as collisions and keep only their Gaussian penalty region.
pub fn encode_stage1(
    boxes: &[GroundTruthBox],
    config: &PyramidConfig,
    spec: &GaussianSpec,
) -> Result<Stage1Targets> {
    let mut levels: Vec<LevelTargets> = (0..config.num_levels())
        .map(|l| {
            let (h, w) = config.level_dims(l);
            LevelTargets {
                heatmap: Tensor::zeros(&[1, h, w]),
                offset: Tensor::zeros(&[2, h, w]),
                scale: Tensor::zeros(&[1, h, w]),
                pos_mask: Tensor::zeros(&[1, h, w]),
            }
        })
        .collect();

    // cell ownership: (level, row, col) -> box index, larger area wins
    let mut owner: Vec<(usize, usize, usize, usize)> = Vec::new(); // level, row, col, box
    let mut collisions = 0usize;
    for (bi, gt) in boxes.iter().enumerate() {
        let level = assign_fpn_level(gt, config);
        let s = config.strides[level] as f64;
        let (h, w) = config.level_dims(level);
        let col = ((gt.x1 / s).floor() as usize).min(w - 1);
        let row = ((gt.y1 / s).floor() as usize).min(h - 1);
        match owner
            .iter_mut()
            .find(|(l, r, c, _)| *l == level && *r == row && *c == col)
        {
            Some(entry) => {
                collisions += 1;
                if gt.area() > boxes[entry.3].area() {
                    entry.3 = bi;
                }
            }
            None => owner.push((level, row, col, bi)),
        }
    }

    // gaussians render for every box; offsets/scale/mask only for cell owners
    for gt in boxes {
        let level = assign_fpn_level(gt, config);
        let s = config.strides[level] as f64;
        let (h, w) = config.level_dims(level);
        let col = ((gt.x1 / s).floor() as i64).min(w as i64 - 1);
        let row = ((gt.y1 / s).floor() as i64).min(h as i64 - 1);
        let sigma = sigma_for(gt.width() / s, gt.height() / s, spec);
        render_gaussian(&mut levels[level].heatmap, (row, col), sigma)?;
    }
    for &(level, row, col, bi) in &owner {
        let gt = &boxes[bi];
        let s = config.strides[level] as f64;
        let (h, w) = config.level_dims(level);
        let dx = gt.x1 / s - (gt.x1 / s).floor();
        let dy = gt.y1 / s - (gt.y1 / s).floor();
        let lt = &mut levels[level];
        lt.offset.data_mut()[row * w + col] = dx;
        lt.offset.data_mut()[h * w + row * w + col] = dy;
        lt.scale.data_mut()[row * w + col] = gt.max_side();
        lt.pos_mask.data_mut()[row * w + col] = 1.0;
    }

    let n_pos = owner.len();
    Ok(Stage1Targets {
        levels,
        n_pos,
        collisions,
    })
}

/// Map a ground-truth bottom-right corner into a RoI's m x m heatmap frame.
///
/// Foreground iff the mapped point lies in [0, m) on both axes; otherwise the
/// instance is marked background (the RoI failed to contain the corner).
pub fn encode_instance(
    roi: &ProposalRoI,
    gt: &GroundTruthBox,
    m: usize,
    num_classes: usize,
    spec: &GaussianSpec,
) -> Result<InstanceTargets> {
    if roi.z_e <= 0.0 {
        return Err(Error::domain(
            "encode_instance",
            format!("non-positive enlarged scale {}", roi.z_e),
        ));
    }
    let fx = m as f64 / roi.z_e;
    let x_h = (gt.x2 - roi.x_tl) * fx;
    let y_h = (gt.y2 - roi.y_tl) * fx;
    let inside = x_h >= 0.0 && x_h < m as f64 && y_h >= 0.0 && y_h < m as f64;
    if !inside {
        return Ok(InstanceTargets {
            br_heatmap: Tensor::zeros(&[1, m, m]),
            br_offset: (0.0, 0.0),
            class_label: num_classes,
            is_foreground: false,
        });
    }
    let col = x_h.floor();
    let row = y_h.floor();
    let mut heatmap = Tensor::zeros(&[1, m, m]);
    let sigma = sigma_for(gt.width() * fx, gt.height() * fx, spec);
    render_gaussian(&mut heatmap, (row as i64, col as i64), sigma)?;
    Ok(InstanceTargets {
        br_heatmap: heatmap,
        br_offset: (x_h - col, y_h - row),
        class_label: gt.class_id,
        is_foreground: true,
    })
}
