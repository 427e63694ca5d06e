//! Axis-aligned boxes, IoU, score fusion and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth box in image pixels; corners are real-valued.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl GroundTruthBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<GroundTruthBox> {
        if !(x2 > x1 && y2 > y1) {
            return Err(Error::domain(
                "ground_truth_box",
                format!("degenerate extent ({x1},{y1})..({x2},{y2})"),
            ));
        }
        Ok(GroundTruthBox { x1, y1, x2, y2, class_id })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn max_side(&self) -> f64 {
        self.width().max(self.height())
    }
}

/// Square search space associating a top-left corner with its instance's
/// bottom-right corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalRoI {
    /// Refined top-left corner, image pixels.
    pub x_tl: f64,
    pub y_tl: f64,
    /// Regressed scale (side of the square RoI), image pixels.
    pub z: f64,
    /// Enlarged scale (1 + eta) * z.
    pub z_e: f64,
    /// Top-left heatmap confidence in (0, 1).
    pub s_tl: f64,
    /// Source FPN level.
    pub level: usize,
}

impl ProposalRoI {
    /// The vanilla (un-enlarged) square box.
    pub fn vanilla_box(&self) -> (f64, f64, f64, f64) {
        (self.x_tl, self.y_tl, self.x_tl + self.z, self.y_tl + self.z)
    }

    /// The enlarged square box used for localization features.
    pub fn enlarged_box(&self) -> (f64, f64, f64, f64) {
        (self.x_tl, self.y_tl, self.x_tl + self.z_e, self.y_tl + self.z_e)
    }
}

/// Final detection: box, class, fused score and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
    pub score: f64,
    /// (s_tl, s_br, s_cls)
    pub parts: (f64, f64, f64),
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Fused detection score: sqrt of the mean corner confidence times the
/// class confidence.
pub fn fuse_scores(s_tl: f64, s_br: f64, s_cls: f64) -> f64 {
    (0.5 * (s_tl + s_br) * s_cls).sqrt()
}

pub fn iou_xyxy(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0).max(0.0) * (a.3 - a.1).max(0.0);
    let area_b = (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_det(a: &Detection, b: &Detection) -> f64 {
    iou_xyxy((a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2))
}

pub fn iou_det_gt(a: (f64, f64, f64, f64), b: &GroundTruthBox) -> f64 {
    iou_xyxy(a, (b.x1, b.y1, b.x2, b.y2))
}

/// Greedy class-wise NMS by descending score. A box is suppressed iff its
/// IoU with an already-kept box of the same class exceeds the threshold.
/// Kept boxes come back sorted by score (original order breaking ties).
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .filter(|k| k.class_id == candidate.class_id)
            .any(|k| iou_det(k, candidate) > iou_threshold);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: (f64, f64, f64, f64), class_id: usize, score: f64) -> Detection {
        Detection {
            x1: b.0,
            y1: b.1,
            x2: b.2,
            y2: b.3,
            class_id,
            score,
            parts: (score, score, score),
        }
    }

    #[test]
    fn fuse_scores_examples() {
        assert_eq!(fuse_scores(1.0, 1.0, 1.0), 1.0);
        assert!((fuse_scores(0.8, 0.6, 0.49) - 0.343f64.sqrt()).abs() < 1e-12);
        assert_eq!(fuse_scores(0.9, 0.7, 0.0), 0.0);
    }

    #[test]
    fn fuse_scores_monotone_in_each_argument() {
        let base = fuse_scores(0.5, 0.5, 0.5);
        assert!(fuse_scores(0.6, 0.5, 0.5) >= base);
        assert!(fuse_scores(0.5, 0.6, 0.5) >= base);
        assert!(fuse_scores(0.5, 0.5, 0.6) >= base);
    }

    #[test]
    fn nms_keeps_highest_of_identical_pair()
    {
        let dets = vec![
            det((0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det((0.0, 0.0, 10.0, 10.0), 0, 0.8),
        ];
        let kept = nms(&dets, 0.6);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_and_cross_class() {
        let dets = vec![
            det((0.0, 0.0, 5.0, 5.0), 0, 0.9),
            det((20.0, 20.0, 30.0, 30.0), 0, 0.7),
            det((0.0, 0.0, 5.0, 5.0), 1, 0.5),
        ];
        assert_eq!(nms(&dets, 0.6).len(), 3);
    }

    #[test]
    fn nms_iou_below_threshold_keeps_both() {
        // (0,0,2,2) vs (1,1,3,3): inter 1, union 7 -> IoU 1/7 < 0.6
        let dets = vec![
            det((0.0, 0.0, 2.0, 2.0), 0, 0.9),
            det((1.0, 1.0, 3.0, 3.0), 0, 0.8),
        ];
        assert!((iou_det(&dets[0], &dets[1]) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(nms(&dets, 0.6).len(), 2);
    }

    #[test]
    fn nms_is_idempotent() {
        let dets = vec![
            det((0.0, 0.0, 4.0, 4.0), 0, 0.9),
            det((1.0, 0.0, 4.5, 4.0), 0, 0.85),
            det((10.0, 10.0, 14.0, 14.0), 1, 0.6),
            det((10.5, 10.0, 14.0, 14.5), 1, 0.55),
        ];
        let once = nms(&dets, 0.5);
        let twice = nms(&once, 0.5);
        assert_eq!(once, twice);
    }
}
