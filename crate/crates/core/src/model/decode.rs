//! Inference decode: peaks -> RoIs -> per-RoI bottom-right corner and class.
//!
//! Each detection comes from exactly one proposal RoI; no cross-RoI corner
//! pairing exists anywhere in this path.

use super::net::{Detector, Stage1Out};
use super::params::ParamStore;
use crate::boxes::{fuse_scores, nms, Detection, ProposalRoI};
use crate::config::Config;
use crate::corner::{keypoint_peaks, Peak, Rect};
use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Zero-pad an image on the bottom/right so both sides divide `multiple`.
pub fn pad_image(image: &Tensor, multiple: usize) -> Result<Tensor> {
    image.expect_rank(3, "pad_image")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for i in 0..h {
            let src = &image.data()[ci * h * w + i * w..ci * h * w + (i + 1) * w];
            out.data_mut()[ci * ph * pw + i * pw..ci * ph * pw + i * pw + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Stage-1 maps pulled off a tape for decoding.
pub struct Stage1Maps {
    pub stride: usize,
    pub heat: Tensor,
    pub offset: Tensor,
    pub scale: Tensor,
}

pub fn collect_stage1_maps(tape: &Tape, outs: &[Stage1Out]) -> Vec<Stage1Maps> {
    outs.iter()
        .map(|o| Stage1Maps {
            stride: o.stride,
            heat: tape.value(o.heat).clone(),
            offset: tape.value(o.offset).clone(),
            scale: tape.value(o.scale).clone(),
        })
        .collect()
}

/// Per-level peak extraction followed by a global top-k merge across levels.
pub fn top_proposal_peaks(maps: &[Stage1Maps], k: usize) -> Result<Vec<(usize, Peak)>> {
    let mut all: Vec<(usize, Peak)> = Vec::new();
    for (level, m) in maps.iter().enumerate() {
        for p in keypoint_peaks(&m.heat, k)? {
            all.push((level, p));
        }
    }
    all.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| (a.1.row, a.1.col).cmp(&(b.1.row, b.1.col)))
    });
    all.truncate(k);
    Ok(all)
}

/// Turn peaks into proposal RoIs by reading the offset and scale maps at the
/// peak cells. RoIs with a non-positive or non-finite scale are dropped and
/// counted. Coordinates are never clipped to the image.
pub fn build_rois(
    peaks: &[(usize, Peak)],
    maps: &[Stage1Maps],
    eta: f64,
) -> (Vec<ProposalRoI>, usize) {
    let mut rois = Vec::with_capacity(peaks.len());
    let mut dropped = 0usize;
    for &(level, p) in peaks {
        let m = &maps[level];
        let s = m.stride as f64;
        let dx = m.offset.at(&[0, p.row, p.col]);
        let dy = m.offset.at(&[1, p.row, p.col]);
        let z = m.scale.at(&[0, p.row, p.col]);
        if !(z.is_finite() && z > 0.0) {
            dropped += 1;
            continue;
        }
        rois.push(ProposalRoI {
            x_tl: (p.col as f64 + dx) * s,
            y_tl: (p.row as f64 + dy) * s,
            z,
            z_e: (1.0 + eta) * z,
            s_tl: p.score,
            level,
        });
    }
    (rois, dropped)
}

/// Bottom-right corner in image pixels from a heatmap peak and the offset
/// pair: (cell + offset) * z_e / m + top-left.
pub fn decode_bottom_right(peak: &Peak, offset: (f64, f64), roi: &ProposalRoI, m: usize) -> (f64, f64) {
    let f = roi.z_e / m as f64;
    (
        (peak.col as f64 + offset.0) * f + roi.x_tl,
        (peak.row as f64 + offset.1) * f + roi.y_tl,
    )
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DetectStats {
    /// RoIs fed into stage 2.
    pub rois: usize,
    /// Detections before NMS (always <= rois).
    pub pre_nms: usize,
    pub dropped_scale: usize,
    pub dropped_background: usize,
    pub dropped_inverted: usize,
}

/// Full inference on one image with trained weights.
pub fn detect(
    det: &Detector,
    store: &ParamStore,
    image: &Tensor,
    cfg: &Config,
) -> Result<(Vec<Detection>, DetectStats)> {
    let padded = pad_image(image, 128)?;
    let mut tape = Tape::inference();
    let bind = store.attach(&mut tape, false);
    let img = tape.constant(padded);
    let feats = det.backbone_fpn(&mut tape, &bind, img)?;
    let outs = det.stage1(&mut tape, &bind, &feats)?;
    let maps = collect_stage1_maps(&tape, &outs);
    let peaks = top_proposal_peaks(&maps, cfg.top_k)?;
    let (rois, dropped_scale) = build_rois(&peaks, &maps, cfg.eta);

    let mut stats = DetectStats {
        rois: rois.len(),
        dropped_scale,
        ..DetectStats::default()
    };
    let m = det.br_heatmap_side();
    let mut dets: Vec<Detection> = Vec::new();
    for roi in &rois {
        let e = roi.enlarged_box();
        let v = roi.vanilla_box();
        let (br_logits, off_map) = det.stage2_loc(
            &mut tape,
            &bind,
            feats[roi.level],
            maps[roi.level].stride,
            Rect::new(e.0, e.1, e.2, e.3),
        )?;
        let heat = {
            let mut t = Tape::inference();
            let lv = t.constant(tape.value(br_logits).clone());
            let s = t.sigmoid(lv)?;
            t.value(s).clone()
        };
        let peak = keypoint_peaks(&heat, 1)?[0];
        let off = tape.pick_cell(off_map, peak.row, peak.col)?;
        let offset = (tape.value(off).data()[0], tape.value(off).data()[1]);
        let (x_br, y_br) = decode_bottom_right(&peak, offset, roi, m);

        let logits = det.stage2_cls(
            &mut tape,
            &bind,
            feats[roi.level],
            maps[roi.level].stride,
            Rect::new(v.0, v.1, v.2, v.3),
        )?;
        let ld = tape.value(logits).data();
        let (argmax, s_cls) = softmax_argmax(ld);
        if argmax == det.num_classes() {
            stats.dropped_background += 1;
            continue;
        }
        if x_br < roi.x_tl || y_br < roi.y_tl {
            stats.dropped_inverted += 1;
            continue;
        }
        dets.push(Detection {
            x1: roi.x_tl,
            y1: roi.y_tl,
            x2: x_br,
            y2: y_br,
            class_id: argmax,
            score: fuse_scores(roi.s_tl, peak.score, s_cls),
            parts: (roi.s_tl, peak.score, s_cls),
        });
    }
    stats.pre_nms = dets.len();
    debug_assert!(stats.pre_nms <= stats.rois);
    Ok((nms(&dets, cfg.nms_iou), stats))
}

/// Softmax argmax and the winning probability; first index wins ties.
fn softmax_argmax(logits: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best];
    let denom: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    (best, 1.0 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_image_to_multiple() {
        let img = Tensor::filled(&[3, 200, 260], 1.0);
        let p = pad_image(&img, 128).unwrap();
        assert_eq!(p.shape(), &[3, 256, 384]);
        assert_eq!(p.at(&[0, 100, 100]), 1.0);
        assert_eq!(p.at(&[0, 220, 300]), 0.0);
    }

    #[test]
    fn decode_example_values() {
        let roi = ProposalRoI {
            x_tl: 100.0,
            y_tl: 40.0,
            z: 44.8,
            z_e: 56.0,
            s_tl: 0.5,
            level: 0,
        };
        let peak = Peak { row: 7, col: 14, score: 0.9 };
        let (x, y) = decode_bottom_right(&peak, (0.5, 0.25), &roi, 28);
        assert!((x - 129.0).abs() < 1e-12);
        assert!((y - (7.25 * 2.0 + 40.0)).abs() < 1e-12);
        // origin peak with zero offset lands on the top-left corner
        let origin = Peak { row: 0, col: 0, score: 0.9 };
        let (x0, y0) = decode_bottom_right(&origin, (0.0, 0.0), &roi, 28);
        assert_eq!((x0, y0), (roi.x_tl, roi.y_tl));
    }

    #[test]
    fn encode_decode_round_trip() {
        // composing the instance encode with the decode recovers the corner
        use crate::boxes::GroundTruthBox;
        use crate::targets::{encode_instance, GaussianSpec};
        let roi = ProposalRoI {
            x_tl: 31.7,
            y_tl: 55.2,
            z: 80.0,
            z_e: 100.0,
            s_tl: 0.5,
            level: 1,
        };
        let gt = GroundTruthBox::new(40.0, 60.0, 103.664, 139.77, 0).unwrap();
        let t = encode_instance(&roi, &gt, 28, 2, &GaussianSpec::default()).unwrap();
        assert!(t.is_foreground);
        let x_h = (gt.x2 - roi.x_tl) * 28.0 / roi.z_e;
        let y_h = (gt.y2 - roi.y_tl) * 28.0 / roi.z_e;
        let peak = Peak {
            row: y_h.floor() as usize,
            col: x_h.floor() as usize,
            score: 1.0,
        };
        let (x, y) = decode_bottom_right(&peak, t.br_offset, &roi, 28);
        assert!((x - gt.x2).abs() < 1e-9);
        assert!((y - gt.y2).abs() < 1e-9);
    }

    #[test]
    fn build_rois_stride_arithmetic() {
        let maps = vec![Stage1Maps {
            stride: 8,
            heat: Tensor::filled(&[1, 4, 5], 0.5),
            offset: Tensor::zeros(&[2, 4, 5]),
            scale: Tensor::filled(&[1, 4, 5], 80.0),
        }];
        let peaks = vec![(0usize, Peak { row: 3, col: 4, score: 0.5 })];
        let (rois, dropped) = build_rois(&peaks, &maps, 0.25);
        assert_eq!(dropped, 0);
        assert_eq!(rois.len(), 1);
        assert_eq!((rois[0].x_tl, rois[0].y_tl), (32.0, 24.0));
        assert_eq!(rois[0].z_e, 100.0);
        // eta = 0 keeps the scale
        let (rois0, _) = build_rois(&peaks, &maps, 0.0);
        assert_eq!(rois0[0].z_e, rois0[0].z);
    }
}
