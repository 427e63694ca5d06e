//! COCO-protocol average precision: greedy highest-IoU matching per class
//! and threshold, 101-point interpolated PR curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_det_gt, Detection, GroundTruthBox};

/// The standard threshold ladder 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Reported thresholds for the ap_at table.
pub const REPORT_THRESHOLDS: [f64; 6] = [0.5, 0.6, 0.7, 0.75, 0.8, 0.9];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean AP over classes and the threshold ladder.
    pub ap: f64,
    /// AP at selected thresholds, keyed e.g. "0.50".
    pub ap_at: BTreeMap<String, f64>,
    /// Mean AP over thresholds, per class.
    pub per_class: BTreeMap<usize, f64>,
}

impl EvalResult {
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.ap_at.get(&threshold_key(t)).copied()
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{:.2}", t)
}

/// AP of one class at one threshold via the 101-point interpolated curve.
///
/// `dets` are (image, score, box) sorted by descending score; `gts` maps an
/// image to its boxes of this class.
fn ap_single(
    dets: &[(u64, f64, (f64, f64, f64, f64))],
    gts: &BTreeMap<u64, Vec<GroundTruthBox>>,
    n_gt: usize,
    threshold: f64,
) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut matched: BTreeMap<u64, Vec<bool>> = gts
        .iter()
        .map(|(&img, v)| (img, vec![false; v.len()]))
        .collect();
    let mut tp = Vec::with_capacity(dets.len());
    for &(img, _, bbox) in dets {
        let mut best: Option<(usize, f64)> = None;
        if let Some(gt_list) = gts.get(&img) {
            let taken = matched.get(&img).unwrap();
            for (gi, gt) in gt_list.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = iou_det_gt(bbox, gt);
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched.get_mut(&img).unwrap()[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision envelope over the cumulative curve
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let mut cum_tp = 0usize;
    for (i, &hit) in tp.iter().enumerate() {
        if hit {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (i + 1) as f64);
        recalls.push(cum_tp as f64 / n_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    for r_idx in 0..=100 {
        let r = r_idx as f64 / 100.0;
        let p = recalls
            .iter()
            .position(|&rec| rec >= r - 1e-12)
            .map(|i| precisions[i])
            .unwrap_or(0.0);
        ap += p;
    }
    ap / 101.0
}

/// Evaluate detections against ground truth over the given IoU thresholds.
///
/// Classes are those present in the ground truth; detections of absent
/// classes count against nothing and classes without detections score 0.
pub fn evaluate_ap(
    dets: &[(u64, Vec<Detection>)],
    gts: &[(u64, Vec<GroundTruthBox>)],
    thresholds: &[f64],
) -> EvalResult {
    let mut classes: Vec<usize> = gts
        .iter()
        .flat_map(|(_, v)| v.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut ap_sum_at: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_class: BTreeMap<usize, f64> = BTreeMap::new();
    for &class in &classes {
        let mut class_gts: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
        let mut n_gt = 0usize;
        for (img, list) in gts {
            let subset: Vec<GroundTruthBox> =
                list.iter().filter(|g| g.class_id == class).cloned().collect();
            if !subset.is_empty() {
                n_gt += subset.len();
                class_gts.insert(*img, subset);
            }
        }
        let mut class_dets: Vec<(u64, f64, (f64, f64, f64, f64))> = Vec::new();
        for (img, list) in dets {
            for d in list.iter().filter(|d| d.class_id == class) {
                class_dets.push((*img, d.score, (d.x1, d.y1, d.x2, d.y2)));
            }
        }
        class_dets.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        let mut class_mean = 0.0;
        for &t in thresholds {
            let ap = ap_single(&class_dets, &class_gts, n_gt, t);
            *ap_sum_at.entry(threshold_key(t)).or_insert(0.0) += ap;
            class_mean += ap;
        }
        per_class.insert(class, class_mean / thresholds.len() as f64);
    }

    let n_classes = classes.len().max(1) as f64;
    let ap_at: BTreeMap<String, f64> = ap_sum_at
        .into_iter()
        .map(|(k, v)| (k, v / n_classes))
        .collect();
    let ap = if classes.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / n_classes
    };
    EvalResult { ap, ap_at, per_class }
}

/// Markdown table of the box-quality ladder.
pub fn markdown_table(result: &EvalResult) -> String {
    let cols = [0.5, 0.6, 0.7, 0.8, 0.9];
    let mut head = String::from("| AP |");
    let mut sep = String::from("|----|");
    let mut row = format!("| {:.3} |", result.ap);
    for t in cols {
        head.push_str(&format!(" AP{} |", (t * 100.0) as u32));
        sep.push_str("------|");
        row.push_str(&format!(" {:.3} |", result.ap_at(t).unwrap_or(0.0)));
    }
    format!("{}\n{}\n{}\n", head, sep, row)
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

    fn gt(b: (f64, f64, f64, f64), class_id: usize) -> GroundTruthBox {
        GroundTruthBox { x1: b.0, y1: b.1, x2: b.2, y2: b.3, class_id }
    }

    #[test]
    fn perfect_detection_scores_one_everywhere() {
        let gts = vec![(0u64, vec![gt((10.0, 10.0, 50.0, 60.0), 0)])];
        let dets = vec![(0u64, vec![det((10.0, 10.0, 50.0, 60.0), 0, 0.7)])];
        let r = evaluate_ap(&dets, &gts, &coco_thresholds());
        assert_eq!(r.ap, 1.0);
        for (_, v) in r.ap_at.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn threshold_gate_on_imperfect_box() {
        // IoU exactly 0.6: full AP at 0.5, zero at 0.75
        let g = gt((0.0, 0.0, 10.0, 10.0), 0);
        let d = det((0.0, 0.0, 10.0, 6.0), 0, 0.9); // IoU = 60/100 = 0.6
        let gts = vec![(0u64, vec![g])];
        let dets = vec![(0u64, vec![d])];
        let r = evaluate_ap(&dets, &gts, &[0.5, 0.75]);
        assert_eq!(r.ap_at(0.5), Some(1.0));
        assert_eq!(r.ap_at(0.75), Some(0.0));
        assert_eq!(r.ap, 0.5);
    }

    #[test]
    fn duplicate_detection_is_false_positive_but_ap_stays_one() {
        // hand-computed: PR points (r=1, p=1) then (r=1, p=0.5); the
        // 101-point envelope reads precision 1 at every recall
        let gts = vec![(0u64, vec![gt((0.0, 0.0, 10.0, 10.0), 0)])];
        let dets = vec![(0u64, vec![
            det((0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det((0.0, 0.0, 10.0, 10.0), 0, 0.8),
        ])];
        let r = evaluate_ap(&dets, &gts, &[0.5]);
        assert_eq!(r.ap_at(0.5), Some(1.0));
    }

    #[test]
    fn missed_gt_halves_recall() {
        let gts = vec![(0u64, vec![
            gt((0.0, 0.0, 10.0, 10.0), 0),
            gt((50.0, 50.0, 70.0, 70.0), 0),
        ])];
        let dets = vec![(0u64, vec![det((0.0, 0.0, 10.0, 10.0), 0, 0.9)])];
        let r = evaluate_ap(&dets, &gts, &[0.5]);
        // recall reaches 0.5 with precision 1: 51 of 101 points at 1.0
        assert!((r.ap_at(0.5).unwrap() - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn lowest_score_zero_iou_fp_never_increases_ap() {
        let gts = vec![(0u64, vec![gt((0.0, 0.0, 10.0, 10.0), 0)])];
        let clean = vec![(0u64, vec![det((0.0, 0.0, 10.0, 9.0), 0, 0.9)])];
        let with_fp = vec![(0u64, vec![
            det((0.0, 0.0, 10.0, 9.0), 0, 0.9),
            det((200.0, 200.0, 210.0, 210.0), 0, 0.01),
        ])];
        let thresholds = coco_thresholds();
        let a = evaluate_ap(&clean, &gts, &thresholds);
        let b = evaluate_ap(&with_fp, &gts, &thresholds);
        assert!(b.ap <= a.ap + 1e-12);
    }

    #[test]
    fn score_monotone_transform_invariance() {
        let gts = vec![
            (0u64, vec![gt((0.0, 0.0, 10.0, 10.0), 0), gt((30.0, 0.0, 44.0, 10.0), 1)]),
            (1u64, vec![gt((5.0, 5.0, 25.0, 25.0), 0)]),
        ];
        let dets = vec![
            (0u64, vec![
                det((0.0, 0.0, 10.0, 9.0), 0, 0.8),
                det((29.0, 0.0, 44.0, 10.0), 1, 0.6),
                det((2.0, 0.0, 12.0, 10.0), 0, 0.3),
            ]),
            (1u64, vec![det((5.0, 6.0, 25.0, 24.0), 0, 0.5)]),
        ];
        let squashed: Vec<(u64, Vec<Detection>)> = dets
            .iter()
            .map(|(img, v)| {
                (*img, v.iter().map(|d| {
                    let mut d = *d;
                    d.score = (d.score * 3.0).tanh(); // strictly monotone
                    d
                }).collect())
            })
            .collect();
        let thresholds = coco_thresholds();
        let a = evaluate_ap(&dets, &gts, &thresholds);
        let b = evaluate_ap(&squashed, &gts, &thresholds);
        assert!((a.ap - b.ap).abs() < 1e-12);
    }

    #[test]
    fn ap_at_non_increasing_in_threshold() {
        let gts = vec![(0u64, vec![gt((0.0, 0.0, 20.0, 20.0), 0)])];
        let dets = vec![(0u64, vec![det((1.0, 1.0, 20.0, 19.0), 0, 0.9)])];
        let r = evaluate_ap(&dets, &gts, &REPORT_THRESHOLDS);
        let vals: Vec<f64> = REPORT_THRESHOLDS.iter().map(|&t| r.ap_at(t).unwrap()).collect();
        for pair in vals.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }
}
