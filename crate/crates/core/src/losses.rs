//! Training objectives: distance-penalized focal loss for the top-left
//! heatmap, smooth-L1 offset losses, shared-anchor GIoU scale loss, per-RoI
//! bottom-right BCE, classification cross-entropy and the weighted combiner.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Exponents of the heatmap focal loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    /// Hard/easy sample exponent.
    pub alpha: f64,
    /// Distance-aware penalty exponent on (1 - target).
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 2.0, beta: 4.0 }
    }
}

/// Predictions are clamped into [EPS, 1-EPS] before logs.
pub const PROB_EPS: f64 = 1e-12;

/// Per-term weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tl_heatmap: f64,
    pub tl_offset: f64,
    pub scale: f64,
    pub br_heatmap: f64,
    pub br_offset: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tl_heatmap: 1.0,
            tl_offset: 1.0,
            scale: 1.0,
            br_heatmap: 1.0,
            br_offset: 1.0,
            classification: 1.0,
        }
    }
}

/// The six term values plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub tl_heatmap: f64,
    pub tl_offset: f64,
    pub scale: f64,
    pub br_heatmap: f64,
    pub br_offset: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("tl_heatmap", self.tl_heatmap),
            ("tl_offset", self.tl_offset),
            ("scale", self.scale),
            ("br_heatmap", self.br_heatmap),
            ("br_offset", self.br_offset),
            ("classification", self.classification),
        ]
    }
}

/// Weighted sum of the six terms. Rejects non-finite terms, naming the
/// offender so the training step can be aborted.
pub fn total_loss(mut report: LossReport, weights: &LossWeights) -> Result<LossReport> {
    for (name, value) in report.terms() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term: name.to_string() });
        }
    }
    report.total = weights.tl_heatmap * report.tl_heatmap
        + weights.tl_offset * report.tl_offset
        + weights.scale * report.scale
        + weights.br_heatmap * report.br_heatmap
        + weights.br_offset * report.br_offset
        + weights.classification * report.classification;
    Ok(report)
}

/// Unnormalized focal sum over one heatmap; positives are target == 1 cells.
///
/// Positive cells contribute -(1-p)^alpha ln p, every other cell
/// -(1-t)^beta p^alpha ln(1-p).
pub fn focal_heatmap_sum(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    params: &FocalParams,
) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::shape(
            "focal_heatmap_loss",
            format!("{:?} vs {:?}", tape.value(pred).shape(), target.shape()),
        ));
    }
    let n = target.numel();
    let mut pos_mask = vec![0.0f64; n];
    let mut neg_w = vec![0.0f64; n];
    for (i, &t) in target.data().iter().enumerate() {
        if t == 1.0 {
            pos_mask[i] = 1.0;
        } else {
            neg_w[i] = (1.0 - t).powf(params.beta);
        }
    }
    let pos_mask = tape.constant(Tensor::from_vec(target.shape(), pos_mask)?);
    let neg_w = tape.constant(Tensor::from_vec(target.shape(), neg_w)?);

    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;

    // positives: (1-p)^alpha * ln p
    let pos_pow = tape.powf(one_minus_p, params.alpha)?;
    let ln_p = tape.ln(p)?;
    let pos_term = tape.mul(pos_pow, ln_p)?;
    let pos_term = tape.mul(pos_term, pos_mask)?;

    // negatives: (1-t)^beta * p^alpha * ln(1-p)
    let p_pow = tape.powf(p, params.alpha)?;
    let ln_1p = tape.ln(one_minus_p)?;
    let neg_term = tape.mul(p_pow, ln_1p)?;
    let neg_term = tape.mul(neg_term, neg_w)?;

    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both)?;
    tape.affine(total, -1.0, 0.0)
}

/// Class-agnostic focal loss with the distance-aware penalty, divided by the
/// positive count.
pub fn focal_heatmap_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    n_pos: usize,
    params: &FocalParams,
) -> Result<Var> {
    if n_pos == 0 {
        return Err(Error::NoPositives { op: "focal_heatmap_loss" });
    }
    let s = focal_heatmap_sum(tape, pred, target, params)?;
    tape.affine(s, 1.0 / n_pos as f64, 0.0)
}

/// Elementwise smooth-L1 with the transition at 1: 0.5 d^2 for |d| < 1,
/// |d| - 0.5 beyond.
pub fn smooth_l1_map(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", tape.value(pred).shape(), target.shape()),
        ));
    }
    let n = target.numel();
    let td = target.data().to_vec();
    let out: Vec<f64> = tape
        .value(pred)
        .data()
        .iter()
        .zip(&td)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .collect();
    let value = Tensor::from_vec(target.shape(), out)?;
    let need = tape.wants_grad(pred);
    let pv = pred;
    tape.push_op(value, need, move |vals, og, grads| {
        let pd = vals[pv.0].data();
        let g = grads.acc(pv.0, n);
        for i in 0..n {
            let d = pd[i] - td[i];
            let slope = if d.abs() < 1.0 { d } else { d.signum() };
            g[i] += og[i] * slope;
        }
    })
}

/// Smooth-L1 offset loss over positive cells of a [2,h,w] map, divided by
/// the positive count.
pub fn tl_offset_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pos_mask: &Tensor,
) -> Result<Var> {
    let n_pos = pos_mask.data().iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 {
        return Err(Error::NoPositives { op: "tl_offset_loss" });
    }
    let s = tl_offset_sum(tape, pred, target, pos_mask)?;
    tape.affine(s, 1.0 / n_pos as f64, 0.0)
}

/// Unnormalized smooth-L1 sum over positive cells and both offset channels.
pub fn tl_offset_sum(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pos_mask: &Tensor,
) -> Result<Var> {
    tape.value(pred).expect_rank(3, "tl_offset_loss")?;
    if tape.value(pred).shape()[0] != 2 {
        return Err(Error::shape(
            "tl_offset_loss",
            format!("expected [2,h,w], got {:?}", tape.value(pred).shape()),
        ));
    }
    let (h, w) = (target.shape()[1], target.shape()[2]);
    let mut mask2 = vec![0.0f64; 2 * h * w];
    for i in 0..h * w {
        mask2[i] = pos_mask.data()[i];
        mask2[h * w + i] = pos_mask.data()[i];
    }
    let mask2 = tape.constant(Tensor::from_vec(&[2, h, w], mask2)?);
    let sl1 = smooth_l1_map(tape, pred, target)?;
    let masked = tape.mul(sl1, mask2)?;
    tape.sum(masked)
}

/// Shared-anchor GIoU penalty map: both scales make squares anchored at the
/// ground-truth top-left corner, so GIoU reduces to (min/max)^2 and the
/// penalty is 1 - (min/max)^2 per cell. Targets must be positive wherever
/// the mask will select them.
pub fn giou_penalty_map(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.value(pred).shape() != target.shape() {
        return Err(Error::shape(
            "scale_giou_loss",
            format!("{:?} vs {:?}", tape.value(pred).shape(), target.shape()),
        ));
    }
    let n = target.numel();
    let td = target.data().to_vec();
    let pd = tape.value(pred).data();
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let (z, t) = (pd[i], td[i]);
        if t <= 0.0 {
            continue; // unsupervised cell; mask must be zero here
        }
        if z <= 0.0 {
            return Err(Error::domain(
                "scale_giou_loss",
                format!("non-positive predicted scale {} at cell {}", z, i),
            ));
        }
        let r = if z < t { z / t } else { t / z };
        out[i] = 1.0 - r * r;
    }
    let value = Tensor::from_vec(target.shape(), out)?;
    let need = tape.wants_grad(pred);
    let pv = pred;
    tape.push_op(value, need, move |vals, og, grads| {
        let pd = vals[pv.0].data();
        let g = grads.acc(pv.0, n);
        for i in 0..n {
            let (z, t) = (pd[i], td[i]);
            if t <= 0.0 {
                continue;
            }
            // d/dz of (min/max)^2
            let dr = if z < t { 2.0 * z / (t * t) } else { -2.0 * t * t / (z * z * z) };
            g[i] += og[i] * (-dr);
        }
    })
}

/// Scale loss: mean shared-anchor GIoU penalty over positive cells.
pub fn scale_giou_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pos_mask: &Tensor,
) -> Result<Var> {
    let n_pos = pos_mask.data().iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 {
        return Err(Error::NoPositives { op: "scale_giou_loss" });
    }
    for (i, (&t, &m)) in target.data().iter().zip(pos_mask.data()).enumerate() {
        if m == 1.0 && t <= 0.0 {
            return Err(Error::domain(
                "scale_giou_loss",
                format!("non-positive target scale {} at positive cell {}", t, i),
            ));
        }
    }
    let s = scale_giou_sum(tape, pred, target, pos_mask)?;
    tape.affine(s, 1.0 / n_pos as f64, 0.0)
}

/// Unnormalized shared-anchor GIoU penalty sum over positive cells.
pub fn scale_giou_sum(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pos_mask: &Tensor,
) -> Result<Var> {
    let map = giou_penalty_map(tape, pred, target)?;
    let mask = tape.constant(pos_mask.clone());
    let masked = tape.mul(map, mask)?;
    tape.sum(masked)
}

/// Numerically stable elementwise binary cross-entropy on logits:
/// max(x,0) - x t + ln(1 + exp(-|x|)).
pub fn bce_with_logits_map(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    if tape.value(logits).shape() != target.shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!("{:?} vs {:?}", tape.value(logits).shape(), target.shape()),
        ));
    }
    let n = target.numel();
    let td = target.data().to_vec();
    let out: Vec<f64> = tape
        .value(logits)
        .data()
        .iter()
        .zip(&td)
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .collect();
    let value = Tensor::from_vec(target.shape(), out)?;
    let need = tape.wants_grad(logits);
    let lv = logits;
    tape.push_op(value, need, move |vals, og, grads| {
        let xd = vals[lv.0].data();
        let g = grads.acc(lv.0, n);
        for i in 0..n {
            let s = 1.0 / (1.0 + (-xd[i]).exp());
            g[i] += og[i] * (s - td[i]);
        }
    })
}

/// Bottom-right heatmap BCE over a stack of foreground RoIs, normalized by
/// N_fb * m^2. `pred_logits` is [N,1,m,m]; `targets` matches.
pub fn br_heatmap_bce(tape: &mut Tape, pred_logits: Var, targets: &Tensor) -> Result<Var> {
    let shape = tape.value(pred_logits).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] {
        return Err(Error::shape(
            "br_heatmap_bce",
            format!("expected [N,1,m,m], got {:?}", shape),
        ));
    }
    let n_fb = shape[0];
    if n_fb == 0 {
        return Err(Error::EmptyBatch { op: "br_heatmap_bce" });
    }
    let m = shape[2];
    let map = bce_with_logits_map(tape, pred_logits, targets)?;
    let s = tape.sum(map)?;
    tape.affine(s, 1.0 / (n_fb * m * m) as f64, 0.0)
}

/// Smooth-L1 on per-RoI offset pairs [N,2], averaged over the N_b foreground
/// RoIs that carry offset supervision.
pub fn br_offset_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape(
            "br_offset_loss",
            format!("expected [N,2], got {:?}", shape),
        ));
    }
    let n_b = shape[0];
    if n_b == 0 {
        return Err(Error::EmptyBatch { op: "br_offset_loss" });
    }
    let sl1 = smooth_l1_map(tape, pred, target)?;
    let s = tape.sum(sl1)?;
    tape.affine(s, 1.0 / n_b as f64, 0.0)
}

/// Mean softmax cross-entropy over sampled RoIs. `logits` is [N, C+1];
/// labels lie in [0, C] with C the background class.
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(
            "classification_loss",
            format!("expected [N,C], got {:?}", shape),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch { op: "classification_loss" });
    }
    if labels.len() != n {
        return Err(Error::shape(
            "classification_loss",
            format!("{} logit rows vs {} labels", n, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::domain(
            "classification_loss",
            format!("label {} out of range [0, {})", bad, c),
        ));
    }
    let ld = tape.value(logits).data();
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let r = &ld[row * c..(row + 1) * c];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - r[label];
    }
    let value = Tensor::scalar(total / n as f64);
    let need = tape.wants_grad(logits);
    let labels: Vec<usize> = labels.to_vec();
    let lv = logits;
    tape.push_op(value, need, move |vals, og, grads| {
        let ld = vals[lv.0].data();
        let g = grads.acc(lv.0, n * c);
        let scale = og[0] / n as f64;
        for (row, &label) in labels.iter().enumerate() {
            let r = &ld[row * c..(row + 1) * c];
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = r.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                let soft = (r[j] - max).exp() / denom;
                let hot = if j == label { 1.0 } else { 0.0 };
                g[row * c + j] += scale * (soft - hot);
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn scalar_focal(p: f64, t: f64, n_pos: usize) -> f64 {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::scalar(p).with_grad());
        let target = Tensor::scalar(t);
        let loss = focal_heatmap_loss(&mut tape, pred, &target, n_pos, &FocalParams::default()).unwrap();
        tape.value(loss).data()[0]
    }

    #[test]
    fn focal_exact_positive_gives_zero() {
        assert!(scalar_focal(1.0 - 1e-13, 1.0, 1).abs() < 1e-10);
    }

    #[test]
    fn focal_positive_half_confidence() {
        // -(1 - 0.5)^2 ln 0.5 = 0.25 ln 2
        assert!((scalar_focal(0.5, 1.0, 1) - 0.25 * LN2).abs() < 1e-12);
    }

    #[test]
    fn focal_negative_cells() {
        // pure negative: (1-0)^4 (0.5)^2 (-ln 0.5) = 0.25 ln 2
        assert!((scalar_focal(0.5, 0.0, 1) - 0.25 * LN2).abs() < 1e-12);
        // gaussian-penalized negative: (1-0.5)^4 * 0.25 ln 2
        assert!((scalar_focal(0.5, 0.5, 1) - 0.0625 * 0.25 * LN2).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_zero_positives() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::scalar(0.5));
        let target = Tensor::scalar(0.0);
        assert!(matches!(
            focal_heatmap_loss(&mut tape, pred, &target, 0, &FocalParams::default()),
            Err(Error::NoPositives { .. })
        ));
    }

    #[test]
    fn focal_reduces_to_alpha_focal_when_gaussians_cleared() {
        // with all gaussian cells zeroed, the beta term is 1 at pure negatives
        let mut tape = Tape::new();
        let pred_t = Tensor::from_vec(&[1, 2, 2], vec![0.3, 0.6, 0.2, 0.9]).unwrap();
        let pred = tape.leaf(pred_t.clone());
        let target = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let params = FocalParams { alpha: 2.0, beta: 7.3 };
        let l = focal_heatmap_loss(&mut tape, pred, &target, 1, &params).unwrap();
        let expect = -(1.0f64 - 0.3).powi(2) * 0.3f64.ln()
            - 0.6f64.powi(2) * (1.0f64 - 0.6).ln()
            - 0.2f64.powi(2) * (1.0f64 - 0.2).ln()
            - 0.9f64.powi(2) * (1.0f64 - 0.9).ln();
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
    }

    fn offset_scalar(errs: &[(f64, f64)]) -> f64 {
        let n = errs.len();
        let mut pred_data = Vec::new();
        let mut tgt_data = Vec::new();
        for &(dx, _) in errs {
            pred_data.push(dx);
            tgt_data.push(0.0);
        }
        for &(_, dy) in errs {
            pred_data.push(dy);
            tgt_data.push(0.0);
        }
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::from_vec(&[2, 1, n], pred_data).unwrap().with_grad());
        let target = Tensor::from_vec(&[2, 1, n], tgt_data).unwrap();
        let mask = Tensor::filled(&[1, 1, n], 1.0);
        let l = tl_offset_loss(&mut tape, pred, &target, &mask).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn offset_loss_piecewise_values() {
        assert_eq!(offset_scalar(&[(0.0, 0.0)]), 0.0);
        // error (0.5, 0): 0.5 * 0.25 = 0.125
        assert!((offset_scalar(&[(0.5, 0.0)]) - 0.125).abs() < 1e-12);
        // error (2, 0): 2 - 0.5 = 1.5
        assert!((offset_scalar(&[(2.0, 0.0)]) - 1.5).abs() < 1e-12);
    }

    fn giou_scalar(z: f64, t: f64) -> f64 {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::scalar(z).with_grad());
        let target = Tensor::scalar(t);
        let mask = Tensor::scalar(1.0);
        let l = scale_giou_loss(&mut tape, pred, &target, &mask).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn giou_values_and_symmetry() {
        assert_eq!(giou_scalar(2.0, 2.0), 0.0);
        assert!((giou_scalar(1.0, 2.0) - 0.75).abs() < 1e-12);
        assert_eq!(giou_scalar(1.0, 2.0), giou_scalar(2.0, 1.0));
        // invariant under joint scaling
        assert!((giou_scalar(3.0, 7.0) - giou_scalar(0.3, 0.7)).abs() < 1e-12);
    }

    #[test]
    fn giou_rejects_non_positive_target() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::scalar(1.0));
        assert!(scale_giou_loss(&mut tape, pred, &Tensor::scalar(0.0), &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn bce_saturated_logits_give_zero() {
        let mut tape = Tape::new();
        let mut logits = Tensor::filled(&[1, 1, 4, 4], -30.0);
        logits.data_mut()[5] = 30.0;
        let mut target = Tensor::zeros(&[1, 1, 4, 4]);
        target.data_mut()[5] = 1.0;
        let lv = tape.leaf(logits.with_grad());
        let l = br_heatmap_bce(&mut tape, lv, &target).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-8);
    }

    #[test]
    fn bce_uniform_half_against_zero_target_is_ln2_per_cell() {
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]).with_grad());
        let target = Tensor::zeros(&[1, 1, 3, 3]);
        let l = br_heatmap_bce(&mut tape, lv, &target).unwrap();
        assert!((tape.value(l).data()[0] - LN2).abs() < 1e-12);
    }

    #[test]
    fn br_offset_examples() {
        let run = |pred: Vec<f64>, tgt: Vec<f64>, n: usize| {
            let mut tape = Tape::new();
            let p = tape.leaf(Tensor::from_vec(&[n, 2], pred).unwrap().with_grad());
            let t = Tensor::from_vec(&[n, 2], tgt).unwrap();
            let l = br_offset_loss(&mut tape, p, &t).unwrap();
            tape.value(l).data()[0]
        };
        assert_eq!(run(vec![0.2, 0.7], vec![0.2, 0.7], 1), 0.0);
        // error (0.3, 0.4): 0.5 (0.09 + 0.16) = 0.125
        assert!((run(vec![0.3, 0.4], vec![0.0, 0.0], 1) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn classification_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]).with_grad());
        let l = classification_loss(&mut tape, logits, &[0, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_saturated_correct_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(
            Tensor::from_vec(&[1, 3], vec![40.0, 0.0, 0.0]).unwrap().with_grad(),
        );
        let l = classification_loss(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn classification_permutation_symmetric() {
        let rows = vec![0.3, -0.7, 1.2, 0.5, 0.1, -0.2];
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], rows.clone()).unwrap());
        let la = classification_loss(&mut tape, a, &[1, 0]).unwrap();
        // swap columns 0 and 1, and relabel accordingly
        let swapped = vec![-0.7, 0.3, 1.2, 0.1, 0.5, -0.2];
        let b = tape.leaf(Tensor::from_vec(&[2, 3], swapped).unwrap());
        let lb = classification_loss(&mut tape, b, &[0, 1]).unwrap();
        assert!((tape.value(la).data()[0] - tape.value(lb).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn classification_rejects_empty_and_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(classification_loss(&mut tape, logits, &[0, 3]).is_err());
    }

    #[test]
    fn total_loss_combines_and_rejects_non_finite() {
        let report = LossReport {
            tl_heatmap: 1.0,
            tl_offset: 2.0,
            scale: 3.0,
            br_heatmap: 4.0,
            br_offset: 5.0,
            classification: 6.0,
            total: 0.0,
        };
        let w = LossWeights::default();
        assert_eq!(total_loss(report, &w).unwrap().total, 21.0);
        let mut w2 = w;
        w2.scale = 2.0;
        assert_eq!(total_loss(report, &w2).unwrap().total, 24.0);
        let mut bad = report;
        bad.br_offset = f64::NAN;
        match total_loss(bad, &w) {
            Err(Error::NonFiniteLoss { term }) => assert_eq!(term, "br_offset"),
            other => panic!("expected non-finite rejection, got {:?}", other),
        }
        let zero = total_loss(LossReport::default(), &w).unwrap();
        assert_eq!(zero.total, 0.0);
    }
}
