//! Training: stage-2 RoI assembly, the per-image loss graph, SGD with
//! momentum and the epoch loop with CSV logging and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use super::checkpoint::save_checkpoint;
use super::decode::{build_rois, collect_stage1_maps, detect, pad_image, top_proposal_peaks};
use super::net::Detector;
use super::params::ParamStore;
use crate::boxes::{iou_det_gt, Detection, GroundTruthBox, ProposalRoI};
use crate::config::Config;
use crate::corner::Rect;
use crate::data::eval::{coco_thresholds, evaluate_ap, EvalResult};
use crate::data::DatasetSample;
use crate::error::{Error, Result};
use crate::losses::{
    br_heatmap_bce, br_offset_loss, classification_loss, focal_heatmap_sum, scale_giou_sum,
    tl_offset_sum, total_loss, FocalParams, LossReport,
};
use crate::rng::{stream, stream_n};
use crate::tape::{Tape, Var};
use crate::targets::{
    assign_fpn_level, encode_instance, encode_stage1, GaussianSpec, PyramidConfig, Stage1Targets,
};
use crate::tensor::Tensor;

/// SGD with momentum over the parameter store.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Sgd {
        let velocity = (0..store.len())
            .map(|i| vec![0.0; store.tensor(super::params::ParamId(i)).numel()])
            .collect();
        Sgd { momentum, velocity }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        for (i, g) in grads.iter().enumerate() {
            let id = super::params::ParamId(i);
            let v = &mut self.velocity[i];
            let w = store.tensor_mut(id).data_mut();
            for j in 0..g.len() {
                v[j] = self.momentum * v[j] + g[j];
                w[j] -= lr * v[j];
            }
        }
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`.
fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Training/validation split; validation is the tail of the dataset.
pub struct TrainSet {
    pub train: Vec<DatasetSample>,
    pub val: Vec<DatasetSample>,
}

impl TrainSet {
    pub fn split(mut samples: Vec<DatasetSample>, val_count: usize) -> TrainSet {
        let val_count = val_count.min(samples.len());
        let val = samples.split_off(samples.len() - val_count);
        TrainSet { train: samples, val }
    }
}

struct TrainRoi {
    roi: ProposalRoI,
    /// Index of the matched ground-truth box; None for background.
    gt: Option<usize>,
}

/// Stage-2 training RoIs: jittered GT-corner RoIs plus matched proposals,
/// and background proposals at a 1:1 ratio for the classification head.
fn assemble_rois(
    gts: &[GroundTruthBox],
    proposals: &[ProposalRoI],
    cfg: &Config,
    pyramid: &PyramidConfig,
    rng: &mut impl Rng,
) -> Vec<TrainRoi> {
    let mut out: Vec<TrainRoi> = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let jitter = 1.0 + rng.gen_range(-cfg.roi_scale_jitter..=cfg.roi_scale_jitter);
        let z = gt.max_side() * jitter;
        out.push(TrainRoi {
            roi: ProposalRoI {
                x_tl: gt.x1,
                y_tl: gt.y1,
                z,
                z_e: (1.0 + cfg.eta) * z,
                s_tl: 0.5,
                level: assign_fpn_level(gt, pyramid),
            },
            gt: Some(gi),
        });
    }
    let mut fg_from_props = 0usize;
    let mut bg_candidates: Vec<ProposalRoI> = Vec::new();
    for p in proposals {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = iou_det_gt(p.vanilla_box(), gt);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= cfg.roi_fg_iou => {
                if fg_from_props < cfg.roi_fg_from_proposals {
                    out.push(TrainRoi { roi: *p, gt: Some(gi) });
                    fg_from_props += 1;
                }
            }
            _ => bg_candidates.push(*p),
        }
    }
    let n_bg = out.len().min(bg_candidates.len());
    for k in 0..n_bg {
        let j = rng.gen_range(k..bg_candidates.len());
        bg_candidates.swap(k, j);
    }
    out.extend(bg_candidates.into_iter().take(n_bg).map(|p| TrainRoi { roi: p, gt: None }));
    out
}

/// Forward + losses + backward for one image. Returns the term values and
/// per-parameter gradients.
fn image_loss(
    det: &Detector,
    store: &ParamStore,
    sample: &DatasetSample,
    tgts: &Stage1Targets,
    pyramid: &PyramidConfig,
    cfg: &Config,
    epoch: usize,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bind = store.attach(&mut tape, true);
    let img = tape.constant(pad_image(&sample.image, 128)?);
    let feats = det.backbone_fpn(&mut tape, &bind, img)?;
    let outs = det.stage1(&mut tape, &bind, &feats)?;

    let focal_params = FocalParams::default();
    let n_pos = tgts.n_pos.max(1) as f64;

    let mut focal_acc: Option<Var> = None;
    let mut off_acc: Option<Var> = None;
    let mut scale_acc: Option<Var> = None;
    for (o, lt) in outs.iter().zip(&tgts.levels) {
        let f = focal_heatmap_sum(&mut tape, o.heat, &lt.heatmap, &focal_params)?;
        focal_acc = Some(match focal_acc {
            Some(acc) => tape.add(acc, f)?,
            None => f,
        });
        if lt.pos_mask.sum() > 0.0 {
            let os = tl_offset_sum(&mut tape, o.offset, &lt.offset, &lt.pos_mask)?;
            off_acc = Some(match off_acc {
                Some(acc) => tape.add(acc, os)?,
                None => os,
            });
            let ss = scale_giou_sum(&mut tape, o.scale, &lt.scale, &lt.pos_mask)?;
            scale_acc = Some(match scale_acc {
                Some(acc) => tape.add(acc, ss)?,
                None => ss,
            });
        }
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    let tl_heat = tape.affine(focal_acc.unwrap_or(zero), 1.0 / n_pos, 0.0)?;
    let tl_off = tape.affine(off_acc.unwrap_or(zero), 1.0 / n_pos, 0.0)?;
    let scale = tape.affine(scale_acc.unwrap_or(zero), 1.0 / n_pos, 0.0)?;

    // mine proposals from the current predictions; coordinates carry no grad
    let maps = collect_stage1_maps(&tape, &outs);
    let peaks = top_proposal_peaks(&maps, cfg.train_top_k)?;
    let (proposals, _) = build_rois(&peaks, &maps, cfg.eta);
    let mut rng = stream_n(cfg.seed, "sampling", epoch as u64 * 1_000_003 + sample.image_id);
    let rois = assemble_rois(&sample.boxes, &proposals, cfg, pyramid, &mut rng);

    let gspec = GaussianSpec {
        min_iou: cfg.gaussian_min_iou,
        ..GaussianSpec::default()
    };
    let mut br_logit_vars: Vec<Var> = Vec::new();
    let mut br_off_vars: Vec<Var> = Vec::new();
    let mut br_heat_targets: Vec<Tensor> = Vec::new();
    let mut br_off_targets: Vec<f64> = Vec::new();
    let mut cls_vars: Vec<Var> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for troi in &rois {
        let label = match troi.gt {
            Some(gi) => {
                let enc = encode_instance(&troi.roi, &sample.boxes[gi], cfg.m, cfg.num_classes, &gspec)?;
                if enc.is_foreground {
                    let e = troi.roi.enlarged_box();
                    let (logits, off_map) = det.stage2_loc(
                        &mut tape,
                        &bind,
                        feats[troi.roi.level],
                        det.strides[troi.roi.level],
                        Rect::new(e.0, e.1, e.2, e.3),
                    )?;
                    // offset supervision reads the map at the target cell
                    let target_cell = enc
                        .br_heatmap
                        .data()
                        .iter()
                        .position(|&v| v == 1.0)
                        .unwrap_or(0);
                    let (row, col) = (target_cell / cfg.m, target_cell % cfg.m);
                    let off = tape.pick_cell(off_map, row, col)?;
                    br_logit_vars.push(logits);
                    br_off_vars.push(off);
                    br_heat_targets.push(enc.br_heatmap.clone());
                    br_off_targets.push(enc.br_offset.0);
                    br_off_targets.push(enc.br_offset.1);
                }
                enc.class_label
            }
            None => cfg.num_classes,
        };
        let v = troi.roi.vanilla_box();
        let cls = det.stage2_cls(
            &mut tape,
            &bind,
            feats[troi.roi.level],
            det.strides[troi.roi.level],
            Rect::new(v.0, v.1, v.2, v.3),
        )?;
        cls_vars.push(cls);
        labels.push(label);
    }

    let (br_heat, br_off) = if br_logit_vars.is_empty() {
        // no foreground RoI contained its corner this step
        (zero, zero)
    } else {
        let stacked = tape.stack(&br_logit_vars)?;
        let n = br_heat_targets.len();
        let m = cfg.m;
        let mut tdata = Vec::with_capacity(n * m * m);
        for t in &br_heat_targets {
            tdata.extend_from_slice(t.data());
        }
        let heat_target = Tensor::from_vec(&[n, 1, m, m], tdata)?;
        let bce = br_heatmap_bce(&mut tape, stacked, &heat_target)?;
        let off_stack = tape.stack(&br_off_vars)?;
        let off_target = Tensor::from_vec(&[n, 2], br_off_targets.clone())?;
        let off = br_offset_loss(&mut tape, off_stack, &off_target)?;
        (bce, off)
    };
    let cls = if cls_vars.is_empty() {
        zero
    } else {
        let stacked = tape.stack(&cls_vars)?;
        classification_loss(&mut tape, stacked, &labels)?
    };

    let w = cfg.loss_weights();
    let mut total = tape.affine(tl_heat, w.tl_heatmap, 0.0)?;
    for (term, weight) in [
        (tl_off, w.tl_offset),
        (scale, w.scale),
        (br_heat, w.br_heatmap),
        (br_off, w.br_offset),
        (cls, w.classification),
    ] {
        let scaled = tape.affine(term, weight, 0.0)?;
        total = tape.add(total, scaled)?;
    }

    let report = LossReport {
        tl_heatmap: tape.value(tl_heat).data()[0],
        tl_offset: tape.value(tl_off).data()[0],
        scale: tape.value(scale).data()[0],
        br_heatmap: tape.value(br_heat).data()[0],
        br_offset: tape.value(br_off).data()[0],
        classification: tape.value(cls).data()[0],
        total: 0.0,
    };
    let report = total_loss(report, &w)?; // rejects non-finite terms by name
    tape.backward(total)?;
    let grads = bind.gradients(&tape, store);
    Ok((report, grads))
}

/// One optimizer step over a batch of images. Gradients are averaged in
/// dataset order so runs are bit-reproducible regardless of thread timing.
#[allow(clippy::too_many_arguments)]
fn train_step(
    det: &Detector,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    batch: &[usize],
    samples: &[DatasetSample],
    targets: &[Stage1Targets],
    pyramids: &[PyramidConfig],
    cfg: &Config,
    epoch: usize,
    lr: f64,
) -> Result<Option<LossReport>> {
    let results: Vec<Result<(LossReport, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .map(|&idx| image_loss(det, store, &samples[idx], &targets[idx], &pyramids[idx], cfg, epoch))
        .collect();
    let mut acc_report = LossReport::default();
    let mut acc_grads: Option<Vec<Vec<f64>>> = None;
    for r in results {
        match r {
            Ok((report, grads)) => {
                acc_report.tl_heatmap += report.tl_heatmap;
                acc_report.tl_offset += report.tl_offset;
                acc_report.scale += report.scale;
                acc_report.br_heatmap += report.br_heatmap;
                acc_report.br_offset += report.br_offset;
                acc_report.classification += report.classification;
                acc_report.total += report.total;
                match &mut acc_grads {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                    None => acc_grads = Some(grads),
                }
            }
            Err(Error::NonFiniteLoss { term }) => {
                // abort the whole step; the caller logs the incident
                return Err(Error::NonFiniteLoss { term });
            }
            Err(e) => return Err(e),
        }
    }
    let n = batch.len() as f64;
    if let Some(mut grads) = acc_grads {
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v /= n;
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        sgd.step(store, &grads, lr);
        let scale = 1.0 / n;
        acc_report.tl_heatmap *= scale;
        acc_report.tl_offset *= scale;
        acc_report.scale *= scale;
        acc_report.br_heatmap *= scale;
        acc_report.br_offset *= scale;
        acc_report.classification *= scale;
        acc_report.total *= scale;
        Ok(Some(acc_report))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub final_eval: Option<EvalResult>,
    pub checkpoint_dir: PathBuf,
    pub csv_path: PathBuf,
    /// Steps skipped because a loss term went non-finite.
    pub incidents: usize,
}

pub const CSV_HEADER: &str =
    "epoch,lr,total,tl_heatmap,tl_offset,scale,br_heatmap,br_offset,classification,ap,ap50";

fn csv_row(row: &EpochRow) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_default();
    format!(
        "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
        row.epoch,
        row.lr,
        row.report.total,
        row.report.tl_heatmap,
        row.report.tl_offset,
        row.report.scale,
        row.report.br_heatmap,
        row.report.br_offset,
        row.report.classification,
        fmt_opt(row.ap),
        fmt_opt(row.ap50),
    )
}

/// Run detection over samples (in parallel) and score against their boxes.
pub fn evaluate_split(
    det: &Detector,
    store: &ParamStore,
    cfg: &Config,
    samples: &[DatasetSample],
) -> Result<EvalResult> {
    let dets: Vec<(u64, Vec<Detection>)> = samples
        .par_iter()
        .map(|s| detect(det, store, &s.image, cfg).map(|(d, _)| (s.image_id, d)))
        .collect::<Result<_>>()?;
    let gts: Vec<(u64, Vec<GroundTruthBox>)> = samples
        .iter()
        .map(|s| (s.image_id, s.boxes.clone()))
        .collect();
    Ok(evaluate_ap(&dets, &gts, &coco_thresholds()))
}

/// Full training run; deterministic given (config, data). Writes
/// `train_log.csv`, `config.txt`, `ckpt_last/` and `ckpt_final/` under
/// `out_dir`.
pub fn train(cfg: &Config, data: &TrainSet, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.dump())?;

    let mut store = ParamStore::new();
    let mut init_rng = stream(cfg.seed, "init");
    let det = Detector::new(cfg, &mut store, &mut init_rng);
    let mut sgd = Sgd::new(&store, cfg.momentum);

    let gspec = GaussianSpec {
        min_iou: cfg.gaussian_min_iou,
        ..GaussianSpec::default()
    };
    let mut pyramids = Vec::with_capacity(data.train.len());
    let mut targets = Vec::with_capacity(data.train.len());
    for s in &data.train {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let ph = h.div_ceil(128) * 128;
        let pw = w.div_ceil(128) * 128;
        let pyramid = PyramidConfig::standard(ph, pw);
        targets.push(encode_stage1(&s.boxes, &pyramid, &gspec)?);
        pyramids.push(pyramid);
    }

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut incidents = 0usize;
    let mut global_step = 0usize;
    let csv_path = out_dir.join("train_log.csv");
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut shuffle_rng = stream_n(cfg.seed, "shuffle", epoch as u64);
        for k in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=k);
            order.swap(k, j);
        }
        let mut epoch_report = LossReport::default();
        let mut steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let warm = if cfg.warmup_steps > 0 {
                ((global_step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            global_step += 1;
            let step_lr = lr * warm;
            match train_step(
                &det, &mut store, &mut sgd, batch, &data.train, &targets, &pyramids, cfg, epoch,
                step_lr,
            ) {
                Ok(Some(report)) => {
                    epoch_report.tl_heatmap += report.tl_heatmap;
                    epoch_report.tl_offset += report.tl_offset;
                    epoch_report.scale += report.scale;
                    epoch_report.br_heatmap += report.br_heatmap;
                    epoch_report.br_offset += report.br_offset;
                    epoch_report.classification += report.classification;
                    epoch_report.total += report.total;
                    steps += 1;
                }
                Ok(None) => {}
                Err(Error::NonFiniteLoss { term }) => {
                    incidents += 1;
                    eprintln!(
                        "epoch {}: skipped a step, non-finite loss term `{}`",
                        epoch, term
                    );
                }
                Err(e) => return Err(e),
            }
        }
        if steps > 0 {
            let s = 1.0 / steps as f64;
            epoch_report.tl_heatmap *= s;
            epoch_report.tl_offset *= s;
            epoch_report.scale *= s;
            epoch_report.br_heatmap *= s;
            epoch_report.br_offset *= s;
            epoch_report.classification *= s;
            epoch_report.total *= s;
        }
        let (ap, ap50) = if data.val.is_empty() || cfg.val_limit == 0 {
            (None, None)
        } else {
            let limit = cfg.val_limit.min(data.val.len());
            let result = evaluate_split(&det, &store, cfg, &data.val[..limit])?;
            (Some(result.ap), result.ap_at(0.5))
        };
        rows.push(EpochRow {
            epoch,
            lr,
            report: epoch_report,
            ap,
            ap50,
        });
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for row in &rows {
            let _ = writeln!(csv, "{}", csv_row(row));
        }
        fs::write(&csv_path, &csv)?;
        save_checkpoint(&out_dir.join("ckpt_last"), cfg, &store)?;
    }

    let checkpoint_dir = out_dir.join("ckpt_final");
    save_checkpoint(&checkpoint_dir, cfg, &store)?;
    let final_eval = if data.val.is_empty() {
        None
    } else {
        Some(evaluate_split(&det, &store, cfg, &data.val)?)
    };
    Ok(TrainOutcome {
        rows,
        final_eval,
        checkpoint_dir,
        csv_path,
        incidents,
    })
}
