//! Flat key=value configuration with a documented schema.
//!
//! Every tunable of the model and the training loop lives here; unknown keys
//! are rejected with the full list of valid ones, and `dump` emits a file
//! that parses back to the identical config.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // model
    pub num_classes: usize,
    pub stem_channels: usize,
    pub backbone_channels: [usize; 4],
    pub fpn_channels: usize,
    pub roi_channels: usize,
    pub fc_hidden: usize,
    pub top_k: usize,
    pub eta: f64,
    pub m: usize,
    pub roi_loc_size: usize,
    pub roi_cls_size: usize,
    pub nms_iou: f64,
    pub gaussian_min_iou: f64,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_at: Vec<usize>,
    /// Global L2 gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub weight_tl_heatmap: f64,
    pub weight_tl_offset: f64,
    pub weight_scale: f64,
    pub weight_br_heatmap: f64,
    pub weight_br_offset: f64,
    pub weight_classification: f64,
    /// Proposals considered when mining training RoIs.
    pub train_top_k: usize,
    /// Cap on proposal-derived foreground RoIs per image.
    pub roi_fg_from_proposals: usize,
    /// IoU a proposal's vanilla box needs with a GT to count as foreground.
    pub roi_fg_iou: f64,
    /// Relative jitter applied to GT-derived RoI scales.
    pub roi_scale_jitter: f64,
    /// Images held out for validation (taken from the end of the dataset).
    pub val_count: usize,
    /// Validation images scored per epoch for the log (full set at the end).
    pub val_limit: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            num_classes: 2,
            stem_channels: 4,
            backbone_channels: [16, 32, 64, 64],
            fpn_channels: 24,
            roi_channels: 16,
            fc_hidden: 64,
            top_k: 128,
            eta: 0.25,
            m: 28,
            roi_loc_size: 14,
            roi_cls_size: 7,
            nms_iou: 0.6,
            gaussian_min_iou: 0.3,
            epochs: 12,
            batch_size: 8,
            lr: 0.005,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_at: vec![8, 11],
            grad_clip: 10.0,
            warmup_steps: 100,
            weight_tl_heatmap: 1.0,
            weight_tl_offset: 1.0,
            weight_scale: 1.0,
            weight_br_heatmap: 8.0,
            weight_br_offset: 2.0,
            weight_classification: 1.0,
            train_top_k: 64,
            roi_fg_from_proposals: 4,
            roi_fg_iou: 0.5,
            roi_scale_jitter: 0.1,
            val_count: 100,
            val_limit: 50,
            seed: 0,
        }
    }
}

/// (key, doc) pairs of the schema, in dump order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("num_classes", "number of foreground classes"),
    ("stem_channels", "channels of the full-resolution stem conv"),
    ("backbone_channels", "comma list of the four stage widths"),
    ("fpn_channels", "shared width of the pyramid levels"),
    ("roi_channels", "width of the stage-2 heads"),
    ("fc_hidden", "hidden units of the classification head"),
    ("top_k", "proposal keypoints extracted at inference"),
    ("eta", "RoI enlarge factor"),
    ("m", "side of the bottom-right instance heatmap"),
    ("roi_loc_size", "RoIAlign output for the localization branch"),
    ("roi_cls_size", "RoIAlign output for the classification branch"),
    ("nms_iou", "IoU threshold of class-wise NMS"),
    ("gaussian_min_iou", "min IoU preserved by the gaussian radius"),
    ("epochs", "training epochs"),
    ("batch_size", "images per SGD step"),
    ("lr", "initial learning rate"),
    ("momentum", "SGD momentum"),
    ("lr_decay_factor", "multiplier applied at each decay epoch"),
    ("lr_decay_at", "comma list of epochs where lr decays"),
    ("grad_clip", "global L2 gradient-norm ceiling; 0 disables"),
    ("warmup_steps", "steps of linear lr warmup"),
    ("weight_tl_heatmap", "loss weight"),
    ("weight_tl_offset", "loss weight"),
    ("weight_scale", "loss weight"),
    ("weight_br_heatmap", "loss weight"),
    ("weight_br_offset", "loss weight"),
    ("weight_classification", "loss weight"),
    ("train_top_k", "proposals mined per image during training"),
    ("roi_fg_from_proposals", "cap on proposal-derived foreground RoIs"),
    ("roi_fg_iou", "IoU for a proposal to match a ground-truth box"),
    ("roi_scale_jitter", "relative jitter on GT-derived RoI scales"),
    ("val_count", "images held out for validation"),
    ("val_limit", "validation images scored per epoch"),
    ("seed", "master seed; sub-streams derive from it"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{}`: cannot parse `{}`", key, value)))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse_num(key, part)).collect()
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "stem_channels" => self.stem_channels = parse_num(key, value)?,
            "backbone_channels" => {
                let list = parse_list(key, value)?;
                if list.len() != 4 {
                    return Err(Error::Config(format!(
                        "key `backbone_channels`: need 4 widths, got {}",
                        list.len()
                    )));
                }
                self.backbone_channels = [list[0], list[1], list[2], list[3]];
            }
            "fpn_channels" => self.fpn_channels = parse_num(key, value)?,
            "roi_channels" => self.roi_channels = parse_num(key, value)?,
            "fc_hidden" => self.fc_hidden = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "roi_loc_size" => self.roi_loc_size = parse_num(key, value)?,
            "roi_cls_size" => self.roi_cls_size = parse_num(key, value)?,
            "nms_iou" => self.nms_iou = parse_num(key, value)?,
            "gaussian_min_iou" => self.gaussian_min_iou = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_num(key, value)?,
            "lr_decay_at" => self.lr_decay_at = parse_list(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, value)?,
            "weight_tl_heatmap" => self.weight_tl_heatmap = parse_num(key, value)?,
            "weight_tl_offset" => self.weight_tl_offset = parse_num(key, value)?,
            "weight_scale" => self.weight_scale = parse_num(key, value)?,
            "weight_br_heatmap" => self.weight_br_heatmap = parse_num(key, value)?,
            "weight_br_offset" => self.weight_br_offset = parse_num(key, value)?,
            "weight_classification" => self.weight_classification = parse_num(key, value)?,
            "train_top_k" => self.train_top_k = parse_num(key, value)?,
            "roi_fg_from_proposals" => self.roi_fg_from_proposals = parse_num(key, value)?,
            "roi_fg_iou" => self.roi_fg_iou = parse_num(key, value)?,
            "roi_scale_jitter" => self.roi_scale_jitter = parse_num(key, value)?,
            "val_count" => self.val_count = parse_num(key, value)?,
            "val_limit" => self.val_limit = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => {
                let valid: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
                return Err(Error::Config(format!(
                    "unknown key `{}`; valid keys: {}",
                    key,
                    valid.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "num_classes" => self.num_classes.to_string(),
            "stem_channels" => self.stem_channels.to_string(),
            "backbone_channels" => self
                .backbone_channels
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "fpn_channels" => self.fpn_channels.to_string(),
            "roi_channels" => self.roi_channels.to_string(),
            "fc_hidden" => self.fc_hidden.to_string(),
            "top_k" => self.top_k.to_string(),
            "eta" => self.eta.to_string(),
            "m" => self.m.to_string(),
            "roi_loc_size" => self.roi_loc_size.to_string(),
            "roi_cls_size" => self.roi_cls_size.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "gaussian_min_iou" => self.gaussian_min_iou.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_at" => self
                .lr_decay_at
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "grad_clip" => self.grad_clip.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "weight_tl_heatmap" => self.weight_tl_heatmap.to_string(),
            "weight_tl_offset" => self.weight_tl_offset.to_string(),
            "weight_scale" => self.weight_scale.to_string(),
            "weight_br_heatmap" => self.weight_br_heatmap.to_string(),
            "weight_br_offset" => self.weight_br_offset.to_string(),
            "weight_classification" => self.weight_classification.to_string(),
            "train_top_k" => self.train_top_k.to_string(),
            "roi_fg_from_proposals" => self.roi_fg_from_proposals.to_string(),
            "roi_fg_iou" => self.roi_fg_iou.to_string(),
            "roi_scale_jitter" => self.roi_scale_jitter.to_string(),
            "val_count" => self.val_count.to_string(),
            "val_limit" => self.val_limit.to_string(),
            "seed" => self.seed.to_string(),
            _ => unreachable!("schema drift for key {key}"),
        }
    }

    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{}`", lineno + 1, raw))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Deterministic dump; `parse(dump(c)) == c`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            let _ = writeln!(out, "{} = {}  # {}", key, self.get(key), doc);
        }
        out
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            tl_heatmap: self.weight_tl_heatmap,
            tl_offset: self.weight_tl_offset,
            scale: self.weight_scale,
            br_heatmap: self.weight_br_heatmap,
            br_offset: self.weight_br_offset,
            classification: self.weight_classification,
        }
    }

    /// Learning rate at an epoch under the step decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_at.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parse_round_trip() {
        let mut cfg = Config::default();
        cfg.eta = 0.35;
        cfg.lr_decay_at = vec![3, 5];
        cfg.backbone_channels = [8, 16, 32, 32];
        let back = Config::parse(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_lists_valid_ones() {
        let mut cfg = Config::default();
        match cfg.set("learning_rate", "0.1") {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("unknown key `learning_rate`"));
                assert!(msg.contains("lr"));
                assert!(msg.contains("top_k"));
            }
            other => panic!("expected config error, got {:?}", other),
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let mut cfg = Config::default();
        cfg.lr = 0.02;
        cfg.lr_decay_at = vec![16, 22];
        assert_eq!(cfg.lr_at_epoch(0), 0.02);
        assert_eq!(cfg.lr_at_epoch(15), 0.02);
        assert!((cfg.lr_at_epoch(16) - 0.002).abs() < 1e-12);
        assert!((cfg.lr_at_epoch(22) - 0.0002).abs() < 1e-12);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = Config::default();
        assert!(cfg.set("epochs", "three").is_err());
        assert!(cfg.set("backbone_channels", "1,2,3").is_err());
    }
}
