//! Network definition: stem + four stages, lateral FPN with P6/P7 extras,
//! shared stage-1 corner heads and the two stage-2 RoI branches.
//!
//! Downsampling uses 2x2 max pooling after stride-1 convolutions: the conv
//! contract requires exact output extents, which stride-2 odd kernels cannot
//! produce on even inputs.

use rand::Rng;

use super::params::{Binding, ParamId, ParamStore};
use crate::config::Config;
use crate::corner::Rect;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bias of the heatmap heads so untrained maps sit near probability 0.1.
const HEATMAP_PRIOR_BIAS: f64 = -2.197224577336220; // -ln(0.9 / 0.1)

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias_init: f64,
    ) -> Conv {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.register(format!("{name}.weight"), Tensor::randn(&[c_out, c_in, k, k], std, rng));
        let b = store.register(format!("{name}.bias"), Tensor::filled(&[c_out], bias_init));
        Conv { w, b, stride, pad }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, bind.var(self.w), bind.var(self.b), self.stride, self.pad)
    }
}

struct Deconv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Deconv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        bias_init: f64,
    ) -> Deconv {
        let k = 2 * stride;
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.register(format!("{name}.weight"), Tensor::randn(&[c_in, c_out, k, k], std, rng));
        let b = store.register(format!("{name}.bias"), Tensor::filled(&[c_out], bias_init));
        Deconv { w, b, stride, pad: stride / 2 }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.transposed_conv2d(x, bind.var(self.w), self.stride, self.pad)?;
        tape.add_channel_bias(y, bind.var(self.b))
    }
}

struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, n_in: usize, n_out: usize) -> Dense {
        let std = (2.0 / n_in as f64).sqrt();
        let w = store.register(format!("{name}.weight"), Tensor::randn(&[n_out, n_in], std, rng));
        let b = store.register(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        Dense { w, b }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, bind.var(self.w), bind.var(self.b))
    }
}

/// Stage-1 outputs of one pyramid level.
pub struct Stage1Out {
    pub stride: usize,
    /// [1,h,w] raw heatmap logits.
    pub heat_logits: Var,
    /// [1,h,w] sigmoid heatmap.
    pub heat: Var,
    /// [2,h,w] sub-cell offsets in (0,1) via sigmoid.
    pub offset: Var,
    /// [1,h,w] scale in image pixels: stride * exp(raw).
    pub scale: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub shape: Vec<usize>,
}

pub struct Detector {
    pub strides: Vec<usize>,
    stem: Conv,
    stages: Vec<Conv>,
    laterals: Vec<Conv>,
    p6: Conv,
    p7: Conv,
    head_trunk: Conv,
    head_heat: Conv,
    head_offset: Conv,
    head_scale: Conv,
    loc1: Conv,
    loc2: Conv,
    loc_deconv: Deconv,
    off1: Conv,
    off_deconv: Deconv,
    cls_conv: Conv,
    fc1: Dense,
    fc2: Dense,
    num_classes: usize,
    m: usize,
    roi_loc_size: usize,
    roi_cls_size: usize,
    fpn_channels: usize,
}

impl Detector {
    pub fn new(cfg: &Config, store: &mut ParamStore, rng: &mut impl Rng) -> Detector {
        let f = cfg.fpn_channels;
        let r = cfg.roi_channels;
        let bc = cfg.backbone_channels;
        let stem = Conv::new(store, rng, "backbone.stem", 3, cfg.stem_channels, 3, 1, 1, 0.0);
        let mut stages = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, &c_out) in bc.iter().enumerate() {
            stages.push(Conv::new(store, rng, &format!("backbone.stage{}", i + 1), c_in, c_out, 3, 1, 1, 0.0));
            c_in = c_out;
        }
        // laterals tap stage3 output (stride 8), stage4 output (stride 16)
        // and pooled stage4 (stride 32)
        let laterals = vec![
            Conv::new(store, rng, "fpn.lateral3", bc[2], f, 1, 1, 0, 0.0),
            Conv::new(store, rng, "fpn.lateral4", bc[3], f, 1, 1, 0, 0.0),
            Conv::new(store, rng, "fpn.lateral5", bc[3], f, 1, 1, 0, 0.0),
        ];
        let p6 = Conv::new(store, rng, "fpn.p6", f, f, 3, 1, 1, 0.0);
        let p7 = Conv::new(store, rng, "fpn.p7", f, f, 3, 1, 1, 0.0);
        let head_trunk = Conv::new(store, rng, "stage1.trunk", f, f, 3, 1, 1, 0.0);
        let head_heat = Conv::new(store, rng, "stage1.heat", f, 1, 3, 1, 1, HEATMAP_PRIOR_BIAS);
        let head_offset = Conv::new(store, rng, "stage1.offset", f, 2, 3, 1, 1, 0.0);
        // bias puts the initial scale mid-range (z ~ 4.5 strides) so the
        // exponential map starts far from its vanishing-gradient tails
        let head_scale = Conv::new(store, rng, "stage1.scale", f, 1, 3, 1, 1, 1.5);
        let loc1 = Conv::new(store, rng, "stage2.loc1", f, r, 3, 1, 1, 0.0);
        let loc2 = Conv::new(store, rng, "stage2.loc2", r, r, 3, 1, 1, 0.0);
        // the instance map is ~1/784 positive, so its prior sits deeper
        let loc_deconv = Deconv::new(store, rng, "stage2.deconv", r, 1, 2, -4.0);
        let off1 = Conv::new(store, rng, "stage2.off1", r, r, 3, 1, 1, 0.0);
        let off_deconv = Deconv::new(store, rng, "stage2.off_deconv", r, 2, 2, 0.0);
        let cls_conv = Conv::new(store, rng, "stage2.cls_conv", f, r, 3, 1, 1, 0.0);
        let fc1 = Dense::new(store, rng, "stage2.fc1", r * cfg.roi_cls_size * cfg.roi_cls_size, cfg.fc_hidden);
        let fc2 = Dense::new(store, rng, "stage2.fc2", cfg.fc_hidden, cfg.num_classes + 1);
        Detector {
            strides: vec![8, 16, 32, 64, 128],
            stem,
            stages,
            laterals,
            p6,
            p7,
            head_trunk,
            head_heat,
            head_offset,
            head_scale,
            loc1,
            loc2,
            loc_deconv,
            off1,
            off_deconv,
            cls_conv,
            fc1,
            fc2,
            num_classes: cfg.num_classes,
            m: cfg.m,
            roi_loc_size: cfg.roi_loc_size,
            roi_cls_size: cfg.roi_cls_size,
            fpn_channels: f,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn br_heatmap_side(&self) -> usize {
        self.m
    }

    fn conv_pool(&self, tape: &mut Tape, bind: &Binding, conv: &Conv, x: Var) -> Result<(Var, Var)> {
        let y = conv.forward(tape, bind, x)?;
        let y = tape.relu(y)?;
        let pooled = tape.max_pool2d(y, 2, 2, 0)?;
        Ok((y, pooled))
    }

    /// P3..P7 features for an image whose sides are divisible by 128.
    pub fn backbone_fpn(&self, tape: &mut Tape, bind: &Binding, image: Var) -> Result<Vec<Var>> {
        let (_, x) = self.conv_pool(tape, bind, &self.stem, image)?; // stride 2
        let (_, x) = self.conv_pool(tape, bind, &self.stages[0], x)?; // stride 4
        let (_, x) = self.conv_pool(tape, bind, &self.stages[1], x)?; // stride 8
        let (c3, x) = self.conv_pool(tape, bind, &self.stages[2], x)?; // c3 @ stride 8
        let (c4, c5) = self.conv_pool(tape, bind, &self.stages[3], x)?; // c4 @ 16, c5 @ 32

        let p5 = self.laterals[2].forward(tape, bind, c5)?;
        let lat4 = self.laterals[1].forward(tape, bind, c4)?;
        let up5 = tape.upsample_nearest2(p5)?;
        let p4 = tape.add(lat4, up5)?;
        let lat3 = self.laterals[0].forward(tape, bind, c3)?;
        let up4 = tape.upsample_nearest2(p4)?;
        let p3 = tape.add(lat3, up4)?;

        let p6c = self.p6.forward(tape, bind, p5)?;
        let p6 = tape.max_pool2d(p6c, 2, 2, 0)?;
        let p6r = tape.relu(p6)?;
        let p7c = self.p7.forward(tape, bind, p6r)?;
        let p7 = tape.max_pool2d(p7c, 2, 2, 0)?;
        Ok(vec![p3, p4, p5, p6, p7])
    }

    /// Shared stage-1 heads over every level. The heatmap head reads the
    /// corner-pooled trunk; offset and scale read the trunk directly, which
    /// keeps the exponential scale map out of the pool-amplified range.
    pub fn stage1(&self, tape: &mut Tape, bind: &Binding, feats: &[Var]) -> Result<Vec<Stage1Out>> {
        let mut outs = Vec::with_capacity(feats.len());
        for (level, &feat) in feats.iter().enumerate() {
            let t = self.head_trunk.forward(tape, bind, feat)?;
            let t = tape.relu(t)?;
            let pooled = tape.top_left_corner_pool(t)?;
            let heat_logits = self.head_heat.forward(tape, bind, pooled)?;
            let heat = tape.sigmoid(heat_logits)?;
            let off_raw = self.head_offset.forward(tape, bind, t)?;
            let offset = tape.sigmoid(off_raw)?;
            let scale_raw = self.head_scale.forward(tape, bind, t)?;
            let clamped = tape.clamp(scale_raw, -5.0, 5.0)?;
            let e = tape.exp(clamped)?;
            let scale = tape.affine(e, self.strides[level] as f64, 0.0)?;
            outs.push(Stage1Out {
                stride: self.strides[level],
                heat_logits,
                heat,
                offset,
                scale,
            });
        }
        Ok(outs)
    }

    /// Localization branch on the enlarged RoI: returns [1,m,m] bottom-right
    /// heatmap logits and a [2,m,m] sigmoid offset map to be read at the
    /// peak cell. `rect` is in image pixels; `stride` selects the scale.
    pub fn stage2_loc(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feat: Var,
        stride: usize,
        rect: Rect,
    ) -> Result<(Var, Var)> {
        let fr = rect.scaled(1.0 / stride as f64);
        let ra = tape.roi_align(feat, fr, self.roi_loc_size)?;
        let x = self.loc1.forward(tape, bind, ra)?;
        let x = tape.relu(x)?;
        let x = tape.bottom_right_corner_pool(x)?;
        let x = self.loc2.forward(tape, bind, x)?;
        let x = tape.relu(x)?;
        let br_logits = self.loc_deconv.forward(tape, bind, x)?;
        let o = self.off1.forward(tape, bind, x)?;
        let o = tape.relu(o)?;
        let o = self.off_deconv.forward(tape, bind, o)?;
        let offset_map = tape.sigmoid(o)?;
        Ok((br_logits, offset_map))
    }

    /// Classification branch on the vanilla RoI: [C+1] logits.
    pub fn stage2_cls(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feat: Var,
        stride: usize,
        rect: Rect,
    ) -> Result<Var> {
        let fr = rect.scaled(1.0 / stride as f64);
        let ra = tape.roi_align(feat, fr, self.roi_cls_size)?;
        let x = self.cls_conv.forward(tape, bind, ra)?;
        let x = tape.relu(x)?;
        let flat_len = tape.value(x).numel();
        let x = tape.reshape(x, &[flat_len])?;
        let x = self.fc1.forward(tape, bind, x)?;
        let x = tape.relu(x)?;
        self.fc2.forward(tape, bind, x)
    }

    /// Stride arithmetic table: expected shapes of the pyramid and stage-1
    /// maps for an image of the given padded size.
    pub fn summary(&self, h: usize, w: usize) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for (i, &s) in self.strides.iter().enumerate() {
            rows.push(SummaryRow {
                name: format!("P{}", i + 3),
                shape: vec![self.fpn_channels, h / s, w / s],
            });
            rows.push(SummaryRow {
                name: format!("P{}.heatmap", i + 3),
                shape: vec![1, h / s, w / s],
            });
            rows.push(SummaryRow {
                name: format!("P{}.offset", i + 3),
                shape: vec![2, h / s, w / s],
            });
            rows.push(SummaryRow {
                name: format!("P{}.scale", i + 3),
                shape: vec![1, h / s, w / s],
            });
        }
        rows.push(SummaryRow {
            name: "roi.br_heatmap".to_string(),
            shape: vec![1, self.m, self.m],
        });
        rows.push(SummaryRow {
            name: "roi.class_logits".to_string(),
            shape: vec![self.num_classes + 1],
        });
        rows
    }
}
