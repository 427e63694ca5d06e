//! Reverse-mode differentiation over a single-owner operation tape.
//!
//! Ops append nodes; `backward` replays the recorded closures in reverse and
//! populates the grad slot of every node that requires gradients. A tape is
//! single-threaded; independent tapes may live on separate threads.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&[Tensor], &[f64], &mut Grads)>;

/// Gradient buffers per node, allocated lazily during backward.
pub(crate) struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub(crate) fn acc(&mut self, idx: usize, numel: usize) -> &mut [f64] {
        self.slots[idx]
            .get_or_insert_with(|| vec![0.0; numel])
            .as_mut_slice()
    }
}

pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    requires: Vec<bool>,
    grad_enabled: bool,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            requires: Vec::new(),
            grad_enabled: true,
            ran_backward: false,
        }
    }

    /// Forward-only tape: records no backward closures.
    pub fn inference() -> Tape {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub(crate) fn wants_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub(crate) fn push(&mut self, value: Tensor, requires: bool, back: Option<BackFn>) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        self.backs.push(if self.grad_enabled && requires { back } else { None });
        Var(self.values.len() - 1)
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let req = t.requires_grad();
        self.push(t, req, None)
    }

    /// Insert a tensor that never receives gradients (targets, masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, false, None)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let (na, nb) = (self.wants_grad(a), self.wants_grad(b));
        let n = out.numel();
        self.ok_node(out, na || nb, move |_vals, og, grads| {
            if na {
                for (g, &o) in grads.acc(a.0, n).iter_mut().zip(og) {
                    *g += o;
                }
            }
            if nb {
                for (g, &o) in grads.acc(b.0, n).iter_mut().zip(og) {
                    *g += o;
                }
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let (na, nb) = (self.wants_grad(a), self.wants_grad(b));
        let n = out.numel();
        self.ok_node(out, na || nb, move |_vals, og, grads| {
            if na {
                for (g, &o) in grads.acc(a.0, n).iter_mut().zip(og) {
                    *g += o;
                }
            }
            if nb {
                for (g, &o) in grads.acc(b.0, n).iter_mut().zip(og) {
                    *g -= o;
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let (na, nb) = (self.wants_grad(a), self.wants_grad(b));
        let n = out.numel();
        self.ok_node(out, na || nb, move |vals, og, grads| {
            if na {
                let bd = vals[b.0].data();
                let ga = grads.acc(a.0, n);
                for i in 0..n {
                    ga[i] += og[i] * bd[i];
                }
            }
            if nb {
                let ad = vals[a.0].data();
                let gb = grads.acc(b.0, n);
                for i in 0..n {
                    gb[i] += og[i] * ad[i];
                }
            }
        })
    }

    /// y = mul * x + add, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| mul * x + add).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |_vals, og, grads| {
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i] * mul;
            }
        })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.values[a.0].data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("ln", "non-positive input".to_string()));
        }
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |vals, og, grads| {
            let xd = vals[a.0].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i] / xd[i];
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.exp()).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        let o = self.values.len(); // index of the node about to be pushed
        self.ok_node(out, need, move |vals, og, grads| {
            let yd = vals[o].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i] * yd[i];
            }
        })
    }

    /// x^p for constant p; requires strictly positive inputs.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.values[a.0].data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("powf", "non-positive base".to_string()));
        }
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.powf(p)).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |vals, og, grads| {
            let xd = vals[a.0].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i] * p * xd[i].powf(p - 1.0);
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        let o = self.values.len();
        self.ok_node(out, need, move |vals, og, grads| {
            let yd = vals[o].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i] * yd[i] * (1.0 - yd[i]);
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |vals, og, grads| {
            let xd = vals[a.0].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                if xd[i] > 0.0 {
                    ga[i] += og[i];
                }
            }
        })
    }

    /// Clamp to [lo, hi]; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let data: Vec<f64> = self.values[a.0].data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_vec(self.values[a.0].shape(), data)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |vals, og, grads| {
            let xd = vals[a.0].data();
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                if xd[i] > lo && xd[i] < hi {
                    ga[i] += og[i];
                }
            }
        })
    }

    // ── reductions and shape ────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values[a.0].data().iter().sum();
        let need = self.wants_grad(a);
        let n = self.values[a.0].numel();
        self.ok_node(Tensor::scalar(s), need, move |_vals, og, grads| {
            let ga = grads.acc(a.0, n);
            for g in ga.iter_mut() {
                *g += og[0];
            }
        })
    }

    /// Mean over the spatial dims of a [C,H,W] tensor, yielding [C].
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        self.values[a.0].expect_rank(3, "spatial_mean")?;
        let (c, h, w) = {
            let s = self.values[a.0].shape();
            (s[0], s[1], s[2])
        };
        let plane = h * w;
        let data: Vec<f64> = (0..c)
            .map(|ci| self.values[a.0].data()[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let need = self.wants_grad(a);
        self.ok_node(Tensor::from_vec(&[c], data)?, need, move |_vals, og, grads| {
            let ga = grads.acc(a.0, c * plane);
            for ci in 0..c {
                let share = og[ci] / plane as f64;
                for g in ga[ci * plane..(ci + 1) * plane].iter_mut() {
                    *g += share;
                }
            }
        })
    }

    /// Read one spatial cell of a [C,H,W] tensor as a [C] vector.
    pub fn pick_cell(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        self.values[a.0].expect_rank(3, "pick_cell")?;
        let (c, h, w) = {
            let s = self.values[a.0].shape();
            (s[0], s[1], s[2])
        };
        if row >= h || col >= w {
            return Err(Error::shape(
                "pick_cell",
                format!("cell ({row},{col}) outside {h}x{w}"),
            ));
        }
        let data: Vec<f64> = (0..c)
            .map(|ci| self.values[a.0].data()[ci * h * w + row * w + col])
            .collect();
        let need = self.wants_grad(a);
        self.ok_node(Tensor::from_vec(&[c], data)?, need, move |_vals, og, grads| {
            let ga = grads.acc(a.0, c * h * w);
            for ci in 0..c {
                ga[ci * h * w + row * w + col] += og[ci];
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[a.0].clone().reshaped(shape)?;
        let need = self.wants_grad(a);
        let n = out.numel();
        self.ok_node(out, need, move |_vals, og, grads| {
            let ga = grads.acc(a.0, n);
            for i in 0..n {
                ga[i] += og[i];
            }
        })
    }

    /// Stack same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyBatch { op: "stack" });
        }
        let shape0 = self.values[parts[0].0].shape().to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.values[parts[0].0].numel());
        for &p in parts {
            if self.values[p.0].shape() != shape0.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", self.values[p.0].shape(), shape0),
                ));
            }
            data.extend_from_slice(self.values[p.0].data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&shape0);
        let chunk: usize = shape0.iter().product();
        let owned: Vec<(usize, bool)> = parts.iter().map(|&p| (p.0, self.wants_grad(p))).collect();
        let need = owned.iter().any(|&(_, r)| r);
        self.ok_node(Tensor::from_vec(&shape, data)?, need, move |_vals, og, grads| {
            for (slot, (idx, req)) in owned.iter().enumerate() {
                if !req {
                    continue;
                }
                let ga = grads.acc(*idx, chunk);
                let src = &og[slot * chunk..(slot + 1) * chunk];
                for i in 0..chunk {
                    ga[i] += src[i];
                }
            }
        })
    }

    // ── network ops ─────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(
            &self.values[x.0],
            &self.values[kernel.0],
            &self.values[bias.0],
            stride,
            pad,
        )?;
        let geom = ops::conv2d_geom(self.values[x.0].shape(), self.values[kernel.0].shape(), stride, pad)?;
        let (nx, nw, nb) = (self.wants_grad(x), self.wants_grad(kernel), self.wants_grad(bias));
        self.ok_node(out, nx || nw || nb, move |vals, og, grads| {
            if nx {
                let gx = ops::conv2d_grad_input(&vals[kernel.0], og, &geom);
                axpy(grads.acc(x.0, gx.len()), &gx);
            }
            if nw {
                let gw = ops::conv2d_grad_kernel(&vals[x.0], og, &geom);
                axpy(grads.acc(kernel.0, gw.len()), &gw);
            }
            if nb {
                let gb = ops::conv2d_grad_bias(og, &geom);
                axpy(grads.acc(bias.0, gb.len()), &gb);
            }
        })
    }

    pub fn transposed_conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::transposed_conv2d(&self.values[x.0], &self.values[kernel.0], stride, pad)?;
        let geom = ops::tconv2d_geom(self.values[x.0].shape(), self.values[kernel.0].shape(), stride, pad)?;
        let (nx, nw) = (self.wants_grad(x), self.wants_grad(kernel));
        self.ok_node(out, nx || nw, move |vals, og, grads| {
            if nx {
                let gx = ops::tconv2d_grad_input(&vals[kernel.0], og, &geom);
                axpy(grads.acc(x.0, gx.len()), &gx);
            }
            if nw {
                let gw = ops::tconv2d_grad_kernel(&vals[x.0], og, &geom);
                axpy(grads.acc(kernel.0, gw.len()), &gw);
            }
        })
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(&self.values[x.0], &self.values[weight.0], &self.values[bias.0])?;
        let (m, n) = {
            let s = self.values[weight.0].shape();
            (s[0], s[1])
        };
        let (nx, nw, nb) = (self.wants_grad(x), self.wants_grad(weight), self.wants_grad(bias));
        self.ok_node(out, nx || nw || nb, move |vals, og, grads| {
            if nx {
                let wd = vals[weight.0].data();
                let gx = grads.acc(x.0, n);
                for i in 0..m {
                    let row = &wd[i * n..(i + 1) * n];
                    let o = og[i];
                    for j in 0..n {
                        gx[j] += o * row[j];
                    }
                }
            }
            if nw {
                let xd = vals[x.0].data();
                let gw = grads.acc(weight.0, m * n);
                for i in 0..m {
                    let o = og[i];
                    let row = &mut gw[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] += o * xd[j];
                    }
                }
            }
            if nb {
                axpy(grads.acc(bias.0, m), og);
            }
        })
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, arg) = ops::max_pool2d(&self.values[x.0], window, stride, pad)?;
        let need = self.wants_grad(x);
        let in_numel = self.values[x.0].numel();
        self.ok_node(out, need, move |_vals, og, grads| {
            let gx = grads.acc(x.0, in_numel);
            for (o, &src) in arg.iter().enumerate() {
                gx[src as usize] += og[o];
            }
        })
    }

    /// Nearest-neighbor 2x upsampling of a [C,H,W] tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        self.values[x.0].expect_rank(3, "upsample_nearest2")?;
        let (c, h, w) = {
            let s = self.values[x.0].shape();
            (s[0], s[1], s[2])
        };
        let xd = self.values[x.0].data();
        let (h2, w2) = (h * 2, w * 2);
        let mut data = vec![0.0f64; c * h2 * w2];
        for ci in 0..c {
            for i in 0..h2 {
                let srow = &xd[ci * h * w + (i / 2) * w..ci * h * w + (i / 2 + 1) * w];
                let drow = &mut data[ci * h2 * w2 + i * w2..ci * h2 * w2 + (i + 1) * w2];
                for j in 0..w2 {
                    drow[j] = srow[j / 2];
                }
            }
        }
        let need = self.wants_grad(x);
        self.ok_node(Tensor::from_vec(&[c, h2, w2], data)?, need, move |_vals, og, grads| {
            let gx = grads.acc(x.0, c * h * w);
            for ci in 0..c {
                for i in 0..h2 {
                    for j in 0..w2 {
                        gx[ci * h * w + (i / 2) * w + j / 2] += og[ci * h2 * w2 + i * w2 + j];
                    }
                }
            }
        })
    }

    /// x[C,H,W] + bias[C] broadcast over the spatial plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.values[x.0].expect_rank(3, "add_channel_bias")?;
        let (c, h, w) = {
            let s = self.values[x.0].shape();
            (s[0], s[1], s[2])
        };
        if self.values[bias.0].shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs {} channels", self.values[bias.0].shape(), c),
            ));
        }
        let plane = h * w;
        let bd = self.values[bias.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for ci in 0..c {
            let b = bd[ci];
            for v in data[ci * plane..(ci + 1) * plane].iter_mut() {
                *v += b;
            }
        }
        let (nx, nb) = (self.wants_grad(x), self.wants_grad(bias));
        self.ok_node(Tensor::from_vec(&[c, h, w], data)?, nx || nb, move |_vals, og, grads| {
            if nx {
                axpy(grads.acc(x.0, c * plane), og);
            }
            if nb {
                let gb = grads.acc(bias.0, c);
                for ci in 0..c {
                    gb[ci] += og[ci * plane..(ci + 1) * plane].iter().sum::<f64>();
                }
            }
        })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate grads for every requires-grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        if self.ran_backward {
            return Err(Error::BackwardRepeated);
        }
        self.ran_backward = true;
        let mut grads = Grads {
            slots: vec![None; loss.0 + 1],
        };
        grads.slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads.slots[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let og = grads.slots[i].take().unwrap();
                back(&self.values, &og, &mut grads);
                grads.slots[i] = Some(og);
            }
        }
        for (i, slot) in grads.slots.into_iter().enumerate() {
            if self.requires[i] {
                if let Some(g) = slot {
                    self.values[i].set_grad(Some(g));
                }
            }
        }
        Ok(())
    }

    // ── helpers ─────────────────────────────────────────────────────────

    fn ok_node(
        &mut self,
        value: Tensor,
        need: bool,
        back: impl Fn(&[Tensor], &[f64], &mut Grads) + 'static,
    ) -> Result<Var> {
        self.push_op(value, need, back)
    }

    /// Register a node with a backward rule; used by op modules across the crate.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        need: bool,
        back: impl Fn(&[Tensor], &[f64], &mut Grads) + 'static,
    ) -> Result<Var> {
        Ok(self.push(value, need, Some(Box::new(back))))
    }
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += src[i];
    }
}

/// Max relative error between analytic and central-difference gradients.
///
/// `f` must be deterministic: it is re-run twice per coordinate with the
/// point perturbed by `eps`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let y = f(&mut tape, x)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(y).shape().to_vec(),
        });
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.leaf(Tensor::from_vec(point.shape(), data.to_vec())?);
        let y = f(&mut t, v)?;
        Ok(t.value(y).data()[0])
    };

    let mut max_err: f64 = 0.0;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coord: i });
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad(),
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sigmoid_chain_matches_closed_form() {
        // loss = sigmoid(w * x) for scalars; d/dw = sigma'(wx) * x
        let (wv, xv) = (0.7, -1.3);
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(wv).with_grad());
        let x = tape.constant(Tensor::scalar(xv));
        let wx = tape.mul(w, x).unwrap();
        let y = tape.sigmoid(wx).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        let s = 1.0 / (1.0 + (-(wv * xv) as f64).exp());
        let expect = s * (1.0 - s) * xv;
        assert!((tape.grad(w).unwrap()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_rejects_second_call() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_grad());
        let y = tape.sum(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardRepeated)));
    }

    #[test]
    fn grad_check_sum_is_exact() {
        // integer point + power-of-two eps keep the difference quotient exact
        let point = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = grad_check(|t, x| t.sum(x), &point, 2f64.powi(-13)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_composite_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let point = Tensor::uniform(&[2, 4, 4], 0.2, 2.0, &mut rng);
            let err = grad_check(
                |t, x| {
                    let e = t.exp(x)?;
                    let l = t.ln(e)?;
                    let p = t.powf(l, 1.7)?;
                    let s = t.sigmoid(p)?;
                    let a = t.affine(s, 3.0, -0.5)?;
                    let m = t.mul(a, s)?;
                    t.sum(m)
                },
                &point,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {}", err);
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b = Tensor::uniform(&[3], -0.1, 0.1, &mut rng);
        // wrt input
        let (wc, bc) = (w.clone(), b.clone());
        let err = grad_check(
            move |t, xv| {
                let wv = t.constant(wc.clone());
                let bv = t.constant(bc.clone());
                let y = t.conv2d(xv, wv, bv, 1, 1)?;
                t.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad error {}", err);
        // wrt kernel
        let xc = x.clone();
        let bc = b.clone();
        let err = grad_check(
            move |t, wv| {
                let xv = t.constant(xc.clone());
                let bv = t.constant(bc.clone());
                let y = t.conv2d(xv, wv, bv, 2, 1)?;
                // 5x5 pad 1 k 3 stride 2 -> (5+2-3)/2+1 = 3
                t.sum(y)
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "kernel grad error {}", err);
    }

    #[test]
    fn maxpool_grad_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 4.0, 2.0, 3.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.max_pool2d(xv, 2, 2, 0).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tconv_forward_equals_conv_input_gradient() {
        // forward of the transposed conv must equal conv2d's input gradient
        // for the same kernel on matching shapes
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g_out = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        // conv: x[2,4,4] -> y[3,4,4] with stride 1 pad 1
        let geom = ops::conv2d_geom(&[2, 4, 4], w.shape(), 1, 1).unwrap();
        let gx = ops::conv2d_grad_input(&w, g_out.data(), &geom);
        let fwd = ops::transposed_conv2d(&g_out, &w, 1, 1).unwrap();
        for (a, b) in fwd.data().iter().zip(&gx) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn determinism_same_seed_same_bits() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::inference();
            let xv = tape.leaf(x);
            let wv = tape.leaf(w);
            let bv = tape.leaf(b);
            let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
