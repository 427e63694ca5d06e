//! Raw forward and gradient kernels for the network ops.
//!
//! Everything here is plain f64 loop code over row-major buffers. The tape
//! wraps these; tests compare them against brute-force oracles.

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a conv2d call, validated once and reused by the grads.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv2d_geom(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if x_shape.len() != 3 {
        return Err(Error::shape("conv2d", format!("input must be [C,H,W], got {:?}", x_shape)));
    }
    if k_shape.len() != 4 || k_shape[2] != k_shape[3] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [C_out,C_in,k,k], got {:?}", k_shape),
        ));
    }
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, k) = (k_shape[0], k_shape[2]);
    if k_shape[1] != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", k_shape[1], c_in),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::domain("conv2d", format!("kernel size {} must be odd", k)));
    }
    if stride == 0 {
        return Err(Error::domain("conv2d", "stride must be >= 1".to_string()));
    }
    let h_num = h as i64 + 2 * pad as i64 - k as i64;
    let w_num = w as i64 + 2 * pad as i64 - k as i64;
    if h_num < 0 || w_num < 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", k, k, h + 2 * pad, w + 2 * pad),
        ));
    }
    if h_num % stride as i64 != 0 {
        return Err(Error::InexactOutput { op: "conv2d", numer: h_num, stride });
    }
    if w_num % stride as i64 != 0 {
        return Err(Error::InexactOutput { op: "conv2d", numer: w_num, stride });
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        k,
        stride,
        pad,
        h_out: (h_num / stride as i64) as usize + 1,
        w_out: (w_num / stride as i64) as usize + 1,
    })
}

pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv2d_geom(x.shape(), kernel.shape(), stride, pad)?;
    bias.expect_rank(1, "conv2d")?;
    if bias.shape()[0] != g.c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries, kernel {} output channels", bias.shape()[0], g.c_out),
        ));
    }
    let mut out = vec![0.0f64; g.c_out * g.h_out * g.w_out];
    let xd = x.data();
    let kd = kernel.data();
    for co in 0..g.c_out {
        let plane = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        plane.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = kd[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(plane, xplane, wv, &g, ki, kj);
                }
            }
        }
    }
    Tensor::from_vec(&[g.c_out, g.h_out, g.w_out], out)
}

/// plane[oi,oj] += wv * x[oi*s - p + ki, oj*s - p + kj] over valid cells.
#[inline]
fn accumulate_shifted(plane: &mut [f64], xplane: &[f64], wv: f64, g: &ConvGeom, ki: usize, kj: usize) {
    let (s, p) = (g.stride as i64, g.pad as i64);
    for oi in 0..g.h_out {
        let ii = oi as i64 * s - p + ki as i64;
        if ii < 0 || ii >= g.h as i64 {
            continue;
        }
        let xrow = &xplane[ii as usize * g.w..(ii as usize + 1) * g.w];
        let orow = &mut plane[oi * g.w_out..(oi + 1) * g.w_out];
        // valid oj range: 0 <= oj*s - p + kj < w
        let jj0 = kj as i64 - p;
        let lo = if jj0 >= 0 { 0 } else { ((-jj0) + s - 1) / s } as usize;
        let hi_excl = (((g.w as i64 - jj0) + s - 1) / s).clamp(0, g.w_out as i64) as usize;
        if g.stride == 1 {
            let base = (jj0 + lo as i64) as usize;
            let n = hi_excl.saturating_sub(lo);
            let (dst, src) = (&mut orow[lo..lo + n], &xrow[base..base + n]);
            for i in 0..n {
                dst[i] += wv * src[i];
            }
        } else {
            for oj in lo..hi_excl {
                let jj = (oj as i64 * s + jj0) as usize;
                orow[oj] += wv * xrow[jj];
            }
        }
    }
}

/// dL/dx for conv2d. Gather form: for each input cell sum over the outputs it fed.
pub fn conv2d_grad_input(kernel: &Tensor, gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0f64; g.c_in * g.h * g.w];
    let kd = kernel.data();
    let (s, p) = (g.stride as i64, g.pad as i64);
    for co in 0..g.c_out {
        let gplane = &gout[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let gxplane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = kd[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    // gx[ii,jj] += wv * gout[oi,oj] where ii = oi*s-p+ki
                    for oi in 0..g.h_out {
                        let ii = oi as i64 * s - p + ki as i64;
                        if ii < 0 || ii >= g.h as i64 {
                            continue;
                        }
                        let grow = &gplane[oi * g.w_out..(oi + 1) * g.w_out];
                        let xrow = &mut gxplane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let jj0 = kj as i64 - p;
                        let lo = if jj0 >= 0 { 0 } else { ((-jj0) + s - 1) / s } as usize;
                        let hi_excl = (((g.w as i64 - jj0) + s - 1) / s).clamp(0, g.w_out as i64) as usize;
                        if g.stride == 1 {
                            let base = (jj0 + lo as i64) as usize;
                            let n = hi_excl.saturating_sub(lo);
                            let (dst, src) = (&mut xrow[base..base + n], &grow[lo..lo + n]);
                            for i in 0..n {
                                dst[i] += wv * src[i];
                            }
                        } else {
                            for oj in lo..hi_excl {
                                let jj = (oj as i64 * s + jj0) as usize;
                                xrow[jj] += wv * grow[oj];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// dL/dkernel for conv2d.
pub fn conv2d_grad_kernel(x: &Tensor, gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0f64; g.c_out * g.c_in * g.k * g.k];
    let xd = x.data();
    let (s, p) = (g.stride as i64, g.pad as i64);
    for co in 0..g.c_out {
        let gplane = &gout[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let mut acc = 0.0f64;
                    for oi in 0..g.h_out {
                        let ii = oi as i64 * s - p + ki as i64;
                        if ii < 0 || ii >= g.h as i64 {
                            continue;
                        }
                        let grow = &gplane[oi * g.w_out..(oi + 1) * g.w_out];
                        let xrow = &xplane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let jj0 = kj as i64 - p;
                        let lo = if jj0 >= 0 { 0 } else { ((-jj0) + s - 1) / s } as usize;
                        let hi_excl = (((g.w as i64 - jj0) + s - 1) / s).clamp(0, g.w_out as i64) as usize;
                        if g.stride == 1 {
                            let base = (jj0 + lo as i64) as usize;
                            let n = hi_excl.saturating_sub(lo);
                            let (a, b) = (&grow[lo..lo + n], &xrow[base..base + n]);
                            for i in 0..n {
                                acc += a[i] * b[i];
                            }
                        } else {
                            for oj in lo..hi_excl {
                                let jj = (oj as i64 * s + jj0) as usize;
                                acc += grow[oj] * xrow[jj];
                            }
                        }
                    }
                    gw[((co * g.c_in + ci) * g.k + ki) * g.k + kj] = acc;
                }
            }
        }
    }
    gw
}

pub fn conv2d_grad_bias(gout: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    (0..g.c_out)
        .map(|co| gout[co * plane..(co + 1) * plane].iter().sum())
        .collect()
}

/// Geometry of transposed convolution. Kernel layout is [C_in, C_out, k, k]
/// so a conv2d kernel can be reused as the adjoint with the roles of its
/// channel dims swapped.
#[derive(Debug, Clone, Copy)]
pub struct TConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn tconv2d_geom(
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<TConvGeom> {
    if x_shape.len() != 3 {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input must be [C,H,W], got {:?}", x_shape),
        ));
    }
    if k_shape.len() != 4 || k_shape[2] != k_shape[3] {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("kernel must be [C_in,C_out,k,k], got {:?}", k_shape),
        ));
    }
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (k_cin, c_out, k) = (k_shape[0], k_shape[1], k_shape[2]);
    if k_cin != c_in {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("kernel expects {} input channels, input has {}", k_cin, c_in),
        ));
    }
    if stride == 0 {
        return Err(Error::domain("transposed_conv2d", "stride must be >= 1".to_string()));
    }
    let h_out = (h - 1) as i64 * stride as i64 + k as i64 - 2 * pad as i64;
    let w_out = (w - 1) as i64 * stride as i64 + k as i64 - 2 * pad as i64;
    if h_out <= 0 || w_out <= 0 {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("padding {} swallows the whole {}x{} output", pad, h_out, w_out),
        ));
    }
    Ok(TConvGeom {
        c_in,
        c_out,
        h,
        w,
        k,
        stride,
        pad,
        h_out: h_out as usize,
        w_out: w_out as usize,
    })
}

/// Scatter form: each input cell stamps a kernel-sized patch into the output.
pub fn transposed_conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = tconv2d_geom(x.shape(), kernel.shape(), stride, pad)?;
    let mut out = vec![0.0f64; g.c_out * g.h_out * g.w_out];
    let xd = x.data();
    let kd = kernel.data();
    for ci in 0..g.c_in {
        let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for co in 0..g.c_out {
            let oplane = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = kd[((ci * g.c_out + co) * g.k + ki) * g.k + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..g.h {
                        let oi = i as i64 * g.stride as i64 + ki as i64 - g.pad as i64;
                        if oi < 0 || oi >= g.h_out as i64 {
                            continue;
                        }
                        let xrow = &xplane[i * g.w..(i + 1) * g.w];
                        let orow = &mut oplane[oi as usize * g.w_out..(oi as usize + 1) * g.w_out];
                        for j in 0..g.w {
                            let oj = j as i64 * g.stride as i64 + kj as i64 - g.pad as i64;
                            if oj < 0 || oj >= g.w_out as i64 {
                                continue;
                            }
                            orow[oj as usize] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.c_out, g.h_out, g.w_out], out)
}

pub fn tconv2d_grad_input(kernel: &Tensor, gout: &[f64], g: &TConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0f64; g.c_in * g.h * g.w];
    let kd = kernel.data();
    for ci in 0..g.c_in {
        let gxplane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for co in 0..g.c_out {
            let gplane = &gout[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = kd[((ci * g.c_out + co) * g.k + ki) * g.k + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..g.h {
                        let oi = i as i64 * g.stride as i64 + ki as i64 - g.pad as i64;
                        if oi < 0 || oi >= g.h_out as i64 {
                            continue;
                        }
                        let grow = &gplane[oi as usize * g.w_out..(oi as usize + 1) * g.w_out];
                        let xrow = &mut gxplane[i * g.w..(i + 1) * g.w];
                        for j in 0..g.w {
                            let oj = j as i64 * g.stride as i64 + kj as i64 - g.pad as i64;
                            if oj < 0 || oj >= g.w_out as i64 {
                                continue;
                            }
                            xrow[j] += wv * grow[oj as usize];
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn tconv2d_grad_kernel(x: &Tensor, gout: &[f64], g: &TConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0f64; g.c_in * g.c_out * g.k * g.k];
    let xd = x.data();
    for ci in 0..g.c_in {
        let xplane = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for co in 0..g.c_out {
            let gplane = &gout[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let mut acc = 0.0;
                    for i in 0..g.h {
                        let oi = i as i64 * g.stride as i64 + ki as i64 - g.pad as i64;
                        if oi < 0 || oi >= g.h_out as i64 {
                            continue;
                        }
                        let grow = &gplane[oi as usize * g.w_out..(oi as usize + 1) * g.w_out];
                        let xrow = &xplane[i * g.w..(i + 1) * g.w];
                        for j in 0..g.w {
                            let oj = j as i64 * g.stride as i64 + kj as i64 - g.pad as i64;
                            if oj < 0 || oj >= g.w_out as i64 {
                                continue;
                            }
                            acc += xrow[j] * grow[oj as usize];
                        }
                    }
                    gw[((ci * g.c_out + co) * g.k + ki) * g.k + kj] = acc;
                }
            }
        }
    }
    gw
}

/// Max pooling; padded cells never win (they are treated as -inf).
/// Returns the output and, per output cell, the flat input index of its
/// argmax (lowest flat index on ties) for gradient routing.
pub fn max_pool2d(
    x: &Tensor,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<u32>)> {
    x.expect_rank(3, "max_pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::domain("max_pool2d", "window and stride must be >= 1".to_string()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h_num = h as i64 + 2 * pad as i64 - window as i64;
    let w_num = w as i64 + 2 * pad as i64 - window as i64;
    if h_num < 0 || w_num < 0 {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {} larger than padded input {}x{}", window, h + 2 * pad, w + 2 * pad),
        ));
    }
    let h_out = (h_num / stride as i64) as usize + 1;
    let w_out = (w_num / stride as i64) as usize + 1;
    let xd = x.data();
    let mut out = vec![0.0f64; c * h_out * w_out];
    let mut arg = vec![0u32; c * h_out * w_out];
    for ci in 0..c {
        let xplane = &xd[ci * h * w..(ci + 1) * h * w];
        for oi in 0..h_out {
            for oj in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..window {
                    let ii = oi as i64 * stride as i64 - pad as i64 + di as i64;
                    if ii < 0 || ii >= h as i64 {
                        continue;
                    }
                    for dj in 0..window {
                        let jj = oj as i64 * stride as i64 - pad as i64 + dj as i64;
                        if jj < 0 || jj >= w as i64 {
                            continue;
                        }
                        let v = xplane[ii as usize * w + jj as usize];
                        if v > best {
                            best = v;
                            best_idx = ii as usize * w + jj as usize;
                        }
                    }
                }
                let o = (oi * w_out) + oj;
                out[ci * h_out * w_out + o] = best;
                arg[ci * h_out * w_out + o] = (ci * h * w + best_idx) as u32;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, h_out, w_out], out)?, arg))
}

/// Affine map: weight[M,N] * x[N] + bias[M].
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank(1, "linear")?;
    weight.expect_rank(2, "linear")?;
    bias.expect_rank(1, "linear")?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    if x.shape()[0] != n || bias.shape()[0] != m {
        return Err(Error::shape(
            "linear",
            format!(
                "weight {:?} needs input [{}] and bias [{}], got input {:?}, bias {:?}",
                weight.shape(),
                n,
                m,
                x.shape(),
                bias.shape()
            ),
        ));
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = bias.data().to_vec();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * xd[j];
        }
        out[i] += acc;
    }
    Tensor::from_vec(&[m], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_box_filter_keeps_constant_interior() {
        let x = Tensor::filled(&[1, 5, 5], 3.5);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, 1, 1).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.at(&[0, i, j]) - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_inexact_geometry() {
        let x = Tensor::zeros(&[1, 128, 128]);
        let k = Tensor::zeros(&[4, 1, 3, 3]);
        let b = Tensor::zeros(&[4]);
        match conv2d(&x, &k, &b, 2, 1) {
            Err(Error::InexactOutput { .. }) => {}
            other => panic!("expected inexact-output rejection, got {:?}", other.map(|t| t.shape().to_vec())),
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &k, &b, 1, 0).is_err());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &k, &b, 1, 1).is_err());
    }

    #[test]
    fn tconv_identity() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = transposed_conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn tconv_doubles_spatial_size() {
        let x = Tensor::filled(&[3, 14, 14], 1.0);
        let k = Tensor::filled(&[3, 1, 4, 4], 0.5);
        let y = transposed_conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 28, 28]);
    }

    #[test]
    fn max_pool_keeps_strict_peak() {
        let mut x = Tensor::filled(&[1, 5, 5], 0.1);
        x.set(&[0, 2, 3], 0.9);
        let (y, _) = max_pool2d(&x, 3, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.at(&[0, 2, 3]), 0.9);
    }

    #[test]
    fn max_pool_constant_stays_constant() {
        let x = Tensor::filled(&[2, 4, 4], -1.25);
        let (y, _) = max_pool2d(&x, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn max_pool_tie_routes_to_lowest_index() {
        let x = Tensor::filled(&[1, 3, 3], 2.0);
        let (_, arg) = max_pool2d(&x, 3, 1, 1).unwrap();
        // center cell window covers the whole plane; lowest flat index is 0
        assert_eq!(arg[4], 0);
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[3], &[1., 2., 3.]);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b0 = Tensor::zeros(&[3]);
        assert_eq!(linear(&x, &eye, &b0).unwrap().data(), x.data());
        let wz = Tensor::zeros(&[2, 3]);
        let b = t(&[2], &[5.0, -1.0]);
        assert_eq!(linear(&x, &wz, &b).unwrap().data(), b.data());
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = t(&[2], &[1., 2.]);
        let w = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[3]);
        assert!(linear(&x, &w, &b).is_err());
    }
}
