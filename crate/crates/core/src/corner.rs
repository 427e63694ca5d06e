//! Geometry-aware operators for corner detection: directional corner
//! pooling, heatmap peak extraction, and bilinear RoI feature extraction.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which pair of directions a corner pool aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolCorner {
    /// Rightward row max + downward column max (top-left corners).
    TopLeft,
    /// Leftward row max + upward column max (bottom-right corners).
    BottomRight,
}

/// Raw directional corner pool. Returns the pooled map plus per-cell argmax
/// indices (row direction then column direction) for gradient routing.
/// Both maxima include the cell itself; ties go to the lowest flat index.
pub fn corner_pool(x: &Tensor, corner: PoolCorner) -> Result<(Tensor, Vec<u32>, Vec<u32>)> {
    x.expect_rank(3, "corner_pool")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = vec![0.0f64; c * h * w];
    let mut arg_row = vec![0u32; c * h * w]; // column index of the row max
    let mut arg_col = vec![0u32; c * h * w]; // row index of the column max
    let mut row_max = vec![0.0f64; w];
    let mut row_arg = vec![0u32; w];
    let mut col_max = vec![0.0f64; h * w];
    let mut col_arg = vec![0u32; h * w];
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        // column maxima for the whole plane
        match corner {
            PoolCorner::TopLeft => {
                // downward: max over i' >= i, scan bottom-up, >= keeps lower index
                for j in 0..w {
                    col_max[(h - 1) * w + j] = plane[(h - 1) * w + j];
                    col_arg[(h - 1) * w + j] = (h - 1) as u32;
                }
                for i in (0..h - 1).rev() {
                    for j in 0..w {
                        let v = plane[i * w + j];
                        if v >= col_max[(i + 1) * w + j] {
                            col_max[i * w + j] = v;
                            col_arg[i * w + j] = i as u32;
                        } else {
                            col_max[i * w + j] = col_max[(i + 1) * w + j];
                            col_arg[i * w + j] = col_arg[(i + 1) * w + j];
                        }
                    }
                }
            }
            PoolCorner::BottomRight => {
                // upward: max over i' <= i, scan top-down, > keeps lower index
                for j in 0..w {
                    col_max[j] = plane[j];
                    col_arg[j] = 0;
                }
                for i in 1..h {
                    for j in 0..w {
                        let v = plane[i * w + j];
                        if v > col_max[(i - 1) * w + j] {
                            col_max[i * w + j] = v;
                            col_arg[i * w + j] = i as u32;
                        } else {
                            col_max[i * w + j] = col_max[(i - 1) * w + j];
                            col_arg[i * w + j] = col_arg[(i - 1) * w + j];
                        }
                    }
                }
            }
        }
        for i in 0..h {
            let row = &plane[i * w..(i + 1) * w];
            match corner {
                PoolCorner::TopLeft => {
                    // rightward: max over j' >= j, scan right-to-left
                    row_max[w - 1] = row[w - 1];
                    row_arg[w - 1] = (w - 1) as u32;
                    for j in (0..w - 1).rev() {
                        if row[j] >= row_max[j + 1] {
                            row_max[j] = row[j];
                            row_arg[j] = j as u32;
                        } else {
                            row_max[j] = row_max[j + 1];
                            row_arg[j] = row_arg[j + 1];
                        }
                    }
                }
                PoolCorner::BottomRight => {
                    // leftward: max over j' <= j, scan left-to-right
                    row_max[0] = row[0];
                    row_arg[0] = 0;
                    for j in 1..w {
                        if row[j] > row_max[j - 1] {
                            row_max[j] = row[j];
                            row_arg[j] = j as u32;
                        } else {
                            row_max[j] = row_max[j - 1];
                            row_arg[j] = row_arg[j - 1];
                        }
                    }
                }
            }
            let base = ci * h * w + i * w;
            for j in 0..w {
                out[base + j] = row_max[j] + col_max[i * w + j];
                arg_row[base + j] = row_arg[j];
                arg_col[base + j] = col_arg[i * w + j];
            }
        }
    }
    Ok((Tensor::from_vec(&[c, h, w], out)?, arg_row, arg_col))
}

impl Tape {
    pub fn top_left_corner_pool(&mut self, x: Var) -> Result<Var> {
        self.corner_pool_op(x, PoolCorner::TopLeft)
    }

    pub fn bottom_right_corner_pool(&mut self, x: Var) -> Result<Var> {
        self.corner_pool_op(x, PoolCorner::BottomRight)
    }

    fn corner_pool_op(&mut self, x: Var, corner: PoolCorner) -> Result<Var> {
        let (out, arg_row, arg_col) = corner_pool(self.value(x), corner)?;
        let (c, h, w) = {
            let s = self.value(x).shape();
            (s[0], s[1], s[2])
        };
        let need = self.wants_grad(x);
        self.push_op(out, need, move |_vals, og, grads| {
            let gx = grads.acc(x.0, c * h * w);
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let o = ci * h * w + i * w + j;
                        let g = og[o];
                        if g == 0.0 {
                            continue;
                        }
                        gx[ci * h * w + i * w + arg_row[o] as usize] += g;
                        gx[ci * h * w + arg_col[o] as usize * w + j] += g;
                    }
                }
            }
        })
    }
}

/// A local maximum extracted from a heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Extract up to `k` peaks from a [1,H,W] heatmap.
///
/// A cell survives iff it equals its 3x3 stride-1 pad-1 max-pooled value;
/// survivors are ranked by score descending with lowest flat index breaking
/// ties. Fewer than `k` are returned when fewer survivors exist.
pub fn keypoint_peaks(heatmap: &Tensor, k: usize) -> Result<Vec<Peak>> {
    heatmap.expect_rank(3, "keypoint_peaks")?;
    if heatmap.shape()[0] != 1 {
        return Err(Error::shape(
            "keypoint_peaks",
            format!("expected single channel, got {:?}", heatmap.shape()),
        ));
    }
    if k == 0 {
        return Err(Error::domain("keypoint_peaks", "k must be >= 1".to_string()));
    }
    let (h, w) = (heatmap.shape()[1], heatmap.shape()[2]);
    let (pooled, _) = crate::tensor::ops::max_pool2d(heatmap, 3, 1, 1)?;
    let hd = heatmap.data();
    let pd = pooled.data();
    let mut peaks: Vec<Peak> = (0..h * w)
        .filter(|&i| hd[i] == pd[i])
        .map(|i| Peak {
            row: i / w,
            col: i % w,
            score: hd[i],
        })
        .collect();
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.row * w + a.col).cmp(&(b.row * w + b.col)))
    });
    peaks.truncate(k);
    Ok(peaks)
}

/// Axis-aligned rectangle in continuous feature coordinates.
///
/// A pixel `(r, c)` occupies `[c, c+1) x [r, r+1)` with its center at
/// `(c + 0.5, r + 0.5)`; a rect `(0, 0, W, H)` covers the whole map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Rect {
        Rect { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn scaled(&self, factor: f64) -> Rect {
        Rect {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }
}

/// Bilinear sample of one channel plane at continuous coords, zero outside.
#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        let yy = y0 as i64 + dy;
        if yy < 0 || yy >= h as i64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            if xx < 0 || xx >= w as i64 || wx == 0.0 {
                continue;
            }
            acc += wy * wx * plane[yy as usize * w + xx as usize];
        }
    }
    acc
}

fn roi_align_check(feature: &Tensor, roi: Rect, out: usize, samples: usize) -> Result<()> {
    feature.expect_rank(3, "roi_align")?;
    if roi.width() <= 0.0 || roi.height() <= 0.0 {
        return Err(Error::DegenerateRoi {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
        });
    }
    if out == 0 || samples == 0 {
        return Err(Error::domain("roi_align", "output size and samples must be >= 1".to_string()));
    }
    Ok(())
}

/// The sample points of one output bin: regular `samples x samples` grid.
#[inline]
fn bin_samples(roi: Rect, out: usize, samples: usize, bi: usize, bj: usize) -> impl Iterator<Item = (f64, f64)> {
    let bw = roi.width() / out as f64;
    let bh = roi.height() / out as f64;
    let x0 = roi.x1 + bj as f64 * bw;
    let y0 = roi.y1 + bi as f64 * bh;
    let s = samples as f64;
    (0..samples * samples).map(move |idx| {
        let si = idx / samples;
        let sj = idx % samples;
        (
            y0 + (si as f64 + 0.5) / s * bh,
            x0 + (sj as f64 + 0.5) / s * bw,
        )
    })
}

/// RoIAlign over a [C,H,W] feature map: each output bin averages a regular
/// `samples x samples` grid of bilinear samples. Samples outside the feature
/// read 0; the roi may extend past the boundary.
pub fn roi_align(feature: &Tensor, roi: Rect, out: usize, samples: usize) -> Result<Tensor> {
    roi_align_check(feature, roi, out, samples)?;
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let fd = feature.data();
    let inv = 1.0 / (samples * samples) as f64;
    let mut data = vec![0.0f64; c * out * out];
    for ci in 0..c {
        let plane = &fd[ci * h * w..(ci + 1) * h * w];
        for bi in 0..out {
            for bj in 0..out {
                let mut acc = 0.0;
                for (y, x) in bin_samples(roi, out, samples, bi, bj) {
                    acc += bilinear(plane, h, w, y, x);
                }
                data[ci * out * out + bi * out + bj] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[c, out, out], data)
}

impl Tape {
    /// Differentiable RoIAlign with the standard 2x2 sampling grid per bin.
    pub fn roi_align(&mut self, feature: Var, roi: Rect, out: usize) -> Result<Var> {
        let samples = 2;
        let value = roi_align(self.value(feature), roi, out, samples)?;
        let (c, h, w) = {
            let s = self.value(feature).shape();
            (s[0], s[1], s[2])
        };
        let need = self.wants_grad(feature);
        let inv = 1.0 / (samples * samples) as f64;
        self.push_op(value, need, move |_vals, og, grads| {
            let gf = grads.acc(feature.0, c * h * w);
            for ci in 0..c {
                for bi in 0..out {
                    for bj in 0..out {
                        let g = og[ci * out * out + bi * out + bj] * inv;
                        if g == 0.0 {
                            continue;
                        }
                        for (y, x) in bin_samples(roi, out, samples, bi, bj) {
                            let u = x - 0.5;
                            let v = y - 0.5;
                            let x0 = u.floor();
                            let y0 = v.floor();
                            let fx = u - x0;
                            let fy = v - y0;
                            for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                                let yy = y0 as i64 + dy;
                                if yy < 0 || yy >= h as i64 || wy == 0.0 {
                                    continue;
                                }
                                for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                                    let xx = x0 as i64 + dx;
                                    if xx < 0 || xx >= w as i64 || wx == 0.0 {
                                        continue;
                                    }
                                    gf[ci * h * w + yy as usize * w + xx as usize] += g * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn tl_pool_small_example() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _, _) = corner_pool(&x, PoolCorner::TopLeft).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn br_pool_small_example() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, _, _) = corner_pool(&x, PoolCorner::BottomRight).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn pools_double_constants() {
        for corner in [PoolCorner::TopLeft, PoolCorner::BottomRight] {
            let x = Tensor::filled(&[2, 3, 4], 1.5);
            let (y, _, _) = corner_pool(&x, corner).unwrap();
            assert!(y.data().iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn br_pool_is_flipped_tl_pool() {
        let x = t(&[1, 2, 3], &[0.3, 1.2, -0.4, 2.0, 0.1, 0.9]);
        let flip = |t: &Tensor| {
            let (h, w) = (t.shape()[1], t.shape()[2]);
            let mut d = vec![0.0; h * w];
            for i in 0..h {
                for j in 0..w {
                    d[i * w + j] = t.data()[(h - 1 - i) * w + (w - 1 - j)];
                }
            }
            Tensor::from_vec(t.shape(), d).unwrap()
        };
        let (br, _, _) = corner_pool(&flip(&x), PoolCorner::BottomRight).unwrap();
        let (tl, _, _) = corner_pool(&x, PoolCorner::TopLeft).unwrap();
        assert_eq!(flip(&br).data(), tl.data());
    }

    #[test]
    fn peaks_single_strict_maximum() {
        let mut x = Tensor::filled(&[1, 5, 5], 0.1);
        x.set(&[0, 3, 1], 0.8);
        let peaks = keypoint_peaks(&x, 1).unwrap();
        assert_eq!(peaks.len(), 1);
        assert_eq!((peaks[0].row, peaks[0].col), (3, 1));
    }

    #[test]
    fn peaks_two_separated_ordered_by_score() {
        let mut x = Tensor::filled(&[1, 8, 8], 0.0);
        x.set(&[0, 1, 1], 0.7);
        x.set(&[0, 6, 5], 0.9);
        let peaks = keypoint_peaks(&x, 2).unwrap();
        assert_eq!((peaks[0].row, peaks[0].col, peaks[0].score), (6, 5, 0.9));
        assert_eq!((peaks[1].row, peaks[1].col, peaks[1].score), (1, 1, 0.7));
    }

    #[test]
    fn peaks_all_equal_tie_breaks_to_origin() {
        let x = Tensor::filled(&[1, 4, 4], 0.5);
        let peaks = keypoint_peaks(&x, 1).unwrap();
        assert_eq!((peaks[0].row, peaks[0].col), (0, 0));
    }

    #[test]
    fn peaks_scores_non_increasing_and_local_max() {
        let mut x = Tensor::filled(&[1, 9, 9], 0.0);
        for (i, j, v) in [(0, 0, 0.5), (4, 4, 0.9), (8, 8, 0.7), (2, 7, 0.3)] {
            x.set(&[0, i, j], v);
        }
        let peaks = keypoint_peaks(&x, 10).unwrap();
        for pair in peaks.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        let (pooled, _) = crate::tensor::ops::max_pool2d(&x, 3, 1, 1).unwrap();
        for p in &peaks {
            assert_eq!(x.at(&[0, p.row, p.col]), pooled.at(&[0, p.row, p.col]));
        }
    }

    #[test]
    fn roi_align_constant_feature() {
        let x = Tensor::filled(&[3, 8, 8], 2.5);
        let y = roi_align(&x, Rect::new(1.0, 2.0, 6.0, 7.5), 4, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn roi_align_aligned_identity_one_sample() {
        // roi covering the full out x out grid with 1 sample per bin reads
        // the pixel values exactly
        let x = t(&[1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let y = roi_align(&x, Rect::new(0.0, 0.0, 4.0, 4.0), 4, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn roi_align_rejects_degenerate() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            roi_align(&x, Rect::new(2.0, 1.0, 2.0, 3.0), 2, 2),
            Err(Error::DegenerateRoi { .. })
        ));
    }

    #[test]
    fn roi_align_translation_consistency() {
        // shifting content and roi by an integer offset leaves output
        // unchanged away from borders
        let vals: Vec<f64> = (0..64).map(|v| ((v * 37) % 11) as f64 * 0.13).collect();
        let x = t(&[1, 8, 8], &vals);
        let mut shifted = vec![0.0; 64];
        for i in 0..6 {
            for j in 0..6 {
                shifted[(i + 2) * 8 + (j + 1)] = vals[i * 8 + j];
            }
        }
        let xs = t(&[1, 8, 8], &shifted);
        let a = roi_align(&x, Rect::new(1.0, 1.0, 4.0, 4.0), 3, 2).unwrap();
        let b = roi_align(&xs, Rect::new(2.0, 3.0, 5.0, 6.0), 3, 2).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
