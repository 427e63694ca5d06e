//! Rendering helpers: boxes burned into pixels, grayscale heatmap images and
//! an SVG overlay with scores.

use crate::boxes::Detection;
use crate::tensor::Tensor;

const CLASS_COLORS: [[f64; 3]; 6] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

/// Copy of the image with 2px box outlines in per-class colors.
pub fn draw_boxes(image: &Tensor, dets: &[Detection]) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = image.clone();
    let mut put = |r: i64, c: i64, color: &[f64; 3]| {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            return;
        }
        for ch in 0..3 {
            out.data_mut()[ch * plane + r as usize * w + c as usize] = color[ch];
        }
    };
    for d in dets {
        let color = &CLASS_COLORS[d.class_id % CLASS_COLORS.len()];
        let (x1, y1, x2, y2) = (
            d.x1.round() as i64,
            d.y1.round() as i64,
            d.x2.round() as i64,
            d.y2.round() as i64,
        );
        for t in 0..2i64 {
            for x in x1..=x2 {
                put(y1 + t, x, color);
                put(y2 - t, x, color);
            }
            for y in y1..=y2 {
                put(y, x1 + t, color);
                put(y, x2 - t, color);
            }
        }
    }
    out
}

/// [1,h,w] map in [0,1] to a [3,h,w] grayscale image.
pub fn heatmap_to_image(map: &Tensor) -> Tensor {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(map.data().iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

/// Vector overlay: boxes and scores over a transparent canvas.
pub fn svg_overlay(width: usize, height: usize, dets: &[Detection], class_names: &[String]) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = width,
        h = height
    );
    for d in dets {
        let c = CLASS_COLORS[d.class_id % CLASS_COLORS.len()];
        let color = format!(
            "rgb({},{},{})",
            (c[0] * 255.0) as u8,
            (c[1] * 255.0) as u8,
            (c[2] * 255.0) as u8
        );
        let name = class_names
            .get(d.class_id)
            .map(|s| s.as_str())
            .unwrap_or("object");
        svg.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            d.x1,
            d.y1,
            d.x2 - d.x1,
            d.y2 - d.y1,
            color
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"{}\">{} {:.2}</text>\n",
            d.x1,
            (d.y1 - 3.0).max(10.0),
            color,
            name,
            d.score
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
