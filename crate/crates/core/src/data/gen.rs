//! Deterministic synthetic-shapes scenes: anti-aliased filled rectangles,
//! ellipses and triangles with tight boxes, deliberate same-class pairs and
//! a visibility floor under overlap.

use rand::Rng;
use rayon::prelude::*;

use super::DatasetSample;
use crate::boxes::GroundTruthBox;
use crate::rng::stream_n;
use crate::tensor::Tensor;

pub const MIN_SHAPE_SIDE: f64 = 16.0;
pub const MAX_SHAPE_SIDE: f64 = 96.0;
/// Every shape keeps at least this fraction visible under later shapes.
pub const MIN_VISIBLE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    /// Apex position along the top edge, in [0, 1].
    Triangle { apex: f64 },
}

/// Geometry and paint of one shape; the tight box is (x1,y1,x2,y2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f64; 3],
}

impl ShapeSpec {
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Point-inside test in image coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.bbox();
        if x < x1 || x > x2 || y < y1 || y > y2 {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let nx = (x - self.cx) / (self.w / 2.0);
                let ny = (y - self.cy) / (self.h / 2.0);
                nx * nx + ny * ny <= 1.0
            }
            ShapeKind::Triangle { apex } => {
                let ax = x1 + apex * self.w;
                let ay = y1;
                point_in_triangle((x, y), (ax, ay), (x1, y2), (x2, y2))
            }
        }
    }

    /// Anti-aliasing coverage of a pixel via a 4x4 subsample grid.
    pub fn coverage(&self, col: usize, row: usize) -> f64 {
        let mut hits = 0;
        for a in 0..4 {
            for b in 0..4 {
                let x = col as f64 + (a as f64 + 0.5) / 4.0;
                let y = row as f64 + (b as f64 + 0.5) / 4.0;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }

    /// Rendered mask: pixels the shape paints (nonzero coverage).
    pub fn mask(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        let (x1, y1, x2, y2) = self.bbox();
        let c0 = (x1.floor().max(0.0)) as usize;
        let r0 = (y1.floor().max(0.0)) as usize;
        let c1 = (x2.ceil() as usize).min(size);
        let r1 = (y2.ceil() as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.coverage(c, r) > 0.0 {
                    m[r * size + c] = true;
                }
            }
        }
        m
    }
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let sign = |p1: (f64, f64), p2: (f64, f64), p3: (f64, f64)| {
        (p1.0 - p3.0) * (p2.1 - p3.1) - (p2.0 - p3.0) * (p1.1 - p3.1)
    };
    let d1 = sign(p, a, b);
    let d2 = sign(p, b, c);
    let d3 = sign(p, c, a);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// One scene: background color plus shapes in draw order (later on top).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub background: [f64; 3],
    pub shapes: Vec<ShapeSpec>,
}

fn sample_shape(rng: &mut impl Rng, size: usize, classes: usize, bg: [f64; 3]) -> ShapeSpec {
    let class_id = rng.gen_range(0..classes);
    let max_side = rng.gen_range(MIN_SHAPE_SIDE..MAX_SHAPE_SIDE);
    let other = max_side * rng.gen_range(0.5..1.0);
    let (w, h) = if rng.gen::<bool>() { (max_side, other) } else { (other, max_side) };
    let margin = 2.0;
    let cx = rng.gen_range(w / 2.0 + margin..size as f64 - w / 2.0 - margin);
    let cy = rng.gen_range(h / 2.0 + margin..size as f64 - h / 2.0 - margin);
    let color = loop {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let dist: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 0.75 {
            break c;
        }
    };
    let kind = match class_id {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Triangle { apex: rng.gen_range(0.0..=1.0) },
    };
    ShapeSpec { kind, class_id, cx, cy, w, h, color }
}

fn reposition(rng: &mut impl Rng, shape: &ShapeSpec, size: usize) -> ShapeSpec {
    let margin = 2.0;
    let mut s = *shape;
    s.cx = rng.gen_range(s.w / 2.0 + margin..size as f64 - s.w / 2.0 - margin);
    s.cy = rng.gen_range(s.h / 2.0 + margin..size as f64 - s.h / 2.0 - margin);
    s
}

fn visible_fraction(mask: &[bool], occluders: &[&Vec<bool>]) -> f64 {
    let total = mask.iter().filter(|&&v| v).count();
    if total == 0 {
        return 0.0;
    }
    let visible = mask
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v && !occluders.iter().any(|o| o[i]))
        .count();
    visible as f64 / total as f64
}

/// Sample the scene of one image. Deterministic in (seed, image_id).
pub fn scene_spec(seed: u64, image_id: u64, size: usize, classes: usize) -> SceneSpec {
    let rng = &mut stream_n(seed, "data", image_id);
    let background = [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ];
    let want = rng.gen_range(1..=6usize);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    for idx in 0..want {
        // deliberately co-occur a similar same-class shape now and then
        let mut candidate = if idx == 1 && rng.gen::<f64>() < 0.5 {
            let mut twin = shapes[0];
            twin.w *= rng.gen_range(0.9..1.1);
            twin.h *= rng.gen_range(0.9..1.1);
            reposition(rng, &twin, size)
        } else {
            sample_shape(rng, size, classes, background)
        };
        let mut placed = false;
        for _attempt in 0..20 {
            let cmask = candidate.mask(size);
            // adding on top must keep every earlier shape visible enough
            let ok = (0..shapes.len()).all(|i| {
                let occ: Vec<&Vec<bool>> = masks[i + 1..].iter().chain(std::iter::once(&cmask)).collect();
                visible_fraction(&masks[i], &occ) >= MIN_VISIBLE
            });
            if ok {
                shapes.push(candidate);
                masks.push(cmask);
                placed = true;
                break;
            }
            candidate = reposition(rng, &candidate, size);
        }
        if !placed {
            // crowded scene; carry on with fewer shapes
            continue;
        }
    }
    SceneSpec { background, shapes }
}

/// Render a scene into a [3,size,size] image in [0,1], quantized to the
/// 8-bit grid, plus the tight per-shape boxes.
pub fn render_scene(scene: &SceneSpec, size: usize) -> (Tensor, Vec<GroundTruthBox>) {
    let mut img = vec![0.0f64; 3 * size * size];
    for ch in 0..3 {
        img[ch * size * size..(ch + 1) * size * size].fill(scene.background[ch]);
    }
    for shape in &scene.shapes {
        let (x1, y1, x2, y2) = shape.bbox();
        let c0 = (x1.floor() - 1.0).max(0.0) as usize;
        let r0 = (y1.floor() - 1.0).max(0.0) as usize;
        let c1 = ((x2.ceil() + 1.0) as usize).min(size);
        let r1 = ((y2.ceil() + 1.0) as usize).min(size);
        for r in r0..r1 {
            for c in c0..c1 {
                let cov = shape.coverage(c, r);
                if cov == 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    let px = &mut img[ch * size * size + r * size + c];
                    *px = *px * (1.0 - cov) + shape.color[ch] * cov;
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    let boxes = scene
        .shapes
        .iter()
        .map(|s| {
            let (x1, y1, x2, y2) = s.bbox();
            GroundTruthBox { x1, y1, x2, y2, class_id: s.class_id }
        })
        .collect();
    (Tensor::from_vec(&[3, size, size], img).unwrap(), boxes)
}

/// Generate a deterministic dataset; images are independent and rendered in
/// parallel with per-image derived seeds.
pub fn generate_shapes(seed: u64, count: usize, size: usize, classes: usize) -> Vec<DatasetSample> {
    assert!(classes >= 2, "need at least two classes");
    (0..count as u64)
        .into_par_iter()
        .map(|image_id| {
            let scene = scene_spec(seed, image_id, size, classes);
            let (image, boxes) = render_scene(&scene, size);
            DatasetSample { image, boxes, image_id }
        })
        .collect()
}

/// Class names for annotation files.
pub fn class_names(classes: usize) -> Vec<String> {
    ["rectangle", "ellipse", "triangle"]
        .iter()
        .take(classes)
        .map(|s| s.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_shapes(7, 4, 128, 2);
        let b = generate_shapes(7, 4, 128, 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image_id, y.image_id);
            assert_eq!(x.boxes, y.boxes);
            assert!(x
                .image
                .data()
                .iter()
                .zip(y.image.data())
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn empty_count_gives_empty_list() {
        assert!(generate_shapes(3, 0, 128, 2).is_empty());
    }

    #[test]
    fn boxes_inside_image_and_nonempty() {
        let samples = generate_shapes(11, 8, 256, 3);
        for s in &samples {
            assert!(!s.boxes.is_empty());
            for b in &s.boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= 256.0 && b.y2 <= 256.0);
                assert!(b.max_side() >= MIN_SHAPE_SIDE * 0.5 && b.max_side() <= MAX_SHAPE_SIDE);
            }
        }
    }

    #[test]
    fn mask_derived_box_matches_stored_box() {
        // re-derive each box from the shape's rendered mask: within 1 px
        for image_id in 0..6u64 {
            let scene = scene_spec(5, image_id, 256, 3);
            for shape in &scene.shapes {
                let mask = shape.mask(256);
                let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
                for r in 0..256 {
                    for c in 0..256 {
                        if mask[r * 256 + c] {
                            rmin = rmin.min(r);
                            rmax = rmax.max(r);
                            cmin = cmin.min(c);
                            cmax = cmax.max(c);
                        }
                    }
                }
                assert!(rmin != usize::MAX, "empty mask");
                // painted pixel [c, c+1) bounds sit within 1 px of the box
                let (x1, y1, x2, y2) = shape.bbox();
                assert!((cmin as f64 - x1).abs() <= 1.0, "left edge");
                assert!((rmin as f64 - y1).abs() <= 1.0, "top edge");
                assert!((cmax as f64 + 1.0 - x2).abs() <= 1.0, "right edge");
                assert!((rmax as f64 + 1.0 - y2).abs() <= 1.0, "bottom edge");
            }
        }
    }

    #[test]
    fn visibility_floor_holds() {
        for image_id in 0..10u64 {
            let scene = scene_spec(23, image_id, 256, 2);
            let masks: Vec<Vec<bool>> = scene.shapes.iter().map(|s| s.mask(256)).collect();
            for i in 0..scene.shapes.len() {
                let occ: Vec<&Vec<bool>> = masks[i + 1..].iter().collect();
                assert!(
                    visible_fraction(&masks[i], &occ) >= MIN_VISIBLE - 1e-9,
                    "shape {} of image {} too occluded",
                    i,
                    image_id
                );
            }
        }
    }

    #[test]
    fn values_live_on_8bit_grid() {
        let samples = generate_shapes(2, 2, 128, 2);
        for s in &samples {
            for &v in s.image.data() {
                assert!((v * 255.0 - (v * 255.0).round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
