//! COCO-style JSON annotations and detection results, plus the dataset
//! directory layout (images/ as PPM + annotations.json).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ppm::{read_ppm, write_ppm};
use super::DatasetSample;
use crate::boxes::{Detection, GroundTruthBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// [x, y, w, h]
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One detection result record, COCO results-list style.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: usize,
    /// [x, y, w, h]
    pub bbox: [f64; 4],
    pub score: f64,
}

fn image_file_name(id: u64) -> String {
    format!("img_{:06}.ppm", id)
}

/// Write images as PPM plus annotations.json into `dir`.
pub fn save_dataset(dir: &Path, samples: &[DatasetSample], class_names: &[String]) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_ann = 0u64;
    for s in samples {
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let file_name = image_file_name(s.image_id);
        write_ppm(&images_dir.join(&file_name), &s.image)?;
        images.push(CocoImage {
            id: s.image_id,
            file_name,
            width: w as u32,
            height: h as u32,
        });
        for b in &s.boxes {
            annotations.push(CocoAnnotation {
                id: next_ann,
                image_id: s.image_id,
                bbox: [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1],
                category_id: b.class_id,
            });
            next_ann += 1;
        }
    }
    let categories = class_names
        .iter()
        .enumerate()
        .map(|(id, name)| CocoCategory { id, name: clone_name(name) })
        .collect();
    let ds = CocoDataset { images, annotations, categories };
    fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&ds)?)?;
    Ok(())
}

fn clone_name(n: &str) -> String {
    n.to_string()
}

/// Parse an annotations file and validate referential integrity. Returns the
/// dataset description without loading pixels.
pub fn load_annotations(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path)?;
    let ds: CocoDataset = serde_json::from_str(&text)?;
    let image_ids: std::collections::BTreeSet<u64> = ds.images.iter().map(|i| i.id).collect();
    let cat_ids: std::collections::BTreeSet<usize> = ds.categories.iter().map(|c| c.id).collect();
    for (idx, ann) in ds.annotations.iter().enumerate() {
        if !image_ids.contains(&ann.image_id) {
            return Err(Error::Dataset(format!(
                "annotation {} references missing image_id {}",
                idx, ann.image_id
            )));
        }
        if !cat_ids.contains(&ann.category_id) {
            return Err(Error::Dataset(format!(
                "annotation {} references unknown category {}",
                idx, ann.category_id
            )));
        }
        if !(ann.bbox[2] > 0.0 && ann.bbox[3] > 0.0) {
            return Err(Error::Dataset(format!("annotation {} has degenerate bbox", idx)));
        }
    }
    Ok(ds)
}

/// Load a dataset directory written by `save_dataset`.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let ds = load_annotations(&dir.join("annotations.json"))?;
    let mut by_image: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
    for ann in &ds.annotations {
        by_image.entry(ann.image_id).or_default().push(GroundTruthBox {
            x1: ann.bbox[0],
            y1: ann.bbox[1],
            x2: ann.bbox[0] + ann.bbox[2],
            y2: ann.bbox[1] + ann.bbox[3],
            class_id: ann.category_id,
        });
    }
    let mut samples = Vec::with_capacity(ds.images.len());
    let mut images = ds.images.clone();
    images.sort_by_key(|i| i.id);
    for im in &images {
        let image = read_ppm(&dir.join("images").join(&im.file_name))?;
        samples.push(DatasetSample {
            image,
            boxes: by_image.remove(&im.id).unwrap_or_default(),
            image_id: im.id,
        });
    }
    Ok(samples)
}

pub fn class_names_of(ds: &CocoDataset) -> Vec<String> {
    let mut cats = ds.categories.clone();
    cats.sort_by_key(|c| c.id);
    cats.into_iter().map(|c| c.name).collect()
}

/// Standard results list with xywh boxes and scores.
pub fn detections_to_records(per_image: &[(u64, Vec<Detection>)]) -> Vec<DetectionRecord> {
    let mut records = Vec::new();
    for (image_id, dets) in per_image {
        for d in dets {
            records.push(DetectionRecord {
                image_id: *image_id,
                category_id: d.class_id,
                bbox: [d.x1, d.y1, d.x2 - d.x1, d.y2 - d.y1],
                score: d.score,
            });
        }
    }
    records
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Group records back into per-image detection lists.
pub fn records_to_detections(records: &[DetectionRecord]) -> Vec<(u64, Vec<Detection>)> {
    let mut map: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id).or_default().push(Detection {
            x1: r.bbox[0],
            y1: r.bbox[1],
            x2: r.bbox[0] + r.bbox[2],
            y2: r.bbox[1] + r.bbox[3],
            class_id: r.category_id,
            score: r.score,
            parts: (r.score, r.score, r.score),
        });
    }
    map.into_iter().collect()
}
