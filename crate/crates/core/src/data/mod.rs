//! Synthetic-shapes dataset generation, COCO-style annotation I/O and AP
//! evaluation.

pub mod coco;
pub mod eval;
pub mod gen;
pub mod ppm;
pub mod viz;

use crate::boxes::GroundTruthBox;
use crate::tensor::Tensor;

/// One dataset image with its boxes.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    /// [3,H,W] with values in [0,1] (quantized to the 8-bit grid so disk
    /// round trips are lossless).
    pub image: Tensor,
    pub boxes: Vec<GroundTruthBox>,
    pub image_id: u64,
}
