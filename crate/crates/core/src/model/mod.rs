//! The two-stage cascade model: tiny backbone + FPN, shared stage-1 corner
//! heads, per-RoI stage-2 heads, decode, checkpointing and training.

mod checkpoint;
mod decode;
mod net;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decode::{
    build_rois, decode_bottom_right, detect, pad_image, DetectStats, Stage1Maps,
};
pub use net::{Detector, Stage1Out, SummaryRow};
pub use params::{Binding, ParamId, ParamStore};
pub use train::{train, EpochRow, Sgd, TrainOutcome, TrainSet};
