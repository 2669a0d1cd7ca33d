//! Instance-segmentation evaluation beyond AP.
//!
//! Masks and COCO I/O, greedy matching, AP/F1/LRP, the duplicate confusion
//! and naming error hedging measures, several NMS variants including a
//! semantic-mask occupancy filter, and a synthetic part-counting generator.

pub mod bench;
pub mod coco;
pub mod eval;
pub mod hedging;
pub mod lrp;
pub mod mask;
pub mod matching;
pub mod nms;
#[cfg(feature = "verify")]
pub mod oracles;
pub mod pr;
pub mod synth;

pub use coco::{
    CategoryId, Dataset, Detection, DetectionSet, GroundTruthInstance, ImageId, SemanticMaskSet,
};
pub use mask::{BinaryMask, RleMask};
