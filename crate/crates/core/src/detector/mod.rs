//! The full detector: backbone, three detection heads, optional blocks at
//! the head attachment sites, output decoding and suppression.

mod config;
mod decode;
mod model;

pub use config::{Backbone, ModelConfig, ANCHORS_PER_SCALE, STRIDES, YOLOV3_ANCHORS};
pub use decode::{decode_predictions, detection_order, non_max_suppression, Detection};
pub use model::{ForwardOutput, ForwardVars, Model, RawPrediction};
