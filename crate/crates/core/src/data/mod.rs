//! Dataset manifests, VOC import, letterboxing, underwater degradations and
//! the synthetic shape generator.

mod augment;
mod letterbox;
mod manifest;
mod sample;
mod synth;
mod voc;

pub use augment::{apply_domain_augmentation, build_augmented_dataset, DEFAULT_STRENGTHS, NUM_DEGRADATIONS};
pub use letterbox::{letterbox, LetterboxTransform, PAD_GRAY};
pub use manifest::{AnnotatedImage, AnnotatedObject, DatasetManifest, Degradation, ImageRef};
pub use sample::{image_to_tensor, load_samples, Sample};
pub use synth::generate_synthetic_dataset;
pub use voc::{parse_voc_annotations, parse_voc_dir};

/// The fixed URPC class list, in report column order.
pub const CLASS_NAMES: [&str; 5] = ["echinus", "starfish", "holothurian", "scallop", "waterweeds"];

/// Domain 0 is the untouched image; 1..7 are the degradations.
pub const DOMAIN_NAMES: [&str; 7] = [
    "original",
    "green_cast",
    "blue_cast",
    "haze",
    "contrast_reduction",
    "gaussian_blur",
    "sensor_noise",
];

pub fn default_classes() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn default_domains() -> Vec<String> {
    DOMAIN_NAMES.iter().map(|s| s.to_string()).collect()
}
