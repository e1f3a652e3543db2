use image::RgbImage;
use ndarray::Array3;

use super::letterbox::{letterbox, LetterboxTransform};
use super::manifest::{AnnotatedImage, DatasetManifest};
use crate::error::{MarsError, Result};
use crate::training::GtObject;

/// A letterboxed image ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// Boxes in network-input pixels.
    pub objects: Vec<GtObject>,
    pub domain_id: usize,
    pub transform: LetterboxTransform,
    pub source_size: (u32, u32),
}

pub fn image_to_tensor(image: &RgbImage) -> Array3<f64> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        image.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
    })
}

fn to_sample(record: &AnnotatedImage, classes: &[String], input_size: u32) -> Result<Sample> {
    let pixels = record.load_pixels()?;
    let (canvas, t) = letterbox(&pixels, input_size)?;
    let size = input_size as f64;
    let mut objects = Vec::with_capacity(record.objects.len());
    for o in &record.objects {
        let class_id = classes
            .iter()
            .position(|c| *c == o.class_name)
            .ok_or_else(|| MarsError::UnknownClasses(vec![o.class_name.clone()]))?;
        let bbox = t.forward_box(&o.bbox).clip(size, size);
        if bbox.has_area() {
            objects.push(GtObject { bbox, class_id });
        }
    }
    Ok(Sample {
        id: record.id.clone(),
        image: image_to_tensor(&canvas),
        objects,
        domain_id: record.domain_id,
        transform: t,
        source_size: (record.width, record.height),
    })
}

/// Decode, degrade and letterbox every record, in manifest order.
pub fn load_samples(manifest: &DatasetManifest, input_size: u32) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| to_sample(r, &manifest.classes, input_size))
        .collect()
}
