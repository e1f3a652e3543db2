use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{MarsError, Result};

pub const PAD_GRAY: u8 = 128;

/// Maps original pixels to canvas pixels: `x' = x * scale + pad_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl LetterboxTransform {
    pub fn identity() -> Self {
        LetterboxTransform {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
        }
    }

    /// Transform for a `width x height` image on a `target` square canvas.
    pub fn for_size(width: u32, height: u32, target: u32) -> Self {
        let scale = target as f64 / width.max(height) as f64;
        let (nw, nh) = Self::resized(width, height, scale, target);
        LetterboxTransform {
            scale,
            pad_x: ((target - nw) / 2) as f64,
            pad_y: ((target - nh) / 2) as f64,
        }
    }

    fn resized(width: u32, height: u32, scale: f64, target: u32) -> (u32, u32) {
        let nw = ((width as f64 * scale).round() as u32).clamp(1, target);
        let nh = ((height as f64 * scale).round() as u32).clamp(1, target);
        (nw, nh)
    }

    pub fn forward_point(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.forward_point(b.x_min, b.y_min);
        let (x1, y1) = self.forward_point(b.x_max, b.y_max);
        BBox::new(x0, y0, x1, y1)
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let (x0, y0) = self.inverse_point(b.x_min, b.y_min);
        let (x1, y1) = self.inverse_point(b.x_max, b.y_max);
        BBox::new(x0, y0, x1, y1)
    }
}

/// Aspect-preserving resize so the longer side equals `target`, centred on a
/// gray square canvas.
pub fn letterbox(image: &RgbImage, target: u32) -> Result<(RgbImage, LetterboxTransform)> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 || target == 0 {
        return Err(MarsError::Data(format!(
            "cannot letterbox a {w}x{h} image to {target}"
        )));
    }
    if w == target && h == target {
        return Ok((image.clone(), LetterboxTransform::identity()));
    }
    let t = LetterboxTransform::for_size(w, h, target);
    let (nw, nh) = LetterboxTransform::resized(w, h, t.scale, target);
    let resized = imageops::resize(image, nw, nh, imageops::FilterType::Triangle);
    let mut canvas = RgbImage::from_pixel(target, target, Rgb([PAD_GRAY; 3]));
    imageops::replace(&mut canvas, &resized, t.pad_x as i64, t.pad_y as i64);
    Ok((canvas, t))
}
