use std::f64::consts::PI;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{AnnotatedImage, AnnotatedObject, DatasetManifest, ImageRef};
use super::CLASS_NAMES;
use crate::boxes::{iou, BBox};
use crate::error::{MarsError, Result};
use crate::params::keyed_rng;

/// Shapes, one per class index.
#[derive(Debug, Clone)]
enum Shape {
    Disk {
        r: f64,
    },
    Star {
        outer: f64,
        inner: f64,
        rot: f64,
    },
    Capsule {
        half_len: f64,
        r: f64,
        angle: f64,
    },
    Fan {
        r: f64,
        dir: f64,
        half_span: f64,
    },
    Strands {
        /// `(x offset, length)` of each strand; strands grow upwards.
        strands: Vec<(f64, f64)>,
        amp: f64,
        freq: f64,
        phase: f64,
        thick: f64,
        height: f64,
    },
}

impl Shape {
    fn random(class_id: usize, diameter: f64, rng: &mut ChaCha8Rng) -> Shape {
        match class_id {
            0 => Shape::Disk { r: diameter / 2.0 },
            1 => Shape::Star {
                outer: diameter / 2.0,
                inner: diameter * rng.random_range(0.18..0.26),
                rot: rng.random_range(0.0..2.0 * PI),
            },
            2 => {
                let r = diameter * rng.random_range(0.14..0.22);
                Shape::Capsule {
                    half_len: diameter / 2.0 - r,
                    r,
                    angle: rng.random_range(0.0..PI),
                }
            }
            3 => Shape::Fan {
                r: diameter * 0.6,
                dir: rng.random_range(0.0..2.0 * PI),
                half_span: rng.random_range(0.5..0.8),
            },
            _ => {
                let count = rng.random_range(3..=5);
                let spread = diameter * 0.6;
                let strands = (0..count)
                    .map(|i| {
                        let x = -spread / 2.0 + spread * i as f64 / (count - 1) as f64;
                        (x, diameter * rng.random_range(0.7..1.0))
                    })
                    .collect();
                Shape::Strands {
                    strands,
                    amp: diameter * 0.07,
                    freq: 2.0 * PI / (diameter * rng.random_range(0.35..0.6)),
                    phase: rng.random_range(0.0..2.0 * PI),
                    thick: (diameter * 0.035).max(1.0),
                    height: diameter,
                }
            }
        }
    }

    /// Conservative half-extent around the placement centre.
    fn radius(&self) -> f64 {
        match self {
            Shape::Disk { r } => *r,
            Shape::Star { outer, .. } => *outer,
            Shape::Capsule { half_len, r, .. } => half_len + r,
            Shape::Fan { r, .. } => *r,
            Shape::Strands {
                height, amp, thick, ..
            } => (height / 2.0).max(height * 0.3 + amp + thick) + 1.0,
        }
    }

    /// Whether the point `(dx, dy)` relative to the centre is painted.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::Star { outer, inner, rot } => {
                let d = (dx * dx + dy * dy).sqrt();
                if d > *outer {
                    return false;
                }
                // Radius of the star outline along this direction.
                let sector = 2.0 * PI / 5.0;
                let a = (dy.atan2(dx) - rot).rem_euclid(sector);
                let t = (a - sector / 2.0).abs() / (sector / 2.0);
                let limit = inner + (outer - inner) * t;
                d <= limit
            }
            Shape::Capsule { half_len, r, angle } => {
                let (c, s) = (angle.cos(), angle.sin());
                let along = (dx * c + dy * s).clamp(-half_len, *half_len);
                let (px, py) = (dx - along * c, dy - along * s);
                px * px + py * py <= r * r
            }
            Shape::Fan { r, dir, half_span } => {
                let d2 = dx * dx + dy * dy;
                if d2 > r * r {
                    return false;
                }
                let off = (dy.atan2(dx) - dir + PI).rem_euclid(2.0 * PI) - PI;
                off.abs() <= *half_span
            }
            Shape::Strands {
                strands,
                amp,
                freq,
                phase,
                thick,
                height,
            } => {
                let base = height / 2.0;
                strands.iter().any(|&(x0, len)| {
                    let up = base - dy;
                    if !(0.0..=len).contains(&up) {
                        return false;
                    }
                    let cx = x0 + amp * (freq * up + phase + x0).sin();
                    (dx - cx).abs() <= *thick
                })
            }
        }
    }

    fn color(&self, class_id: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let base = match class_id {
            0 => [55.0, 25.0, 65.0],
            1 => [235.0, 125.0, 40.0],
            2 => [140.0, 95.0, 55.0],
            3 => [225.0, 205.0, 165.0],
            _ => [60.0, 170.0, 60.0],
        };
        base.map(|v: f64| (v + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0))
    }
}

fn background(size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let top = [30.0, 110.0, 130.0];
    let bottom = [15.0, 60.0, 90.0];
    let tint: f64 = rng.random_range(-10.0..10.0);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        let t = y as f64 / (size.max(2) - 1) as f64;
        for x in 0..size {
            let noise: f64 = rng.random_range(-5.0..5.0);
            let px = std::array::from_fn(|c| {
                (top[c] * (1.0 - t) + bottom[c] * t + tint + noise)
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Rasterised pixel list of a shape placed at `(cx, cy)`, plus its tight box.
fn rasterize(shape: &Shape, cx: f64, cy: f64, size: u32) -> Option<(Vec<(u32, u32)>, BBox)> {
    let r = shape.radius();
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(size - 1);
    let y1 = ((cy + r).ceil() as u32).min(size - 1);
    let mut pixels = Vec::new();
    let (mut bx0, mut by0, mut bx1, mut by1) = (u32::MAX, u32::MAX, 0, 0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                pixels.push((x, y));
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x);
                by1 = by1.max(y);
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    let bbox = BBox::new(bx0 as f64, by0 as f64, (bx1 + 1) as f64, (by1 + 1) as f64);
    Some((pixels, bbox))
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x_min < b.x_max + margin
        && b.x_min < a.x_max + margin
        && a.y_min < b.y_max + margin
        && b.y_min < a.y_max + margin
}

/// Render `n` images of `image_size` pixels square, each holding 1 to 4
/// non-overlapping shapes. Classes are drawn from a shuffled bag so every
/// class appears once per five objects.
pub fn generate_synthetic_dataset(n: usize, image_size: u32, seed: u64) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(MarsError::config("synthetic dataset needs n >= 1"));
    }
    if image_size < 32 {
        return Err(MarsError::config(format!(
            "synthetic image size must be >= 32, got {image_size}"
        )));
    }
    let mut rng = keyed_rng(seed, "synthetic");
    let mut bag: Vec<usize> = Vec::new();
    let s = image_size as f64;
    let mut manifest = DatasetManifest::empty("synthetic");
    for i in 0..n {
        let mut img = background(image_size, &mut rng);
        let count = rng.random_range(1..=4);
        let mut objects: Vec<AnnotatedObject> = Vec::new();
        for _ in 0..count {
            if bag.is_empty() {
                bag = (0..CLASS_NAMES.len()).collect();
                bag.shuffle(&mut rng);
            }
            let class_id = *bag.last().expect("non-empty bag");
            let mut placed = false;
            for _attempt in 0..60 {
                let diameter = s * rng.random_range(0.16..0.38);
                let shape = Shape::random(class_id, diameter, &mut rng);
                let r = shape.radius();
                if 2.0 * r + 2.0 >= s {
                    continue;
                }
                let cx = rng.random_range(r + 1.0..s - r - 1.0);
                let cy = rng.random_range(r + 1.0..s - r - 1.0);
                let Some((pixels, bbox)) = rasterize(&shape, cx, cy, image_size) else {
                    continue;
                };
                if bbox.width() < 3.0 || bbox.height() < 3.0 {
                    continue;
                }
                if objects
                    .iter()
                    .any(|o| overlaps(&o.bbox, &bbox, 2.0) || iou(&o.bbox, &bbox) > 0.0)
                {
                    continue;
                }
                let color = shape.color(class_id, &mut rng);
                for (x, y) in pixels {
                    img.put_pixel(x, y, Rgb(color.map(|v| v.round() as u8)));
                }
                objects.push(AnnotatedObject {
                    class_name: CLASS_NAMES[class_id].to_string(),
                    bbox,
                });
                placed = true;
                break;
            }
            if placed {
                bag.pop();
            }
        }
        manifest.records.push(AnnotatedImage {
            id: format!("synth_{i:05}"),
            image_ref: ImageRef::Memory(Arc::new(img)),
            width: image_size,
            height: image_size,
            objects,
            domain_id: 0,
            degradation: None,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_records_in_bounds() {
        let m = generate_synthetic_dataset(8, 96, 7).unwrap();
        assert_eq!(m.len(), 8);
        assert!(m.violations().is_empty());
        for r in &m.records {
            assert!((1..=4).contains(&r.objects.len()));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(5, 64, 3).unwrap();
        let b = generate_synthetic_dataset(5, 64, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(5, 64, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn raster_box_is_tight() {
        let (pixels, b) = rasterize(&Shape::Disk { r: 5.0 }, 10.0, 10.0, 32).unwrap();
        assert_eq!(b, BBox::new(5.0, 5.0, 15.0, 15.0));
        assert!(pixels.contains(&(5, 9)) && pixels.contains(&(14, 10)));
    }

    #[test]
    fn class_bag_covers_all_classes() {
        let m = generate_synthetic_dataset(40, 64, 2).unwrap();
        let mut seen = [0usize; 5];
        for r in &m.records {
            for o in &r.objects {
                seen[CLASS_NAMES.iter().position(|c| *c == o.class_name).unwrap()] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }
}
