use image::{imageops, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, Degradation};
use crate::error::{MarsError, Result};
use crate::params::keyed_rng;

pub const NUM_DEGRADATIONS: usize = 6;

/// Strength of each degradation, domains 1 to 6.
pub const DEFAULT_STRENGTHS: [f64; NUM_DEGRADATIONS] = [1.0; NUM_DEGRADATIONS];

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_channels(image: &RgbImage, f: impl Fn(usize, f64) -> f64) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p.0[c] = to_u8(f(c, p.0[c] as f64));
        }
    }
    out
}

fn channel_means(image: &RgbImage) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for p in image.pixels() {
        for c in 0..3 {
            sum[c] += p.0[c] as f64;
        }
    }
    let n = (image.width() as f64 * image.height() as f64).max(1.0);
    sum.map(|s| s / n)
}

/// Apply degradation `domain_id` at `strength` in `[0, 1]`.
///
/// 0 identity, 1 green cast, 2 blue cast, 3 haze, 4 contrast reduction,
/// 5 Gaussian blur, 6 sensor noise.
pub fn apply_domain_augmentation(
    image: &RgbImage,
    domain_id: usize,
    strength: f64,
    seed: u64,
) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(MarsError::config(format!(
            "augmentation strength must lie in [0, 1], got {strength}"
        )));
    }
    let s = strength;
    let out = match domain_id {
        0 => image.clone(),
        1 => map_channels(image, |c, v| match c {
            0 => v * (1.0 - 0.5 * s),
            1 => v + (255.0 - v) * 0.25 * s,
            _ => v * (1.0 - 0.35 * s),
        }),
        2 => map_channels(image, |c, v| match c {
            0 => v * (1.0 - 0.55 * s),
            1 => v * (1.0 - 0.2 * s),
            _ => v + (255.0 - v) * 0.3 * s,
        }),
        3 => {
            let k = 0.55 * s;
            map_channels(image, |_, v| v * (1.0 - k) + 220.0 * k)
        }
        4 => {
            let mean = channel_means(image);
            let k = 1.0 - 0.7 * s;
            map_channels(image, |c, v| mean[c] + (v - mean[c]) * k)
        }
        5 => {
            let sigma = 2.0 * s;
            if sigma < 0.05 {
                image.clone()
            } else {
                imageops::blur(image, sigma as f32)
            }
        }
        6 => {
            let mut rng = keyed_rng(seed, &format!("noise/{}", strength.to_bits()));
            let sd = 25.0 * s;
            let mut out = image.clone();
            if sd > 0.0 {
                let normal = Normal::new(0.0, sd).expect("positive deviation");
                for p in out.pixels_mut() {
                    for c in 0..3 {
                        p.0[c] = to_u8(p.0[c] as f64 + normal.sample(&mut rng));
                    }
                }
            }
            out
        }
        other => {
            return Err(MarsError::config(format!(
                "unknown domain id {other}; expected 0..{}",
                NUM_DEGRADATIONS + 1
            )))
        }
    };
    Ok(out)
}

/// The source records plus one degraded copy per record per domain 1..=6.
///
/// Copies reference the source pixels and carry the degradation recipe, so
/// the manifest stays small; pixels are produced on load.
pub fn build_augmented_dataset(
    manifest: &DatasetManifest,
    strengths: &[f64; NUM_DEGRADATIONS],
    seed: u64,
) -> Result<DatasetManifest> {
    if let Some(bad) = strengths.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(MarsError::config(format!(
            "augmentation strength must lie in [0, 1], got {bad}"
        )));
    }
    let mut records = manifest.records.clone();
    for r in &manifest.records {
        for d in 1..=NUM_DEGRADATIONS {
            let mut copy = r.clone();
            copy.id = format!("{}@d{d}", r.id);
            copy.domain_id = d;
            copy.degradation = Some(Degradation {
                domain_id: d,
                strength: strengths[d - 1],
                seed: keyed_rng(seed, &copy.id).random(),
            });
            records.push(copy);
        }
    }
    Ok(DatasetManifest {
        split: format!("{}-augmented", manifest.split),
        classes: manifest.classes.clone(),
        domains: super::default_domains(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn checker() -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        })
    }

    #[test]
    fn domain_zero_is_identity() {
        let img = checker();
        assert_eq!(apply_domain_augmentation(&img, 0, 1.0, 3).unwrap(), img);
    }

    #[test]
    fn contrast_reduction_contracts() {
        let img = checker();
        let out = apply_domain_augmentation(&img, 4, 1.0, 0).unwrap();
        for (a, b) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                let before = (a.0[c] as f64 - 127.5).abs();
                let after = (b.0[c] as f64 - 127.5).abs();
                assert!(after < before);
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let img = checker();
        for d in 0..7 {
            let a = apply_domain_augmentation(&img, d, 0.7, 11).unwrap();
            let b = apply_domain_augmentation(&img, d, 0.7, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.dimensions(), img.dimensions());
        }
        assert!(apply_domain_augmentation(&img, 7, 1.0, 0).is_err());
        assert!(apply_domain_augmentation(&img, 1, 1.5, 0).is_err());
    }
}
