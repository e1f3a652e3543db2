use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::augment::apply_domain_augmentation;
use crate::boxes::BBox;
use crate::error::{MarsError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Where the pixels of a record come from.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageRef::Path(a), ImageRef::Path(b)) => a == b,
            (ImageRef::Memory(a), ImageRef::Memory(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    #[serde(rename = "class")]
    pub class_name: String,
    pub bbox: BBox,
}

/// A photometric degradation applied when the record is loaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub domain_id: usize,
    pub strength: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image_ref: ImageRef,
    pub width: u32,
    pub height: u32,
    /// Boxes in original-image pixels.
    pub objects: Vec<AnnotatedObject>,
    pub domain_id: usize,
    pub degradation: Option<Degradation>,
}

impl AnnotatedImage {
    /// Decoded pixels with the degradation, if any, applied.
    pub fn load_pixels(&self) -> Result<RgbImage> {
        let base = match &self.image_ref {
            ImageRef::Memory(img) => (**img).clone(),
            ImageRef::Path(p) => image::open(p)
                .map_err(|e| MarsError::Image {
                    path: p.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8(),
        };
        if base.dimensions() != (self.width, self.height) {
            return Err(MarsError::Data(format!(
                "image {}: decoded size {:?} differs from the recorded {}x{}",
                self.id,
                base.dimensions(),
                self.width,
                self.height
            )));
        }
        match self.degradation {
            Some(d) => apply_domain_augmentation(&base, d.domain_id, d.strength, d.seed),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub classes: Vec<String>,
    /// Human-readable name of each domain id.
    pub domains: Vec<String>,
    pub records: Vec<AnnotatedImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    split: String,
    classes: Vec<String>,
    domains: Vec<String>,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    id: String,
    image: String,
    width: u32,
    height: u32,
    domain_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degradation: Option<Degradation>,
    objects: Vec<AnnotatedObject>,
}

impl DatasetManifest {
    pub fn empty(split: &str) -> Self {
        DatasetManifest {
            split: split.to_string(),
            classes: super::default_classes(),
            domains: super::default_domains(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Every problem found, one entry each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.domains.is_empty() {
            v.push("manifest lists no domains".to_string());
        }
        let mut ids = std::collections::HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                v.push(format!("duplicate record id {}", r.id));
            }
            if r.width == 0 || r.height == 0 {
                v.push(format!("{}: empty image size", r.id));
            }
            if r.domain_id >= self.domains.len() {
                v.push(format!(
                    "{}: domain id {} outside [0, {})",
                    r.id,
                    r.domain_id,
                    self.domains.len()
                ));
            }
            for o in &r.objects {
                if self.class_index(&o.class_name).is_none() {
                    v.push(format!("{}: class {} not in the class list", r.id, o.class_name));
                }
                let b = o.bbox;
                if !b.has_area()
                    || b.x_min < 0.0
                    || b.y_min < 0.0
                    || b.x_max > r.width as f64
                    || b.y_max > r.height as f64
                {
                    v.push(format!(
                        "{}: box {:?} invalid or out of bounds",
                        r.id,
                        b.to_array()
                    ));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MarsError::Data(v.join("; ")))
        }
    }

    /// Write in-memory images as PNGs under `dir/images` and point the
    /// records at the files.
    pub fn materialize_images(&mut self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        for r in &mut self.records {
            if let ImageRef::Memory(img) = &r.image_ref {
                fs::create_dir_all(&img_dir).map_err(|e| MarsError::io(&img_dir, e))?;
                let path = img_dir.join(format!("{}.png", r.id));
                img.save(&path).map_err(|e| MarsError::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                r.image_ref = ImageRef::Path(path);
            }
        }
        Ok(())
    }

    pub fn to_json(&self, base_dir: &Path) -> Result<String> {
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let image = match &r.image_ref {
                ImageRef::Path(p) => p
                    .strip_prefix(base_dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/"),
                ImageRef::Memory(_) => {
                    return Err(MarsError::Data(format!(
                        "record {} holds in-memory pixels; materialize images before saving",
                        r.id
                    )))
                }
            };
            records.push(RecordFile {
                id: r.id.clone(),
                image,
                width: r.width,
                height: r.height,
                domain_id: r.domain_id,
                degradation: r.degradation,
                objects: r.objects.clone(),
            });
        }
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            split: self.split.clone(),
            classes: self.classes.clone(),
            domains: self.domains.clone(),
            records,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    /// Image paths are written relative to the manifest's directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let text = self.to_json(base)?;
        fs::write(path, text).map_err(|e| MarsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MarsError::io(path, e))?;
        let file: ManifestFile =
            serde_json::from_str(&text).map_err(|e| MarsError::Data(format!("{}: {e}", path.display())))?;
        if file.version != MANIFEST_VERSION {
            return Err(MarsError::Data(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                file.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let records = file
            .records
            .into_iter()
            .map(|r| {
                let p = PathBuf::from(&r.image);
                AnnotatedImage {
                    id: r.id,
                    image_ref: ImageRef::Path(if p.is_absolute() { p } else { base.join(p) }),
                    width: r.width,
                    height: r.height,
                    objects: r.objects,
                    domain_id: r.domain_id,
                    degradation: r.degradation,
                }
            })
            .collect();
        let m = DatasetManifest {
            split: file.split,
            classes: file.classes,
            domains: file.domains,
            records,
        };
        m.validate()?;
        Ok(m)
    }
}
