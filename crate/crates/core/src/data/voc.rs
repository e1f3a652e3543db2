use std::fs;
use std::path::{Path, PathBuf};

use super::manifest::{AnnotatedImage, AnnotatedObject, DatasetManifest, ImageRef};
use crate::boxes::BBox;
use crate::error::{MarsError, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

fn annotation_error(path: &Path, node: roxmltree::Node<'_, '_>, message: String) -> MarsError {
    let pos = node.document().text_pos_at(node.range().start);
    MarsError::Annotation {
        path: path.to_path_buf(),
        line: pos.row,
        message,
    }
}

fn child<'a, 'input>(node: roxmltree::Node<'a, 'input>, name: &str) -> Option<roxmltree::Node<'a, 'input>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|c| c.text()).map(str::trim)
}

fn number(path: &Path, parent: roxmltree::Node<'_, '_>, name: &str) -> Result<f64> {
    let node =
        child(parent, name).ok_or_else(|| annotation_error(path, parent, format!("missing <{name}>")))?;
    let text = node.text().unwrap_or("").trim();
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| annotation_error(path, node, format!("<{name}> is not a number: {text:?}")))
}

fn find_image(root: &Path, xml: &Path, filename: Option<&str>) -> Option<PathBuf> {
    let dirs = [root.to_path_buf(), root.join("JPEGImages"), root.join("images")];
    if let Some(f) = filename {
        for d in &dirs {
            let p = d.join(f);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    let stem = xml.file_stem()?;
    for d in &dirs {
        for ext in IMAGE_EXTENSIONS {
            let p = d.join(stem).with_extension(ext);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

struct Parsed {
    record: AnnotatedImage,
    unknown: Vec<String>,
    dropped: usize,
}

fn parse_file(root: &Path, path: &Path, classes: &[String]) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| MarsError::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| MarsError::Annotation {
        path: path.to_path_buf(),
        line: e.pos().row,
        message: e.to_string(),
    })?;
    let ann = doc.root_element();
    if !ann.has_tag_name("annotation") {
        return Err(annotation_error(
            path,
            ann,
            format!(
                "root element is <{}>, expected <annotation>",
                ann.tag_name().name()
            ),
        ));
    }
    let image_path = find_image(root, path, child_text(ann, "filename"))
        .ok_or_else(|| MarsError::Data(format!("{}: no image file found for annotation", path.display())))?;
    let (width, height) = match child(ann, "size") {
        Some(size) => (
            number(path, size, "width")? as u32,
            number(path, size, "height")? as u32,
        ),
        None => image::image_dimensions(&image_path).map_err(|e| MarsError::Image {
            path: image_path.clone(),
            message: e.to_string(),
        })?,
    };
    if width == 0 || height == 0 {
        return Err(annotation_error(path, ann, "image size is zero".into()));
    }
    let mut objects = Vec::new();
    let mut unknown = Vec::new();
    let mut dropped = 0;
    for obj in ann.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")
            .ok_or_else(|| annotation_error(path, obj, "object without <name>".into()))?
            .to_string();
        let bnd = child(obj, "bndbox")
            .ok_or_else(|| annotation_error(path, obj, "object without <bndbox>".into()))?;
        let raw = BBox::new(
            number(path, bnd, "xmin")?,
            number(path, bnd, "ymin")?,
            number(path, bnd, "xmax")?,
            number(path, bnd, "ymax")?,
        );
        if !classes.contains(&name) {
            unknown.push(name);
            continue;
        }
        let bbox = raw.clip(width as f64, height as f64);
        if !bbox.has_area() {
            dropped += 1;
            continue;
        }
        objects.push(AnnotatedObject {
            class_name: name,
            bbox,
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Parsed {
        record: AnnotatedImage {
            id,
            image_ref: ImageRef::Path(image_path),
            width,
            height,
            objects,
            domain_id: 0,
            degradation: None,
        },
        unknown,
        dropped,
    })
}

/// Read every `*.xml` in `root` (or `root/Annotations`), returning the
/// manifest and the number of zero-area boxes dropped.
pub fn parse_voc_dir(root: &Path) -> Result<(DatasetManifest, usize)> {
    let mut manifest = DatasetManifest::empty("voc");
    let ann_dir = if root.join("Annotations").is_dir() {
        root.join("Annotations")
    } else {
        root.to_path_buf()
    };
    let mut xmls: Vec<PathBuf> = fs::read_dir(&ann_dir)
        .map_err(|e| MarsError::io(&ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    xmls.sort();
    let mut unknown = Vec::new();
    let mut dropped = 0;
    for x in &xmls {
        let parsed = parse_file(root, x, &manifest.classes)?;
        unknown.extend(parsed.unknown);
        dropped += parsed.dropped;
        manifest.records.push(parsed.record);
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(MarsError::UnknownClasses(unknown));
    }
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} zero-area boxes while reading {}",
            root.display()
        );
    }
    Ok((manifest, dropped))
}

/// VOC-style XML annotations to a manifest.
pub fn parse_voc_annotations(root: &Path) -> Result<DatasetManifest> {
    parse_voc_dir(root).map(|(m, _)| m)
}
