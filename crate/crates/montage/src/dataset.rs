//! Detection-style annotation parsing and the indexed dataset view.
//!
//! The annotation format is a JSON subset structurally compatible with common
//! detection exports: a top-level object with `images`, `annotations` (boxes
//! as `[x, y, w, h]`), and `categories` arrays. Unknown per-record fields
//! (crowd flags, segmentation polygons, ...) are carried through round-trip
//! serialization untouched.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{MontageError, Result};

/// Axis-aligned box in pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(MontageError::InvalidBBox(format!("non-finite: {b:?}")));
        }
        if x_min < 0.0 || y_min < 0.0 || x_min >= x_max || y_min >= y_max {
            return Err(MontageError::InvalidBBox(format!(
                "requires 0 <= min < max: {b:?}"
            )));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.width() / self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub id: i64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: i64,
    pub bbox: BBox,
    pub category_id: i64,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: i64,
    pub name: String,
    pub extra: Map<String, Value>,
}

/// Fully resolved dataset view. Immutable after construction; safe to share.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    /// Boxes dropped because they degenerated (side <= 1 px) after clamping.
    pub dropped_degenerate: usize,
    image_pos: HashMap<i64, usize>,
    category_pos: HashMap<i64, usize>,
}

impl DatasetIndex {
    /// Number of foreground categories C.
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, id: i64) -> Option<&ImageInfo> {
        self.image_pos.get(&id).map(|&i| &self.images[i])
    }

    /// Contiguous class index in `[0, C)` for a category id.
    pub fn category_index(&self, id: i64) -> Option<usize> {
        self.category_pos.get(&id).copied()
    }

    /// Annotations grouped per image id (images without annotations included).
    pub fn annotations_by_image(&self) -> HashMap<i64, Vec<&Annotation>> {
        let mut map: HashMap<i64, Vec<&Annotation>> =
            self.images.iter().map(|im| (im.id, Vec::new())).collect();
        for ann in &self.annotations {
            map.get_mut(&ann.image_id).unwrap().push(ann);
        }
        map
    }
}

#[derive(Deserialize, Serialize)]
struct RawDocument {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize, Serialize)]
struct RawImage {
    id: i64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Deserialize, Serialize)]
struct RawAnnotation {
    image_id: i64,
    bbox: [f64; 4],
    category_id: i64,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Deserialize, Serialize)]
struct RawCategory {
    id: i64,
    name: String,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Parse an annotation document into a resolved [`DatasetIndex`].
///
/// Boxes given as `(x, y, w, h)` are converted to corner form and clamped to
/// their image bounds; boxes that degenerate after clamping are dropped and
/// counted in `dropped_degenerate`.
pub fn parse_annotations(bytes: &[u8]) -> Result<DatasetIndex> {
    let raw: RawDocument = serde_json::from_slice(bytes).map_err(|e| MontageError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let images: Vec<ImageInfo> = raw
        .images
        .into_iter()
        .map(|im| ImageInfo {
            id: im.id,
            file_name: im.file_name,
            width: im.width,
            height: im.height,
            extra: im.extra,
        })
        .collect();
    let categories: Vec<Category> = raw
        .categories
        .into_iter()
        .map(|c| Category {
            id: c.id,
            name: c.name,
            extra: c.extra,
        })
        .collect();
    let image_pos: HashMap<i64, usize> =
        images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let category_pos: HashMap<i64, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id, i))
        .collect();

    let mut annotations = Vec::with_capacity(raw.annotations.len());
    let mut dropped = 0usize;
    for ann in raw.annotations {
        let im = image_pos
            .get(&ann.image_id)
            .map(|&i| &images[i])
            .ok_or(MontageError::DanglingReference {
                kind: "image",
                id: ann.image_id,
            })?;
        if !category_pos.contains_key(&ann.category_id) {
            return Err(MontageError::DanglingReference {
                kind: "category",
                id: ann.category_id,
            });
        }
        let [x, y, w, h] = ann.bbox;
        let x_min = x.max(0.0).min(im.width as f64);
        let y_min = y.max(0.0).min(im.height as f64);
        let x_max = (x + w).max(0.0).min(im.width as f64);
        let y_max = (y + h).max(0.0).min(im.height as f64);
        if x_max - x_min <= 1.0 || y_max - y_min <= 1.0 {
            dropped += 1;
            continue;
        }
        annotations.push(Annotation {
            image_id: ann.image_id,
            bbox: BBox::new(x_min, y_min, x_max, y_max)?,
            category_id: ann.category_id,
            extra: ann.extra,
        });
    }

    Ok(DatasetIndex {
        images,
        annotations,
        categories,
        dropped_degenerate: dropped,
        image_pos,
        category_pos,
    })
}

/// Serialize an index back to the annotation subset format.
pub fn serialize_annotations(index: &DatasetIndex) -> Vec<u8> {
    let raw = RawDocument {
        images: index
            .images
            .iter()
            .map(|im| RawImage {
                id: im.id,
                file_name: im.file_name.clone(),
                width: im.width,
                height: im.height,
                extra: im.extra.clone(),
            })
            .collect(),
        annotations: index
            .annotations
            .iter()
            .map(|a| RawAnnotation {
                image_id: a.image_id,
                bbox: [
                    a.bbox.x_min,
                    a.bbox.y_min,
                    a.bbox.width(),
                    a.bbox.height(),
                ],
                category_id: a.category_id,
                extra: a.extra.clone(),
            })
            .collect(),
        categories: index
            .categories
            .iter()
            .map(|c| RawCategory {
                id: c.id,
                name: c.name.clone(),
                extra: c.extra.clone(),
            })
            .collect(),
    };
    serde_json::to_vec_pretty(&raw).expect("dataset serialization cannot fail")
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut cur_line = 1usize;
    let mut offset = 0usize;
    for (i, &b) in bytes.iter().enumerate() {
        if cur_line == line {
            offset = i;
            break;
        }
        if b == b'\n' {
            cur_line += 1;
            offset = i + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_doc() -> Vec<u8> {
        br#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [{"image_id": 1, "bbox": [10, 10, 20, 40], "category_id": 3}],
            "categories": [{"id": 3, "name": "cat"}, {"id": 5, "name": "dog"}]
        }"#
        .to_vec()
    }

    #[test]
    fn corner_conversion() {
        let idx = parse_annotations(&fixture_doc()).unwrap();
        let b = idx.annotations[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (10.0, 10.0, 30.0, 50.0));
        assert_eq!(idx.num_categories(), 2);
        assert_eq!(idx.category_index(3), Some(0));
        assert_eq!(idx.category_index(5), Some(1));
    }

    #[test]
    fn empty_annotation_list() {
        let doc = br#"{"images": [], "annotations": [], "categories": [{"id": 0, "name": "x"}]}"#;
        let idx = parse_annotations(doc).unwrap();
        assert_eq!(idx.annotations.len(), 0);
        assert_eq!(idx.num_categories(), 1);
    }

    #[test]
    fn dangling_image_reference() {
        let doc = br#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
            "annotations": [{"image_id": 99, "bbox": [0, 0, 5, 5], "category_id": 0}],
            "categories": [{"id": 0, "name": "x"}]
        }"#;
        match parse_annotations(doc) {
            Err(MontageError::DanglingReference { kind: "image", id: 99 }) => {}
            other => panic!("expected dangling image error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_document_reports_offset() {
        let doc = b"{\"images\": [,]}";
        match parse_annotations(doc) {
            Err(MontageError::Parse { offset, .. }) => assert!(offset > 0 && offset < doc.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn clamping_and_degenerate_drop() {
        let doc = br#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 50, "height": 50}],
            "annotations": [
                {"image_id": 1, "bbox": [-10, -10, 30, 30], "category_id": 0},
                {"image_id": 1, "bbox": [49.5, 0, 10, 10], "category_id": 0}
            ],
            "categories": [{"id": 0, "name": "x"}]
        }"#;
        let idx = parse_annotations(doc).unwrap();
        assert_eq!(idx.annotations.len(), 1);
        assert_eq!(idx.dropped_degenerate, 1);
        let b = idx.annotations[0].bbox;
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 20.0, 20.0));
    }

    #[test]
    fn round_trip_identical() {
        let doc = br#"{
            "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
            "annotations": [{"image_id": 1, "bbox": [10.5, 10.25, 20, 40], "category_id": 3,
                             "iscrowd": 0, "segmentation": [[1, 2, 3]]}],
            "categories": [{"id": 3, "name": "cat"}]
        }"#;
        let idx = parse_annotations(doc).unwrap();
        let ser = serialize_annotations(&idx);
        let idx2 = parse_annotations(&ser).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(idx.annotations[0].extra.get("iscrowd"), Some(&Value::from(0)));
    }
}
