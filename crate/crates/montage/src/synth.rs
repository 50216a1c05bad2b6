//! Deterministic synthetic shape dataset: colored rectangles on a noisy
//! dark background, with tall/wide/square boxes so every aspect group is
//! populated. Used by the desk-scale training runs and the test fixtures.

use std::path::Path;

use rand::Rng;
use serde_json::json;

use crate::dataset::{parse_annotations, DatasetIndex};
use crate::error::{MontageError, Result};
use crate::imageio::ImageBuffer;
use crate::rng::stream_rng2;
use crate::sampling::iou;

const SYNTH_STREAM: u64 = 0x73796e;
const NOISE_STREAM: u64 = 0x6e6f69;

/// Foreground class colors; class identity is carried by color so a small
/// network can separate them.
const CLASS_COLORS: [[u8; 3]; 4] = [
    [204, 40, 40],  // red
    [40, 190, 60],  // green
    [50, 70, 215],  // blue
    [220, 205, 40], // yellow
];
const CLASS_NAMES: [&str; 4] = ["red", "green", "blue", "yellow"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub num_images: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_images: usize, seed: u64) -> Self {
        SynthSpec {
            num_images,
            width: 128,
            height: 128,
            seed,
        }
    }
}

/// Integer box in xywh form, pre-validation.
#[derive(Debug, Clone, Copy)]
struct Box4 {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    class: usize,
}

fn draw_boxes(spec: &SynthSpec, image_id: i64) -> Vec<Box4> {
    let mut rng = stream_rng2(spec.seed, SYNTH_STREAM, image_id as u64);
    let n_objects = rng.gen_range(1..=3usize);
    let mut boxes: Vec<Box4> = Vec::new();
    for _ in 0..n_objects {
        for _attempt in 0..20 {
            let class = rng.gen_range(0..CLASS_COLORS.len());
            // shape kind populates all three aspect groups
            let (w, h) = match rng.gen_range(0..3u32) {
                0 => {
                    let s = rng.gen_range(24..=56u32);
                    (s, s)
                }
                1 => {
                    let w = rng.gen_range(12..=20u32);
                    (w, (w as f64 * rng.gen_range(2.2..3.2)) as u32)
                }
                _ => {
                    let h = rng.gen_range(12..=20u32);
                    ((h as f64 * rng.gen_range(2.2..3.2)) as u32, h)
                }
            };
            if w + 2 >= spec.width || h + 2 >= spec.height {
                continue;
            }
            let x = rng.gen_range(1..spec.width - w - 1);
            let y = rng.gen_range(1..spec.height - h - 1);
            let candidate = crate::dataset::BBox::new(
                x as f64,
                y as f64,
                (x + w) as f64,
                (y + h) as f64,
            )
            .expect("synthetic box construction is valid by bounds");
            let clear = boxes.iter().all(|b| {
                let existing = crate::dataset::BBox::new(
                    b.x as f64,
                    b.y as f64,
                    (b.x + b.w) as f64,
                    (b.y + b.h) as f64,
                )
                .unwrap();
                iou(&candidate, &existing) == 0.0
            });
            if clear {
                boxes.push(Box4 { x, y, w, h, class });
                break;
            }
        }
    }
    boxes
}

/// Build the annotation index for a spec. Deterministic in the seed.
pub fn synth_index(spec: &SynthSpec) -> Result<DatasetIndex> {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..spec.num_images {
        let id = i as i64 + 1;
        images.push(json!({
            "id": id,
            "file_name": format!("img_{id:04}.png"),
            "width": spec.width,
            "height": spec.height,
        }));
        for b in draw_boxes(spec, id) {
            annotations.push(json!({
                "image_id": id,
                "category_id": b.class as i64 + 1,
                "bbox": [b.x, b.y, b.w, b.h],
            }));
        }
    }
    let categories: Vec<_> = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| json!({ "id": i as i64 + 1, "name": name }))
        .collect();
    let doc = json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    parse_annotations(&serde_json::to_vec(&doc).expect("json encode"))
}

/// Render one image of the dataset. Pure function of (spec, image_id).
pub fn render_image(spec: &SynthSpec, image_id: i64) -> ImageBuffer {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut noise = stream_rng2(spec.seed, NOISE_STREAM, image_id as u64);
    let mut img = ImageBuffer::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let g = noise.gen_range(10..=60u8);
            img.set_pixel(x, y, [g, g, g]);
        }
    }
    for b in draw_boxes(spec, image_id) {
        let base = CLASS_COLORS[b.class];
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                let jitter = noise.gen_range(-20i16..=20i16);
                let px = base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8);
                img.set_pixel(x as usize, y as usize, px);
            }
        }
    }
    img
}

/// Write `annotations.json` plus `images/img_XXXX.png` under `dir`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<DatasetIndex> {
    let index = synth_index(spec)?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|source| MontageError::Io {
        path: images_dir.clone(),
        source,
    })?;
    for info in &index.images {
        let img = render_image(spec, info.id);
        let path = images_dir.join(&info.file_name);
        let rgb = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("raw buffer matches dimensions");
        rgb.save(&path).map_err(|e| MontageError::ImageDecode {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    let ann_path = dir.join("annotations.json");
    std::fs::write(&ann_path, crate::dataset::serialize_annotations(&index)).map_err(
        |source| MontageError::Io {
            path: ann_path,
            source,
        },
    )?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::{classify_aspect, AspectGroup};

    #[test]
    fn index_is_deterministic() {
        let spec = SynthSpec::new(20, 7);
        assert_eq!(synth_index(&spec).unwrap(), synth_index(&spec).unwrap());
        let other = SynthSpec::new(20, 8);
        assert_ne!(synth_index(&spec).unwrap(), synth_index(&other).unwrap());
    }

    #[test]
    fn boxes_in_bounds_and_disjoint_per_image() {
        let spec = SynthSpec::new(50, 3);
        let idx = synth_index(&spec).unwrap();
        let by_image = idx.annotations_by_image();
        for (_, anns) in &by_image {
            for (i, a) in anns.iter().enumerate() {
                assert!(a.bbox.x_min >= 0.0 && a.bbox.y_min >= 0.0);
                assert!(a.bbox.x_max <= 128.0 && a.bbox.y_max <= 128.0);
                for b in &anns[i + 1..] {
                    assert_eq!(iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn all_classes_and_aspect_groups_appear() {
        let spec = SynthSpec::new(100, 11);
        let idx = synth_index(&spec).unwrap();
        let mut classes = [false; 4];
        let mut groups = [false; 3];
        for a in &idx.annotations {
            classes[(a.category_id - 1) as usize] = true;
            match classify_aspect(a.bbox.width(), a.bbox.height()) {
                AspectGroup::Square => groups[0] = true,
                AspectGroup::Tall => groups[1] = true,
                AspectGroup::Wide => groups[2] = true,
            }
        }
        assert_eq!(classes, [true; 4]);
        assert_eq!(groups, [true; 3]);
    }

    #[test]
    fn rendered_objects_carry_their_class_color() {
        let spec = SynthSpec::new(10, 5);
        let idx = synth_index(&spec).unwrap();
        for a in idx.annotations.iter().take(10) {
            let img = render_image(&spec, a.image_id);
            let cx = ((a.bbox.x_min + a.bbox.x_max) / 2.0) as usize;
            let cy = ((a.bbox.y_min + a.bbox.y_max) / 2.0) as usize;
            let px = img.pixel(cx, cy);
            let base = CLASS_COLORS[(a.category_id - 1) as usize];
            for (p, b) in px.iter().zip(&base) {
                assert!((*p as i16 - *b as i16).abs() <= 20, "{px:?} vs {base:?}");
            }
        }
    }

    #[test]
    fn write_round_trips_through_the_parser() {
        let spec = SynthSpec::new(4, 1);
        let dir = tempfile::tempdir().unwrap();
        let idx = write_synthetic(dir.path(), &spec).unwrap();
        let bytes = std::fs::read(dir.path().join("annotations.json")).unwrap();
        let reparsed = parse_annotations(&bytes).unwrap();
        assert_eq!(idx, reparsed);
        // every image file decodes back to the rendered pixels
        let img0 = crate::imageio::load_image(
            &dir.path().join("images").join(&idx.images[0].file_name),
        )
        .unwrap();
        assert_eq!(img0, render_image(&spec, idx.images[0].id));
    }
}
