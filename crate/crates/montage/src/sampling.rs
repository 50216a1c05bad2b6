//! Positive/negative sample extraction from a dataset index.
//!
//! Positives are ground-truth boxes with randomly enlarged context (each side
//! pushed outward by up to half the box extent, so width/height at most
//! double, truncated at image edges). Negatives are background proposals with
//! exactly zero IoU against every positive of their image. The emitted set
//! keeps a configurable positive:negative ratio, 10:1 by default.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{BBox, DatasetIndex};
use crate::error::{MontageError, Result};
use crate::montage::classify_aspect;
use crate::rng::stream_rng2;

const POS_STREAM: u64 = 0x706f73; // "pos"
const NEG_STREAM: u64 = 0x6e6567; // "neg"

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// One extracted classification sample, in source-image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: i64,
    pub region: BBox,
    /// Class index in `[0, C)` for positives, background index `C` for negatives.
    pub label: usize,
    pub polarity: Polarity,
    /// Ground-truth box before context enlargement (positives only).
    pub original: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub records: Vec<SampleRecord>,
    pub pos_count: usize,
    pub neg_count: usize,
    pub seed: u64,
    /// Negatives that could not be placed within the retry budget.
    pub shortfall: usize,
}

/// Proposal-size distribution for negative sampling.
#[derive(Debug, Clone, Copy)]
pub struct NegativeConfig {
    /// Minimum proposal side length in pixels.
    pub min_side: f64,
    /// Maximum proposal side as a fraction of the shorter image side.
    pub max_frac: f64,
    /// Rejection-sampling attempts per requested proposal.
    pub retry_budget: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig {
            min_side: 16.0,
            max_frac: 0.5,
            retry_budget: 200,
        }
    }
}

/// Intersection over union. Edge-touching boxes count as disjoint (0).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Push each side of a ground-truth box outward by an independent
/// `Uniform[0,1]` fraction of half the box extent, clamped to image bounds.
pub fn enlarge_positive(b: &BBox, image_w: f64, image_h: f64, rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (b.width(), b.height());
    let u_l: f64 = rng.gen();
    let u_t: f64 = rng.gen();
    let u_r: f64 = rng.gen();
    let u_b: f64 = rng.gen();
    BBox {
        x_min: (b.x_min - u_l * w / 2.0).max(0.0),
        y_min: (b.y_min - u_t * h / 2.0).max(0.0),
        x_max: (b.x_max + u_r * w / 2.0).min(image_w),
        y_max: (b.y_max + u_b * h / 2.0).min(image_h),
    }
}

/// Draw up to `count` background proposals with exactly zero IoU against all
/// `positives`. Returns the accepted boxes and the shortfall (requested minus
/// found); the caller rebalances shortfall across other images.
pub fn sample_negatives(
    image_w: f64,
    image_h: f64,
    positives: &[BBox],
    count: usize,
    cfg: &NegativeConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<BBox>, usize) {
    let mut out = Vec::with_capacity(count);
    let max_side = (cfg.max_frac * image_w.min(image_h)).max(cfg.min_side);
    let min_side = cfg.min_side.min(image_w.min(image_h)).max(1.0);
    for _ in 0..count {
        let mut found = false;
        for _ in 0..cfg.retry_budget {
            let w = log_uniform(min_side, max_side.min(image_w), rng);
            let h = log_uniform(min_side, max_side.min(image_h), rng);
            let x = rng.gen::<f64>() * (image_w - w);
            let y = rng.gen::<f64>() * (image_h - h);
            let cand = BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            };
            if positives.iter().all(|p| iou(p, &cand) == 0.0) {
                out.push(cand);
                found = true;
                break;
            }
        }
        if !found {
            break;
        }
    }
    let shortfall = count - out.len();
    (out, shortfall)
}

fn log_uniform(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Build the balanced sample set: one enlarged positive per annotation, then
/// negatives drawn across images until `neg = round(pos / ratio)`.
///
/// Deterministic in `(index, ratio, seed)`: every random draw comes from a
/// stream keyed by `(seed, image_id)`, so per-image extraction is
/// order-independent and safe to parallelize.
pub fn build_sample_set(
    index: &DatasetIndex,
    ratio: f64,
    seed: u64,
    cfg: &NegativeConfig,
) -> Result<SampleSet> {
    if index.annotations.is_empty() {
        return Err(MontageError::NoPositives);
    }
    let num_classes = index.num_categories();
    let by_image = index.annotations_by_image();

    let mut records = Vec::new();
    let mut positives_per_image: Vec<(i64, Vec<BBox>)> = Vec::new();
    for im in &index.images {
        let anns = &by_image[&im.id];
        let mut rng = stream_rng2(seed, POS_STREAM, im.id as u64);
        let mut enlarged = Vec::with_capacity(anns.len());
        for ann in anns {
            let region = enlarge_positive(&ann.bbox, im.width as f64, im.height as f64, &mut rng);
            enlarged.push(region);
            records.push(SampleRecord {
                image_id: im.id,
                region,
                label: index
                    .category_index(ann.category_id)
                    .expect("category resolved at parse time"),
                polarity: Polarity::Positive,
                original: Some(ann.bbox),
            });
        }
        positives_per_image.push((im.id, enlarged));
    }
    let pos_count = records.len();
    let neg_target = (pos_count as f64 / ratio).round() as usize;

    // Round-robin over images, one proposal at a time, rebalancing shortfall
    // from crowded images onto the rest.
    let mut neg_found = 0usize;
    let mut streams: Vec<(usize, ChaCha8Rng, bool)> = positives_per_image
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (i, stream_rng2(seed, NEG_STREAM, *id as u64), false))
        .collect();
    while neg_found < neg_target {
        let mut progressed = false;
        for (img_idx, rng, exhausted) in streams.iter_mut() {
            if neg_found >= neg_target || *exhausted {
                continue;
            }
            let (image_id, positives) = &positives_per_image[*img_idx];
            let im = index.image(*image_id).unwrap();
            let (boxes, shortfall) = sample_negatives(
                im.width as f64,
                im.height as f64,
                positives,
                1,
                cfg,
                rng,
            );
            if shortfall > 0 {
                *exhausted = true;
            }
            for region in boxes {
                records.push(SampleRecord {
                    image_id: *image_id,
                    region,
                    label: num_classes,
                    polarity: Polarity::Negative,
                    original: None,
                });
                neg_found += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    Ok(SampleSet {
        records,
        pos_count,
        neg_count: neg_found,
        seed,
        shortfall: neg_target - neg_found,
    })
}

/// Write the sample-set manifest: one tab-separated record per line with
/// image id, file name, region corners, label, polarity, and aspect group.
/// Bit-exact under a fixed seed.
pub fn write_manifest(set: &SampleSet, index: &DatasetIndex) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# montage sample-set v1\tseed={}\tpos={}\tneg={}\tshortfall={}\n",
        set.seed, set.pos_count, set.neg_count, set.shortfall
    ));
    out.push_str("# image_id\tfile_name\tx_min\ty_min\tx_max\ty_max\tlabel\tpolarity\tgroup\n");
    for r in &set.records {
        let file = index
            .image(r.image_id)
            .map(|im| im.file_name.as_str())
            .unwrap_or("?");
        let polarity = match r.polarity {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
        };
        let group = classify_aspect(r.region.width(), r.region.height());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.image_id,
            file,
            r.region.x_min,
            r.region.y_min,
            r.region.x_max,
            r.region.y_max,
            r.label,
            polarity,
            group.tag()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_annotations;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identity() {
        let b = bb(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_edge_touching_is_zero() {
        assert_eq!(iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        let v = iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(5.0, 5.0, 15.0, 15.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
    }

    /// Test double with pinned uniform draws.
    fn enlarge_with_draws(b: &BBox, iw: f64, ih: f64, u: [f64; 4]) -> BBox {
        let (w, h) = (b.width(), b.height());
        BBox {
            x_min: (b.x_min - u[0] * w / 2.0).max(0.0),
            y_min: (b.y_min - u[1] * h / 2.0).max(0.0),
            x_max: (b.x_max + u[2] * w / 2.0).min(iw),
            y_max: (b.y_max + u[3] * h / 2.0).min(ih),
        }
    }

    #[test]
    fn enlarge_zero_draws_is_identity() {
        let b = bb(40.0, 40.0, 60.0, 60.0);
        assert_eq!(enlarge_with_draws(&b, 200.0, 200.0, [0.0; 4]), b);
    }

    #[test]
    fn enlarge_full_draws_doubles() {
        let b = bb(40.0, 40.0, 60.0, 60.0);
        let e = enlarge_with_draws(&b, 200.0, 200.0, [1.0; 4]);
        assert_eq!(e, bb(30.0, 30.0, 70.0, 70.0));
    }

    #[test]
    fn enlarge_truncates_at_edges() {
        let b = bb(0.0, 0.0, 20.0, 20.0);
        let e = enlarge_with_draws(&b, 100.0, 100.0, [1.0; 4]);
        assert_eq!(e, bb(0.0, 0.0, 30.0, 30.0));
    }

    #[test]
    fn negatives_avoid_positives() {
        let positives = vec![bb(0.0, 0.0, 50.0, 100.0)];
        let mut rng = stream_rng(9, 0);
        let (boxes, _) =
            sample_negatives(100.0, 100.0, &positives, 20, &NegativeConfig::default(), &mut rng);
        assert!(!boxes.is_empty());
        for b in &boxes {
            assert_eq!(iou(&b.clone(), &positives[0]), 0.0);
            assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 100.0 && b.y_max <= 100.0);
        }
    }

    #[test]
    fn negatives_shortfall_when_image_is_full() {
        let positives = vec![bb(0.0, 0.0, 100.0, 100.0)];
        let mut rng = stream_rng(9, 0);
        let (boxes, shortfall) =
            sample_negatives(100.0, 100.0, &positives, 5, &NegativeConfig::default(), &mut rng);
        assert!(boxes.is_empty());
        assert_eq!(shortfall, 5);
    }

    #[test]
    fn negatives_all_accepted_without_positives() {
        let mut rng = stream_rng(9, 0);
        let (boxes, shortfall) =
            sample_negatives(100.0, 100.0, &[], 7, &NegativeConfig::default(), &mut rng);
        assert_eq!(boxes.len(), 7);
        assert_eq!(shortfall, 0);
    }

    fn synth_index(num_images: usize, anns_per_image: usize) -> DatasetIndex {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..num_images {
            images.push(serde_json::json!({
                "id": i, "file_name": format!("{i}.png"), "width": 200, "height": 200
            }));
            for j in 0..anns_per_image {
                annotations.push(serde_json::json!({
                    "image_id": i,
                    "bbox": [10.0 + 15.0 * j as f64, 20.0, 12.0, 14.0],
                    "category_id": (j % 3) as i64
                }));
            }
        }
        let doc = serde_json::json!({
            "images": images,
            "annotations": annotations,
            "categories": [
                {"id": 0, "name": "a"}, {"id": 1, "name": "b"}, {"id": 2, "name": "c"}
            ]
        });
        parse_annotations(&serde_json::to_vec(&doc).unwrap()).unwrap()
    }

    #[test]
    fn ratio_ten_to_one() {
        let index = synth_index(25, 4); // 100 positives
        let set = build_sample_set(&index, 10.0, 7, &NegativeConfig::default()).unwrap();
        assert_eq!(set.pos_count, 100);
        assert_eq!(set.neg_count, 10);
    }

    #[test]
    fn single_annotation_rounds_to_zero_negatives() {
        let index = synth_index(1, 1);
        let set = build_sample_set(&index, 10.0, 7, &NegativeConfig::default()).unwrap();
        assert_eq!(set.pos_count, 1);
        assert_eq!(set.neg_count, 0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let index = synth_index(3, 0);
        assert!(matches!(
            build_sample_set(&index, 10.0, 7, &NegativeConfig::default()),
            Err(MontageError::NoPositives)
        ));
    }

    #[test]
    fn fixed_seed_reproduces_manifest() {
        let index = synth_index(8, 3);
        let cfg = NegativeConfig::default();
        let a = build_sample_set(&index, 10.0, 42, &cfg).unwrap();
        let b = build_sample_set(&index, 10.0, 42, &cfg).unwrap();
        assert_eq!(write_manifest(&a, &index), write_manifest(&b, &index));
        let c = build_sample_set(&index, 10.0, 43, &cfg).unwrap();
        assert_ne!(write_manifest(&a, &index), write_manifest(&c, &index));
    }

    #[test]
    fn emitted_negatives_have_zero_iou_brute_force() {
        let index = synth_index(10, 4);
        let set = build_sample_set(&index, 5.0, 11, &NegativeConfig::default()).unwrap();
        for n in set.records.iter().filter(|r| r.polarity == Polarity::Negative) {
            for p in set
                .records
                .iter()
                .filter(|r| r.polarity == Polarity::Positive && r.image_id == n.image_id)
            {
                assert_eq!(iou(&n.region, &p.region), 0.0);
            }
        }
    }

    #[test]
    fn enlarged_positive_contains_original_within_bounds() {
        let index = synth_index(10, 4);
        let set = build_sample_set(&index, 10.0, 5, &NegativeConfig::default()).unwrap();
        for r in set.records.iter().filter(|r| r.polarity == Polarity::Positive) {
            let o = r.original.unwrap();
            assert!(r.region.contains(&o));
            assert!(r.region.width() <= 2.0 * o.width() + 1e-9);
            assert!(r.region.height() <= 2.0 * o.height() + 1e-9);
            let im = index.image(r.image_id).unwrap();
            assert!(r.region.x_max <= im.width as f64 && r.region.y_max <= im.height as f64);
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..100.0f64, ay in 0.0..100.0f64, aw in 1.0..50.0f64, ah in 1.0..50.0f64,
            bx in 0.0..100.0f64, by in 0.0..100.0f64, bw in 1.0..50.0f64, bh in 1.0..50.0f64,
        ) {
            let a = bb(ax, ay, ax + aw, ay + ah);
            let b = bb(bx, by, bx + bw, by + bh);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            if v == 1.0 {
                prop_assert_eq!(a, b);
            }
        }
    }
}
