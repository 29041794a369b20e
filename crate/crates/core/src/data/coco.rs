//! COCO 2017 annotation ingestion. Reads an instances JSON and a captions
//! JSON, producing one [`SceneSample`] per usable image:
//!
//! - boxes `[x, y, w, h]` (top-left, absolute pixels) become normalized
//!   center form, clamped to the image;
//! - masks are rasterized from polygon rings (even-odd per ring, union
//!   across rings, sampled at pixel centers) or decoded from uncompressed
//!   column-major RLE;
//! - the caption with the lowest id wins; images without captions or without
//!   usable annotations are skipped and counted;
//! - crowd regions and boxes that collapse under clamping are dropped;
//! - the subject is drawn uniformly among the kept objects, from a stream
//!   keyed by image id so the choice survives reordering.
//!
//! Pixel data is not part of the annotation files, so `image` is a mid-gray
//! placeholder sized from the `images` entry.

use super::SceneSample;
use crate::error::{Error, Result};
use crate::imageio::{solid, Mask};
use crate::layout::{BBox, Layout, ObjectSpec};
use crate::rng::{derive_rng, Stream};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Deserialize)]
struct InstancesFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: usize,
    height: usize,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default, deserialize_with = "de_crowd")]
    iscrowd: bool,
    segmentation: Segmentation,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Uncompressed(Vec<u64>),
    Compressed(String),
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct CaptionsFile {
    annotations: Vec<CocoCaption>,
}

#[derive(Deserialize)]
struct CocoCaption {
    id: u64,
    image_id: u64,
    caption: String,
}

/// `iscrowd` appears as 0/1 or as a bool in the wild; accept both.
fn de_crowd<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum IntOrBool {
        I(u8),
        B(bool),
    }
    Ok(match IntOrBool::deserialize(d)? {
        IntOrBool::I(i) => i != 0,
        IntOrBool::B(b) => b,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub images_seen: usize,
    pub ingested: usize,
    pub skipped_no_caption: usize,
    pub skipped_no_objects: usize,
    pub crowd_excluded: usize,
    pub degenerate_boxes: usize,
}

fn parse_with_path<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| Error::schema(format!("{}:{}", path.display(), e.path()), e.inner()))
}

/// Ingests COCO-format annotations. `seed` drives only the per-image subject
/// choice. Samples come back ordered by image id.
pub fn ingest_coco(
    instances_json: &Path,
    captions_json: &Path,
    seed: u64,
) -> Result<(Vec<SceneSample>, IngestStats)> {
    let instances: InstancesFile = parse_with_path(instances_json)?;
    let captions: CaptionsFile = parse_with_path(captions_json)?;

    let mut category_names = BTreeMap::new();
    for c in &instances.categories {
        category_names.insert(c.id, c.name.to_lowercase());
    }
    // Lowest caption id per image wins, independent of file order.
    let mut caption_by_image: BTreeMap<u64, (u64, &str)> = BTreeMap::new();
    for c in &captions.annotations {
        let entry = caption_by_image.entry(c.image_id).or_insert((c.id, &c.caption));
        if c.id < entry.0 {
            *entry = (c.id, &c.caption);
        }
    }
    let mut anns_by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for (idx, a) in instances.annotations.iter().enumerate() {
        validate_annotation(instances_json, idx, a, &category_names)?;
        anns_by_image.entry(a.image_id).or_default().push(a);
    }

    let mut images: Vec<&CocoImage> = instances.images.iter().collect();
    images.sort_by_key(|im| im.id);

    let mut stats = IngestStats { images_seen: images.len(), ..Default::default() };
    let mut samples = Vec::new();
    for im in images {
        let mut anns = anns_by_image.remove(&im.id).unwrap_or_default();
        anns.sort_by_key(|a| a.id);
        let crowd = anns.iter().filter(|a| a.iscrowd).count();
        stats.crowd_excluded += crowd;
        anns.retain(|a| !a.iscrowd);

        let mut objects = Vec::new();
        let mut masks = Vec::new();
        for a in anns {
            match normalized_bbox(a.bbox, im.width, im.height) {
                Some(bbox) => {
                    masks.push(rasterize(instances_json, a, im.width, im.height)?);
                    objects.push(ObjectSpec {
                        phrase: category_names[&a.category_id].clone(),
                        is_subject: false,
                        bbox,
                    });
                }
                None => stats.degenerate_boxes += 1,
            }
        }
        if objects.is_empty() {
            stats.skipped_no_objects += 1;
            continue;
        }
        let Some(&(_, caption)) = caption_by_image.get(&im.id) else {
            stats.skipped_no_caption += 1;
            continue;
        };

        let mut rng = derive_rng(seed, Stream::Ingest, &[im.id]);
        let subject_index = rng.random_range(0..objects.len());
        objects[subject_index].is_subject = true;
        let sample = SceneSample {
            image: solid(im.height, im.width, [0.5, 0.5, 0.5]),
            caption: caption.to_string(),
            layout: Layout { caption: caption.to_string(), objects },
            instance_masks: masks,
            subject_index,
        };
        sample.validate()?;
        samples.push(sample);
        stats.ingested += 1;
    }
    Ok((samples, stats))
}

fn validate_annotation(
    file: &Path,
    idx: usize,
    a: &CocoAnnotation,
    categories: &BTreeMap<u64, String>,
) -> Result<()> {
    let at = |field: &str| format!("{}:annotations[{idx}].{field}", file.display());
    if !categories.contains_key(&a.category_id) {
        return Err(Error::schema(
            at("category_id"),
            format!("unknown category id {}", a.category_id),
        ));
    }
    if !a.bbox.iter().all(|v| v.is_finite()) {
        return Err(Error::schema(at("bbox"), "non-finite bbox entry"));
    }
    match &a.segmentation {
        Segmentation::Polygons(polys) => {
            for (p, poly) in polys.iter().enumerate() {
                if poly.len() % 2 != 0 {
                    return Err(Error::schema(
                        at(&format!("segmentation[{p}]")),
                        format!("odd coordinate count {}", poly.len()),
                    ));
                }
            }
        }
        Segmentation::Rle { counts: RleCounts::Compressed(s), .. } => {
            let head: String = s.chars().take(12).collect();
            return Err(Error::schema(
                at("segmentation.counts"),
                format!(
                    "compressed RLE string {head:?}… is not supported; expected uncompressed integer runs"
                ),
            ));
        }
        Segmentation::Rle { .. } => {}
    }
    Ok(())
}

/// `[x, y, w, h]` top-left absolute pixels to normalized center form,
/// clamped to the canvas. `None` when the clamped box has no area.
fn normalized_bbox(b: [f64; 4], img_w: usize, img_h: usize) -> Option<BBox> {
    let (iw, ih) = (img_w as f64, img_h as f64);
    let x0 = (b[0] / iw).clamp(0.0, 1.0);
    let y0 = (b[1] / ih).clamp(0.0, 1.0);
    let x1 = ((b[0] + b[2]) / iw).clamp(0.0, 1.0);
    let y1 = ((b[1] + b[3]) / ih).clamp(0.0, 1.0);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    // Center form computed in f64 so clean decimals survive the f32 cast.
    let bbox = BBox::new(
        ((x0 + x1) / 2.0) as f32,
        ((y0 + y1) / 2.0) as f32,
        (x1 - x0) as f32,
        (y1 - y0) as f32,
    );
    bbox.validate().ok().map(|()| bbox)
}

fn rasterize(file: &Path, a: &CocoAnnotation, w: usize, h: usize) -> Result<Mask> {
    match &a.segmentation {
        Segmentation::Polygons(polys) => Ok(rasterize_polygons(polys, h, w)),
        Segmentation::Rle { counts: RleCounts::Uncompressed(counts), size } => {
            if size[0] != h || size[1] != w {
                return Err(Error::schema(
                    format!("{}:annotations (id {}).segmentation.size", file.display(), a.id),
                    format!("RLE size {size:?} disagrees with image {h}x{w}"),
                ));
            }
            decode_rle(counts, h, w).map_err(|detail| {
                Error::schema(
                    format!("{}:annotations (id {}).segmentation.counts", file.display(), a.id),
                    detail,
                )
            })
        }
        Segmentation::Rle { counts: RleCounts::Compressed(_), .. } => {
            unreachable!("rejected during validation")
        }
    }
}

/// Even-odd test per ring at pixel centers; rings are unioned, matching the
/// parts-of-one-object meaning of multi-polygon entries.
fn rasterize_polygons(polys: &[Vec<f64>], h: usize, w: usize) -> Mask {
    let mut mask = Mask::from_elem((h, w), false);
    for poly in polys {
        if poly.len() < 6 {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                if !mask[[y, x]] && point_in_poly(x as f64 + 0.5, y as f64 + 0.5, poly) {
                    mask[[y, x]] = true;
                }
            }
        }
    }
    mask
}

fn point_in_poly(px: f64, py: f64, poly: &[f64]) -> bool {
    let n = poly.len() / 2;
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (poly[2 * i], poly[2 * i + 1]);
        let (xj, yj) = (poly[2 * j], poly[2 * j + 1]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Uncompressed COCO RLE: alternating zero/one run lengths over the mask
/// flattened in column-major order (index = x * h + y).
fn decode_rle(counts: &[u64], h: usize, w: usize) -> std::result::Result<Mask, String> {
    let total: u64 = counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(format!("run lengths sum to {total}, mask has {} pixels", h * w));
    }
    let mut mask = Mask::from_elem((h, w), false);
    let mut idx = 0usize;
    for (run, &len) in counts.iter().enumerate() {
        let value = run % 2 == 1;
        for _ in 0..len {
            if value {
                mask[[idx % h, idx / h]] = true;
            }
            idx += 1;
        }
    }
    Ok(mask)
}
