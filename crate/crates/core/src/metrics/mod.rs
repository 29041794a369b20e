//! Layout and image evaluation: IoU, phrase-constrained optimal matching,
//! best-of-k layout scores, Fréchet distance between feature summaries, and
//! a COCO-style average-precision harness with a color-oracle detector for
//! synthetic scenes.

pub mod ap;
pub mod frechet;
pub mod hungarian;
pub mod oracle;

pub use ap::{average_precision, coco_thresholds, ApImage, ApReport};
pub use frechet::{frechet_distance, GaussianSummary};
pub use oracle::{oracle_detect, PaletteEntry};

use crate::error::{Error, Result};
use crate::layout::{BBox, Layout};

/// A predicted box with its category label and confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: String,
    pub score: f32,
}

/// Result of matching two layouts: matched index pairs (lhs, rhs) and the
/// mean IoU over `max(|a|, |b|)` slots, so missing or extra objects count
/// as zeros.
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub assignment: Vec<(usize, usize)>,
    pub mean_iou: f64,
}

/// Intersection over union of two center-form boxes; 0 for non-overlapping
/// or degenerate input.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0) as f64;
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0) as f64;
    let inter = ix * iy;
    let area_a = (ax1 - ax0).max(0.0) as f64 * (ay1 - ay0).max(0.0) as f64;
    let area_b = (bx1 - bx0).max(0.0) as f64 * (by1 - by0).max(0.0) as f64;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Best pairing of equal-phrase objects between two layouts, maximizing
/// total IoU via the Hungarian method on negated IoU. Pairs with unequal
/// phrases are forbidden outright.
pub fn optimal_match(a: &Layout, b: &Layout) -> MatchResult {
    let (na, nb) = (a.objects.len(), b.objects.len());
    if na == 0 || nb == 0 {
        return MatchResult { assignment: vec![], mean_iou: 0.0 };
    }
    let cost = ndarray::Array2::from_shape_fn((na, nb), |(i, j)| {
        if a.objects[i].phrase == b.objects[j].phrase {
            -iou(&a.objects[i].bbox, &b.objects[j].bbox)
        } else {
            hungarian::FORBIDDEN
        }
    });
    let mut assignment: Vec<(usize, usize)> = hungarian::solve(&cost)
        .into_iter()
        .filter(|&(i, j)| cost[[i, j]] < hungarian::FORBIDDEN / 2.0)
        .collect();
    assignment.sort_unstable();
    let total: f64 = assignment.iter().map(|&(i, j)| -cost[[i, j]]).sum();
    MatchResult { assignment, mean_iou: total / na.max(nb) as f64 }
}

/// Best optimal-match score of any of the k generated layouts against the
/// ground truth.
pub fn max_iou_at_k(generated: &[Layout], ground_truth: &Layout) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::InvalidArgument("max_iou_at_k: no generated layouts".into()));
    }
    Ok(generated
        .iter()
        .map(|g| optimal_match(g, ground_truth).mean_iou)
        .fold(f64::MIN, f64::max))
}

/// Exhaustive best equal-phrase matching; test oracle, O(n!).
pub fn brute_force_match_mean_iou(a: &Layout, b: &Layout) -> f64 {
    let (na, nb) = (a.objects.len(), b.objects.len());
    if na == 0 || nb == 0 {
        return 0.0;
    }
    // Search over injections from the smaller side into the larger.
    let (small, large, small_is_a) =
        if na <= nb { (a, b, true) } else { (b, a, false) };
    let n_small = small.objects.len();
    let n_large = large.objects.len();
    let mut slots: Vec<usize> = (0..n_large).collect();
    let mut best = 0.0f64;
    fn recurse(
        k: usize,
        slots: &mut Vec<usize>,
        n_small: usize,
        small: &Layout,
        large: &Layout,
        small_is_a: bool,
        best: &mut f64,
    ) {
        if k == n_small {
            let mut total = 0.0;
            for (i, &j) in slots.iter().enumerate().take(n_small) {
                let (so, lo) = (&small.objects[i], &large.objects[j]);
                if so.phrase == lo.phrase {
                    total += if small_is_a {
                        iou(&so.bbox, &lo.bbox)
                    } else {
                        iou(&lo.bbox, &so.bbox)
                    };
                }
            }
            if total > *best {
                *best = total;
            }
            return;
        }
        for i in k..slots.len() {
            slots.swap(k, i);
            recurse(k + 1, slots, n_small, small, large, small_is_a, best);
            slots.swap(k, i);
        }
    }
    recurse(0, &mut slots, n_small, small, large, small_is_a, &mut best);
    best / n_large as f64
}
