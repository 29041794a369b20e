//! COCO-style average precision over a set of images.
//!
//! Per category and IoU threshold: detections are sorted score-descending
//! (ties broken by ascending insertion index, so permuting equal-score
//! detections cannot change the result), matched greedily against unmatched
//! ground truth of the same image and category, and the precision-recall
//! curve is integrated at 101 evenly spaced recall points using the
//! right-to-left precision envelope. Categories with no ground truth
//! anywhere are excluded from the mean.

use super::{iou, Detection};
use crate::layout::BBox;
use std::collections::BTreeSet;

/// One evaluated image: predicted detections and labelled truth boxes.
#[derive(Clone, Debug, Default)]
pub struct ApImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<(BBox, String)>,
}

#[derive(Clone, Debug)]
pub struct ApReport {
    /// (threshold, AP) in input threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    /// Mean over thresholds.
    pub mean: f64,
}

impl ApReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, ap)| ap)
    }
}

/// The standard 0.50:0.05:0.95 threshold ladder.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn average_precision(images: &[ApImage], thresholds: &[f64]) -> ApReport {
    assert!(!thresholds.is_empty(), "average_precision: no thresholds");
    let categories: BTreeSet<&str> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|(_, c)| c.as_str()))
        .collect();

    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&thr| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for cat in &categories {
                sum += category_ap(images, cat, thr);
                n += 1;
            }
            (thr, if n == 0 { 0.0 } else { sum / n as f64 })
        })
        .collect();
    let mean =
        per_threshold.iter().map(|&(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    ApReport { per_threshold, mean }
}

fn category_ap(images: &[ApImage], category: &str, thr: f64) -> f64 {
    // (score, insertion index, image, det index); insertion index is the
    // global position, giving the documented deterministic tie order.
    let mut dets: Vec<(f64, usize, usize, usize)> = Vec::new();
    let mut n_gt = 0usize;
    let mut global = 0usize;
    for (im_idx, im) in images.iter().enumerate() {
        for (d_idx, d) in im.detections.iter().enumerate() {
            if d.category == category {
                dets.push((d.score as f64, global, im_idx, d_idx));
            }
            global += 1;
        }
        n_gt += im.ground_truth.iter().filter(|(_, c)| c == category).count();
    }
    if n_gt == 0 {
        return 0.0; // caller excludes this category; value unused
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut gt_used: Vec<Vec<bool>> =
        images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &(_, _, im_idx, d_idx) in &dets {
        let det = &images[im_idx].detections[d_idx];
        let mut best: Option<(usize, f64)> = None;
        for (g_idx, (g_box, g_cat)) in images[im_idx].ground_truth.iter().enumerate() {
            if g_cat != category || gt_used[im_idx][g_idx] {
                continue;
            }
            let v = iou(&det.bbox, g_box);
            if v >= thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((g_idx, v));
            }
        }
        match best {
            Some((g_idx, _)) => {
                gt_used[im_idx][g_idx] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Cumulative precision/recall, then the 101-point envelope integral.
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut acc = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        // First curve point with recall >= r; envelope makes its precision
        // the max over that suffix.
        let p = match recalls.iter().position(|&rec| rec >= r - 1e-12) {
            Some(idx) => precisions[idx],
            None => 0.0,
        };
        acc += p;
    }
    acc / 101.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f32, cy: f32, w: f32, h: f32) -> BBox {
        BBox::new(cx, cy, w, h)
    }

    fn det(bb: BBox, cat: &str, score: f32) -> Detection {
        Detection { bbox: bb, category: cat.into(), score }
    }

    #[test]
    fn perfect_detections_score_one_everywhere() {
        let gt = vec![(b(0.3, 0.3, 0.2, 0.2), "dog".to_string()), (b(0.7, 0.7, 0.1, 0.3), "cat".to_string())];
        let images = vec![ApImage {
            detections: gt.iter().map(|(bb, c)| det(*bb, c, 1.0)).collect(),
            ground_truth: gt,
        }];
        let rep = average_precision(&images, &coco_thresholds());
        assert!((rep.mean - 1.0).abs() < 1e-12);
        assert!((rep.at(0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((rep.at(0.75).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_scores_zero() {
        let images = vec![ApImage {
            detections: vec![],
            ground_truth: vec![(b(0.5, 0.5, 0.2, 0.2), "dog".into())],
        }];
        let rep = average_precision(&images, &coco_thresholds());
        assert_eq!(rep.mean, 0.0);
    }

    #[test]
    fn two_box_case_matches_hand_executed_trace() {
        // One image, one category, two truth boxes. Detection 1 (score 0.9)
        // hits the first box exactly; detection 2 (score 0.8) misses both.
        // Trace at any threshold: after det 1, P = 1/1, R = 1/2; after det 2,
        // P = 1/2, R = 1/2. Envelope: precision 1.0 up to recall 0.5, then 0.
        // 101-point integral: 51 points at precision 1, 50 at 0 -> 51/101.
        let gt = vec![
            (b(0.25, 0.25, 0.2, 0.2), "dog".to_string()),
            (b(0.75, 0.75, 0.2, 0.2), "dog".to_string()),
        ];
        let images = vec![ApImage {
            detections: vec![
                det(b(0.25, 0.25, 0.2, 0.2), "dog", 0.9),
                det(b(0.5, 0.5, 0.05, 0.05), "dog", 0.8),
            ],
            ground_truth: gt,
        }];
        let rep = average_precision(&images, &coco_thresholds());
        let want = 51.0 / 101.0;
        assert!((rep.mean - want).abs() < 1e-12, "{} vs {want}", rep.mean);
        assert!((rep.at(0.5).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn equal_score_ties_resolve_by_insertion_order() {
        // The documented tie rule (ascending insertion index) makes the
        // result a deterministic function of the input list; both hand
        // traces below pin that behaviour.
        let gt = vec![(b(0.3, 0.3, 0.2, 0.2), "dog".to_string())];
        let d1 = det(b(0.3, 0.3, 0.2, 0.2), "dog", 0.5);
        let d2 = det(b(0.8, 0.8, 0.1, 0.1), "dog", 0.5);
        let run = |order: Vec<Detection>| {
            average_precision(
                &[ApImage { detections: order, ground_truth: gt.clone() }],
                &coco_thresholds(),
            )
            .mean
        };
        // Hit first: P=1 at R=1 -> envelope 1 -> AP 1. Miss first: P=0 then
        // P=1/2 at R=1 -> envelope 0.5 everywhere -> AP 0.5.
        assert!((run(vec![d1.clone(), d2.clone()]) - 1.0).abs() < 1e-12);
        assert!((run(vec![d2, d1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distinct_scores_make_order_irrelevant() {
        let gt = vec![
            (b(0.25, 0.25, 0.2, 0.2), "dog".to_string()),
            (b(0.75, 0.75, 0.2, 0.2), "dog".to_string()),
        ];
        let dets = vec![
            det(b(0.25, 0.25, 0.2, 0.2), "dog", 0.9),
            det(b(0.75, 0.75, 0.2, 0.2), "dog", 0.7),
            det(b(0.1, 0.9, 0.1, 0.1), "dog", 0.8),
        ];
        let run = |order: Vec<Detection>| {
            average_precision(
                &[ApImage { detections: order, ground_truth: gt.clone() }],
                &coco_thresholds(),
            )
            .mean
        };
        let baseline = run(dets.clone());
        let mut rev = dets.clone();
        rev.reverse();
        assert!((run(rev) - baseline).abs() < 1e-12);
        let swapped = vec![dets[1].clone(), dets[0].clone(), dets[2].clone()];
        assert!((run(swapped) - baseline).abs() < 1e-12);
    }

    #[test]
    fn lower_iou_threshold_is_more_permissive() {
        // Detection overlaps truth at IoU just over 0.5: TP at 0.5, FP at 0.75.
        let gt = vec![(b(0.5, 0.5, 0.4, 0.4), "dog".to_string())];
        let shifted = b(0.6, 0.5, 0.4, 0.4);
        assert!(iou(&shifted, &gt[0].0) > 0.5 && iou(&shifted, &gt[0].0) < 0.75);
        let images = vec![ApImage {
            detections: vec![det(shifted, "dog", 0.9)],
            ground_truth: gt,
        }];
        let rep = average_precision(&images, &coco_thresholds());
        assert!((rep.at(0.5).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rep.at(0.75).unwrap(), 0.0);
    }

    #[test]
    fn category_without_ground_truth_is_excluded() {
        // "cat" detections with no "cat" truth anywhere must not drag the
        // mean down; "dog" is matched perfectly.
        let images = vec![ApImage {
            detections: vec![
                det(b(0.3, 0.3, 0.2, 0.2), "dog", 1.0),
                det(b(0.7, 0.7, 0.2, 0.2), "cat", 1.0),
            ],
            ground_truth: vec![(b(0.3, 0.3, 0.2, 0.2), "dog".into())],
        }];
        let rep = average_precision(&images, &coco_thresholds());
        assert!((rep.mean - 1.0).abs() < 1e-12);
    }
}
