//! Mean average precision with all-point interpolation.

use crate::detector::Detection;
use crate::scenegen::{iou, Label};

/// AP of one class from `(confidence, is_true_positive)` pairs and the
/// number of ground-truth boxes. Detections sharing a confidence form one
/// operating point.
pub fn average_precision(scored: &mut [(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(conf, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(i + 1).is_none_or(|next| next.0 != conf) {
            points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    // Precision envelope from the right, then sum over recall steps.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// mAP at `iou_thresh` over classes with at least one ground-truth box.
///
/// Per class, detections are ranked by confidence across all images; a
/// detection is a true positive when it overlaps its image's unmatched
/// box of that class by at least `iou_thresh`.
pub fn compute_map(preds: &[Vec<Detection>], gts: &[Vec<Label>], num_classes: usize, iou_thresh: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one detection list per image");
    let mut aps = Vec::new();
    for class_id in 0..num_classes {
        let num_gt = gts.iter().filter(|g| g.iter().any(|l| l.class_id == class_id)).count();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(f64, usize, [f64; 4])> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, d)| d.iter().filter(|d| d.class_id == class_id).map(move |d| (d.confidence, img, d.bbox)))
            .collect();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut matched = vec![false; gts.len()];
        let mut scored: Vec<(f64, bool)> = dets
            .iter()
            .map(|&(conf, img, bbox)| {
                let gt = gts[img].iter().find(|l| l.class_id == class_id);
                let hit = match gt {
                    Some(l) if !matched[img] && iou(&bbox, &l.bbox) >= iou_thresh => {
                        matched[img] = true;
                        true
                    }
                    _ => false,
                };
                (conf, hit)
            })
            .collect();
        aps.push(average_precision(&mut scored, num_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}
