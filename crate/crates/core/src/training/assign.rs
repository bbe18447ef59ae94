//! Target assignment: cascade-stage RoI labeling with ascending IoU
//! thresholds, and RPN-style anchor labeling (positive ≥ 0.7, negative
//! < 0.3, plus the best anchor per ground-truth box).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::detector::bbox::{encode_box, BBox};

/// Per-RoI assignment for one cascade stage.
#[derive(Debug, Clone)]
pub struct StageAssignment {
    /// 0 = background, otherwise a 1-based seen-class id.
    pub labels: Vec<usize>,
    /// Regression targets for positive RoIs.
    pub reg_targets: Vec<Option<[f64; 4]>>,
    /// Index of the matched ground-truth box for positives.
    pub matched_gt: Vec<Option<usize>>,
    pub iou_threshold: f64,
}

impl StageAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Labels each RoI against the ground truth: positive iff its best IoU
/// reaches the stage threshold, matched to the argmax ground-truth box
/// (ties broken by the lowest index).
pub fn assign_stage_targets(
    rois: &[BBox],
    gt: &[(BBox, usize)],
    iou_threshold: f64,
) -> StageAssignment {
    let mut labels = Vec::with_capacity(rois.len());
    let mut reg_targets = Vec::with_capacity(rois.len());
    let mut matched_gt = Vec::with_capacity(rois.len());
    for roi in rois {
        let mut best_iou = 0.0;
        let mut best_idx = None;
        for (gi, (gbox, _)) in gt.iter().enumerate() {
            let iou = roi.iou(gbox);
            if iou > best_iou {
                best_iou = iou;
                best_idx = Some(gi);
            }
        }
        match best_idx {
            Some(gi) if best_iou >= iou_threshold => {
                labels.push(gt[gi].1);
                reg_targets.push(Some(encode_box(roi, &gt[gi].0)));
                matched_gt.push(Some(gi));
            }
            _ => {
                labels.push(0);
                reg_targets.push(None);
                matched_gt.push(None);
            }
        }
    }
    StageAssignment {
        labels,
        reg_targets,
        matched_gt,
        iou_threshold,
    }
}

/// Anchor label: `Some(true)` foreground, `Some(false)` background,
/// `None` ignored.
#[derive(Debug, Clone)]
pub struct AnchorTarget {
    pub label: Option<bool>,
    pub matched_gt: Option<usize>,
}

/// Standard RPN rule: positive at IoU ≥ `pos_thr` (or best anchor for a
/// ground-truth box), negative below `neg_thr`, ignored in between.
pub fn assign_rpn_targets(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<AnchorTarget> {
    let mut out: Vec<AnchorTarget> = anchors
        .iter()
        .map(|anchor| {
            let mut best_iou = 0.0;
            let mut best = None;
            for (gi, g) in gt_boxes.iter().enumerate() {
                let iou = anchor.iou(g);
                if iou > best_iou {
                    best_iou = iou;
                    best = Some(gi);
                }
            }
            let label = if best_iou >= pos_thr {
                Some(true)
            } else if best_iou < neg_thr {
                Some(false)
            } else {
                None
            };
            AnchorTarget {
                label,
                matched_gt: if best_iou >= pos_thr { best } else { None },
            }
        })
        .collect();
    // guarantee each ground-truth box at least one positive anchor
    for (gi, g) in gt_boxes.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best_anchor = None;
        for (ai, anchor) in anchors.iter().enumerate() {
            let iou = anchor.iou(g);
            if iou > best_iou {
                best_iou = iou;
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            if best_iou > 0.0 {
                out[ai].label = Some(true);
                out[ai].matched_gt = Some(gi);
            }
        }
    }
    out
}

/// Samples up to `batch` labeled anchors, positives first (at most half),
/// the rest negatives. Returns indices into the anchor list.
pub fn sample_anchors(
    targets: &[AnchorTarget],
    batch: usize,
    r: &mut ChaCha12Rng,
) -> Vec<usize> {
    let mut pos: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == Some(true))
        .map(|(i, _)| i)
        .collect();
    let mut neg: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == Some(false))
        .map(|(i, _)| i)
        .collect();
    pos.shuffle(r);
    neg.shuffle(r);
    let n_pos = pos.len().min(batch / 2);
    let n_neg = neg.len().min(batch - n_pos);
    let mut picked: Vec<usize> = pos.into_iter().take(n_pos).collect();
    picked.extend(neg.into_iter().take(n_neg));
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn exact_gt_copy_is_positive_at_every_stage() {
        let gt = vec![(b(10.0, 10.0, 20.0, 20.0), 3usize)];
        let rois = vec![b(10.0, 10.0, 20.0, 20.0)];
        for thr in [0.5, 0.6, 0.7] {
            let a = assign_stage_targets(&rois, &gt, thr);
            assert_eq!(a.labels, vec![3]);
            assert_eq!(a.reg_targets[0], Some([0.0, 0.0, 0.0, 0.0]));
        }
    }

    #[test]
    fn disjoint_roi_is_background() {
        let gt = vec![(b(10.0, 10.0, 20.0, 20.0), 1usize)];
        let rois = vec![b(40.0, 40.0, 50.0, 50.0)];
        let a = assign_stage_targets(&rois, &gt, 0.5);
        assert_eq!(a.labels, vec![0]);
        assert_eq!(a.reg_targets[0], None);
    }

    #[test]
    fn fixture_matches_brute_force_iou_table() {
        // 3 rois × 2 gt boxes, checked against an explicit IoU matrix
        let gt = vec![
            (b(0.0, 0.0, 10.0, 10.0), 1usize),
            (b(20.0, 0.0, 30.0, 10.0), 2usize),
        ];
        let rois = vec![
            b(1.0, 1.0, 11.0, 11.0),   // overlaps gt0
            b(19.0, 0.0, 29.0, 10.0),  // overlaps gt1
            b(12.0, 12.0, 18.0, 18.0), // overlaps nothing
        ];
        let threshold = 0.5;
        // brute-force oracle: compute every IoU by rectangle arithmetic
        let mut expect_labels = Vec::new();
        for roi in &rois {
            let mut best = (0.0f64, None);
            for (gi, (gbox, label)) in gt.iter().enumerate() {
                let ix = (roi.x2.min(gbox.x2) - roi.x1.max(gbox.x1)).max(0.0);
                let iy = (roi.y2.min(gbox.y2) - roi.y1.max(gbox.y1)).max(0.0);
                let inter = ix * iy;
                let uni = roi.area() + gbox.area() - inter;
                let iou = if uni > 0.0 { inter / uni } else { 0.0 };
                if iou > best.0 {
                    best = (iou, Some((gi, *label)));
                }
            }
            match best {
                (iou, Some((_, label))) if iou >= threshold => expect_labels.push(label),
                _ => expect_labels.push(0),
            }
        }
        let a = assign_stage_targets(&rois, &gt, threshold);
        assert_eq!(a.labels, expect_labels);
        assert_eq!(a.labels, vec![1, 2, 0]);
    }

    #[test]
    fn tie_breaks_to_lowest_gt_index() {
        let gt = vec![
            (b(0.0, 0.0, 10.0, 10.0), 1usize),
            (b(0.0, 0.0, 10.0, 10.0), 2usize),
        ];
        let rois = vec![b(0.0, 0.0, 10.0, 10.0)];
        let a = assign_stage_targets(&rois, &gt, 0.5);
        assert_eq!(a.labels, vec![1]);
        assert_eq!(a.matched_gt, vec![Some(0)]);
    }

    #[test]
    fn rpn_rule_thresholds() {
        let gt = vec![b(8.0, 8.0, 24.0, 24.0)];
        let anchors = vec![
            b(8.0, 8.0, 24.0, 24.0),   // IoU 1.0 → positive
            b(40.0, 40.0, 56.0, 56.0), // IoU 0.0 → negative
            b(10.0, 8.0, 26.0, 24.0),  // IoU ≈ 0.78 → positive
        ];
        let t = assign_rpn_targets(&anchors, &gt, 0.7, 0.3);
        assert_eq!(t[0].label, Some(true));
        assert_eq!(t[1].label, Some(false));
        assert_eq!(t[2].label, Some(true));
    }

    #[test]
    fn best_anchor_per_gt_becomes_positive() {
        // no anchor reaches 0.7, but the best-overlap anchor is promoted
        let gt = vec![b(0.0, 0.0, 10.0, 10.0)];
        let anchors = vec![b(4.0, 4.0, 14.0, 14.0), b(30.0, 30.0, 40.0, 40.0)];
        let t = assign_rpn_targets(&anchors, &gt, 0.7, 0.3);
        assert_eq!(t[0].label, Some(true));
        assert_eq!(t[0].matched_gt, Some(0));
    }

    #[test]
    fn sampling_is_balanced_and_bounded() {
        let gt = vec![b(8.0, 8.0, 24.0, 24.0)];
        let mut anchors = vec![b(8.0, 8.0, 24.0, 24.0)];
        for i in 0..20 {
            let off = 30.0 + i as f64;
            anchors.push(b(off, off, off + 4.0, off + 4.0));
        }
        let t = assign_rpn_targets(&anchors, &gt, 0.7, 0.3);
        let mut r = rng(3);
        let sample = sample_anchors(&t, 8, &mut r);
        assert!(sample.len() <= 8);
        assert!(sample.contains(&0));
    }
}
