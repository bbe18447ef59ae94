//! The metric suite: IoU, Recall@K across IoU thresholds, all-point
//! average precision and mAP, class-wise recall, and the harmonic mean
//! summarizing generalized zero-shot performance. Matching is class-aware
//! and greedy by detection score; each ground-truth box is consumed at most
//! once.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{ClassGroup, GtBox};
use crate::detector::bbox::BBox;
use crate::error::{BlcError, Result};
use crate::inference::{Detection, ImageDetections};

/// Intersection-over-union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Ground truth for one image, in the same record shape as the detection
/// dump minus the score.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGroundTruth {
    pub image_id: u64,
    pub boxes: Vec<GtBox>,
}

/// Outcome of greedy matching for one image and one class.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Per ground-truth flag: matched by some detection.
    pub gt_matched: Vec<bool>,
    /// Per detection: (true positive, index of the matched ground truth).
    pub det_tp: Vec<(bool, Option<usize>)>,
}

/// Greedy matching: detections in the given order claim the unmatched
/// ground-truth box of the same class with the highest IoU ≥ threshold.
pub fn match_greedy(dets: &[&Detection], gts: &[&GtBox], iou_threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_tp = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] || gt.class != det.class_name {
                continue;
            }
            let overlap = det.bbox.iou(&gt.bbox);
            if overlap >= iou_threshold {
                match best {
                    Some((_, prev)) if prev >= overlap => {}
                    _ => best = Some((gi, overlap)),
                }
            }
        }
        match best {
            Some((gi, _)) => {
                gt_matched[gi] = true;
                det_tp.push((true, Some(gi)));
            }
            None => det_tp.push((false, None)),
        }
    }
    MatchResult { gt_matched, det_tp }
}

/// Detections of one image sorted by score descending (input-order ties),
/// capped at k.
fn top_k_sorted(image: &ImageDetections, k: usize) -> Vec<&Detection> {
    let mut idx: Vec<usize> = (0..image.detections.len()).collect();
    idx.sort_by(|&a, &b| {
        image.detections[b]
            .score
            .partial_cmp(&image.detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.into_iter().map(|i| &image.detections[i]).collect()
}

fn gts_for<'a>(gts: &'a [ImageGroundTruth], image_id: u64) -> &'a [GtBox] {
    gts.iter()
        .find(|g| g.image_id == image_id)
        .map(|g| g.boxes.as_slice())
        .unwrap_or(&[])
}

/// Recall@K in percent: per image the top-K detections by score are
/// greedily matched per class; recall is matched ground truth over total
/// ground truth. Errors when there is no ground truth at all.
pub fn recall_at_k(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    k: usize,
    iou_threshold: f64,
) -> Result<f64> {
    let total_gt: usize = gts.iter().map(|g| g.boxes.len()).sum();
    if total_gt == 0 {
        return Err(BlcError::UndefinedRecall);
    }
    let mut matched = 0usize;
    for gt_image in gts {
        let image_dets = dets.iter().find(|d| d.image_id == gt_image.image_id);
        let top: Vec<&Detection> = match image_dets {
            Some(img) => top_k_sorted(img, k),
            None => Vec::new(),
        };
        let gt_refs: Vec<&GtBox> = gt_image.boxes.iter().collect();
        let result = match_greedy(&top, &gt_refs, iou_threshold);
        matched += result.gt_matched.iter().filter(|&&m| m).count();
    }
    Ok(100.0 * matched as f64 / total_gt as f64)
}

/// Per-class Recall@K under the same per-image top-K selection. Classes
/// absent from the ground truth map to `None`.
pub fn classwise_recall(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    classes: &[String],
    iou_threshold: f64,
    k: usize,
) -> BTreeMap<String, Option<f64>> {
    let mut matched: BTreeMap<&str, usize> = BTreeMap::new();
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for gt_image in gts {
        for b in &gt_image.boxes {
            *totals.entry(b.class.as_str()).or_default() += 1;
        }
        let image_dets = dets.iter().find(|d| d.image_id == gt_image.image_id);
        let top: Vec<&Detection> = match image_dets {
            Some(img) => top_k_sorted(img, k),
            None => Vec::new(),
        };
        let gt_refs: Vec<&GtBox> = gt_image.boxes.iter().collect();
        let result = match_greedy(&top, &gt_refs, iou_threshold);
        for (gi, hit) in result.gt_matched.iter().enumerate() {
            if *hit {
                *matched.entry(gt_image.boxes[gi].class.as_str()).or_default() += 1;
            }
        }
    }
    classes
        .iter()
        .map(|c| {
            let value = totals.get(c.as_str()).map(|&total| {
                100.0 * matched.get(c.as_str()).copied().unwrap_or(0) as f64 / total as f64
            });
            (c.clone(), value)
        })
        .collect()
}

/// All-point-interpolated average precision for one class, in percent.
/// `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    class: &str,
    iou_threshold: f64,
) -> Option<f64> {
    let total_gt: usize = gts
        .iter()
        .flat_map(|g| g.boxes.iter())
        .filter(|b| b.class == class)
        .count();
    if total_gt == 0 {
        return None;
    }
    // gather this class's detections across images, with per-image matching
    struct Scored {
        score: f64,
        order: usize,
        tp: bool,
    }
    let mut scored: Vec<Scored> = Vec::new();
    let mut order = 0usize;
    for img in dets {
        let gt_boxes: Vec<&GtBox> = gts_for(gts, img.image_id)
            .iter()
            .filter(|b| b.class == class)
            .collect();
        let class_dets: Vec<&Detection> = top_level_sorted_class(img, class);
        let result = match_greedy(&class_dets, &gt_boxes, iou_threshold);
        for (det, (tp, _)) in class_dets.iter().zip(result.det_tp.iter()) {
            scored.push(Scored {
                score: det.score,
                order,
                tp: *tp,
            });
            order += 1;
        }
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.order.cmp(&b.order))
    });
    // precision-recall points
    let mut tp_cum = 0usize;
    let mut fp_cum = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(scored.len()); // (recall, precision)
    for s in &scored {
        if s.tp {
            tp_cum += 1;
        } else {
            fp_cum += 1;
        }
        points.push((
            tp_cum as f64 / total_gt as f64,
            tp_cum as f64 / (tp_cum + fp_cum) as f64,
        ));
    }
    Some(100.0 * all_point_ap(&points))
}

fn top_level_sorted_class<'a>(img: &'a ImageDetections, class: &str) -> Vec<&'a Detection> {
    let mut idx: Vec<usize> = (0..img.detections.len())
        .filter(|&i| img.detections[i].class_name == class)
        .collect();
    idx.sort_by(|&a, &b| {
        img.detections[b]
            .score
            .partial_cmp(&img.detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.into_iter().map(|i| &img.detections[i]).collect()
}

/// Area under the precision envelope over recall (all-point
/// interpolation).
fn all_point_ap(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // envelope: precision at recall r is the max precision at recall ≥ r
    let mut envelope: Vec<(f64, f64)> = points.to_vec();
    let mut best = 0.0;
    for p in envelope.iter_mut().rev() {
        best = p.1.max(best);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in envelope {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Mean AP at the given IoU threshold over the classes present in the
/// ground truth.
pub fn map_at(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    classes: &[String],
    iou_threshold: f64,
) -> Result<f64> {
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|c| average_precision(dets, gts, c, iou_threshold))
        .collect();
    if aps.is_empty() {
        return Err(BlcError::UndefinedRecall);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// 2ab/(a+b).
pub fn harmonic_mean(seen_value: f64, unseen_value: f64) -> Result<f64> {
    if seen_value < 0.0 || unseen_value < 0.0 {
        return Err(BlcError::InvalidConfig(
            "harmonic mean needs non-negative inputs".into(),
        ));
    }
    if seen_value + unseen_value == 0.0 {
        return Err(BlcError::UndefinedHarmonicMean);
    }
    Ok(2.0 * seen_value * unseen_value / (seen_value + unseen_value))
}

/// Zero-shot metrics: unseen classes only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZsdReport {
    /// (IoU threshold, Recall@K) pairs.
    pub recall_at_iou: Vec<(f64, f64)>,
    pub map_05: f64,
    pub per_class_recall: BTreeMap<String, Option<f64>>,
    pub k: usize,
}

/// Generalized metrics: seen/unseen/harmonic-mean triplets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GzsdReport {
    pub seen_map: f64,
    pub seen_recall: f64,
    pub unseen_map: f64,
    pub unseen_recall: f64,
    pub hm_map: f64,
    pub hm_recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub zsd: Option<ZsdReport>,
    pub gzsd: Option<GzsdReport>,
    /// AP interpolation used (all-point; flagged here because other
    /// conventions exist).
    pub ap_interpolation: String,
}

pub const RECALL_IOU_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const DEFAULT_K: usize = 100;

fn filter_group(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    group: ClassGroup,
) -> (Vec<ImageDetections>, Vec<ImageGroundTruth>) {
    let d = dets
        .iter()
        .map(|img| ImageDetections {
            image_id: img.image_id,
            detections: img
                .detections
                .iter()
                .filter(|d| d.group == group)
                .cloned()
                .collect(),
        })
        .collect();
    let g = gts
        .iter()
        .map(|img| ImageGroundTruth {
            image_id: img.image_id,
            boxes: img
                .boxes
                .iter()
                .filter(|b| b.group == group)
                .cloned()
                .collect(),
        })
        .collect();
    (d, g)
}

/// ZSD evaluation: detections and ground truth restricted to unseen
/// classes, recall across the standard IoU thresholds plus mAP at 0.5.
pub fn evaluate_zsd(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    unseen_classes: &[String],
    k: usize,
) -> Result<ZsdReport> {
    let (d, g) = filter_group(dets, gts, ClassGroup::Unseen);
    let mut recall_at_iou = Vec::new();
    for thr in RECALL_IOU_THRESHOLDS {
        recall_at_iou.push((thr, recall_at_k(&d, &g, k, thr)?));
    }
    Ok(ZsdReport {
        recall_at_iou,
        map_05: map_at(&d, &g, unseen_classes, 0.5)?,
        per_class_recall: classwise_recall(&d, &g, unseen_classes, 0.5, k),
        k,
    })
}

/// GZSD evaluation: seen and unseen metrics at IoU 0.5 plus harmonic means.
pub fn evaluate_gzsd(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    seen_classes: &[String],
    unseen_classes: &[String],
    k: usize,
) -> Result<GzsdReport> {
    let (sd, sg) = filter_group(dets, gts, ClassGroup::Seen);
    let (ud, ug) = filter_group(dets, gts, ClassGroup::Unseen);
    let seen_map = map_at(&sd, &sg, seen_classes, 0.5)?;
    let seen_recall = recall_at_k(&sd, &sg, k, 0.5)?;
    let unseen_map = map_at(&ud, &ug, unseen_classes, 0.5)?;
    let unseen_recall = recall_at_k(&ud, &ug, k, 0.5)?;
    Ok(GzsdReport {
        seen_map,
        seen_recall,
        unseen_map,
        unseen_recall,
        hm_map: harmonic_mean(seen_map, unseen_map)?,
        hm_recall: harmonic_mean(seen_recall, unseen_recall)?,
    })
}

impl EvalReport {
    /// Human-readable table.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        if let Some(z) = &self.zsd {
            out.push_str(&format!("ZSD (unseen classes, Recall@{}) \n", z.k));
            out.push_str("  IoU      Recall     \n");
            for (thr, r) in &z.recall_at_iou {
                out.push_str(&format!("  {thr:<8} {r:>8.2}\n"));
            }
            out.push_str(&format!("  mAP@0.5  {:>8.2}\n", z.map_05));
            out.push_str("  class-wise Recall@0.5:\n");
            for (c, r) in &z.per_class_recall {
                match r {
                    Some(v) => out.push_str(&format!("    {c:<28} {v:>7.2}\n")),
                    None => out.push_str(&format!("    {c:<28}     n/a\n")),
                }
            }
        }
        if let Some(g) = &self.gzsd {
            out.push_str("GZSD (IoU 0.5)\n");
            out.push_str("            mAP     Recall\n");
            out.push_str(&format!(
                "  seen    {:>7.2} {:>9.2}\n",
                g.seen_map, g.seen_recall
            ));
            out.push_str(&format!(
                "  unseen  {:>7.2} {:>9.2}\n",
                g.unseen_map, g.unseen_recall
            ));
            out.push_str(&format!(
                "  HM      {:>7.2} {:>9.2}\n",
                g.hm_map, g.hm_recall
            ));
        }
        out.push_str(&format!("ap_interpolation: {}\n", self.ap_interpolation));
        out
    }

    /// Machine-readable key-value lines.
    pub fn format_kv(&self) -> String {
        let mut out = String::new();
        if let Some(z) = &self.zsd {
            for (thr, r) in &z.recall_at_iou {
                out.push_str(&format!("zsd.recall@{}.iou{thr} = {r:.4}\n", z.k));
            }
            out.push_str(&format!("zsd.map@0.5 = {:.4}\n", z.map_05));
            for (c, r) in &z.per_class_recall {
                match r {
                    Some(v) => out.push_str(&format!("zsd.class_recall.{c} = {v:.4}\n")),
                    None => out.push_str(&format!("zsd.class_recall.{c} = n/a\n")),
                }
            }
        }
        if let Some(g) = &self.gzsd {
            out.push_str(&format!("gzsd.seen.map = {:.4}\n", g.seen_map));
            out.push_str(&format!("gzsd.seen.recall = {:.4}\n", g.seen_recall));
            out.push_str(&format!("gzsd.unseen.map = {:.4}\n", g.unseen_map));
            out.push_str(&format!("gzsd.unseen.recall = {:.4}\n", g.unseen_recall));
            out.push_str(&format!("gzsd.hm.map = {:.4}\n", g.hm_map));
            out.push_str(&format!("gzsd.hm.recall = {:.4}\n", g.hm_recall));
        }
        out.push_str(&format!("ap_interpolation = {}\n", self.ap_interpolation));
        out
    }
}

/// Writes a ground-truth file: image id, group, class name, x1 y1 x2 y2
/// (tab-separated).
pub fn write_ground_truth<W: Write>(
    mut w: W,
    gts: &[ImageGroundTruth],
    header: &str,
) -> Result<()> {
    w.write_all(header.as_bytes())?;
    for img in gts {
        for b in &img.boxes {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                img.image_id, b.group, b.class, b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2
            )?;
        }
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(r: R) -> Result<Vec<ImageGroundTruth>> {
    let mut out: Vec<ImageGroundTruth> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split('\t').collect();
        if fields.len() != 7 {
            return Err(BlcError::Parse {
                line: line_no,
                msg: format!("expected 7 tab-separated fields, got {}", fields.len()),
            });
        }
        let image_id: u64 = fields[0].parse().map_err(|e| BlcError::Parse {
            line: line_no,
            msg: format!("bad image id: {e}"),
        })?;
        let group: ClassGroup = fields[1].parse()?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| BlcError::Parse {
                line: line_no,
                msg: format!("bad number '{s}': {e}"),
            })
        };
        let gt = GtBox {
            bbox: BBox::new(num(fields[3])?, num(fields[4])?, num(fields[5])?, num(fields[6])?)?,
            class: fields[2].to_string(),
            group,
        };
        match out.iter_mut().find(|i| i.image_id == image_id) {
            Some(img) => img.boxes.push(gt),
            None => out.push(ImageGroundTruth {
                image_id,
                boxes: vec![gt],
            }),
        }
    }
    Ok(out)
}

/// Ground truth records of a dataset (for eval and for writing GT files).
pub fn dataset_ground_truth(ds: &crate::data::Dataset) -> Vec<ImageGroundTruth> {
    ds.images
        .iter()
        .map(|img| ImageGroundTruth {
            image_id: img.id,
            boxes: img.boxes.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::detection;
    use approx::assert_abs_diff_eq;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(class: &str, bbox: BBox) -> GtBox {
        GtBox {
            bbox,
            class: class.into(),
            group: ClassGroup::Unseen,
        }
    }

    fn det_img(image_id: u64, dets: Vec<Detection>) -> ImageDetections {
        ImageDetections {
            image_id,
            detections: dets,
        }
    }

    fn gt_img(image_id: u64, boxes: Vec<GtBox>) -> ImageGroundTruth {
        ImageGroundTruth { image_id, boxes }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_abs_diff_eq!(
            iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 15.0, 10.0)),
            1.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn perfect_detections_give_full_recall() {
        let gts = vec![gt_img(
            1,
            vec![gt("a", b(0.0, 0.0, 10.0, 10.0)), gt("b", b(20.0, 20.0, 30.0, 30.0))],
        )];
        let dets = vec![det_img(
            1,
            vec![
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(20.0, 20.0, 30.0, 30.0), 2, "b", 0.8, ClassGroup::Unseen),
            ],
        )];
        assert_abs_diff_eq!(
            recall_at_k(&dets, &gts, 100, 0.5).unwrap(),
            100.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn no_detections_give_zero_recall() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        assert_eq!(recall_at_k(&[], &gts, 100, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn zero_ground_truth_errors() {
        assert!(matches!(
            recall_at_k(&[], &[], 100, 0.5),
            Err(BlcError::UndefinedRecall)
        ));
    }

    #[test]
    fn recall_fixture_matches_exhaustive_matching_oracle() {
        // 3 images, 10 gt boxes, detections with mixed IoUs
        let gts = vec![
            gt_img(
                1,
                vec![
                    gt("a", b(0.0, 0.0, 10.0, 10.0)),
                    gt("a", b(20.0, 0.0, 30.0, 10.0)),
                    gt("b", b(40.0, 0.0, 50.0, 10.0)),
                    gt("b", b(0.0, 20.0, 10.0, 30.0)),
                ],
            ),
            gt_img(
                2,
                vec![
                    gt("a", b(5.0, 5.0, 15.0, 15.0)),
                    gt("b", b(25.0, 5.0, 35.0, 15.0)),
                    gt("b", b(45.0, 5.0, 55.0, 15.0)),
                ],
            ),
            gt_img(
                3,
                vec![
                    gt("a", b(0.0, 0.0, 12.0, 12.0)),
                    gt("a", b(30.0, 30.0, 42.0, 42.0)),
                    gt("b", b(50.0, 50.0, 62.0, 62.0)),
                ],
            ),
        ];
        let dets = vec![
            det_img(
                1,
                vec![
                    detection(b(1.0, 0.0, 11.0, 10.0), 1, "a", 0.95, ClassGroup::Unseen), // iou .82 gt0
                    detection(b(20.0, 0.0, 30.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen), // exact gt1
                    detection(b(41.0, 1.0, 49.0, 9.0), 2, "b", 0.8, ClassGroup::Unseen),  // iou .64 gt2
                    detection(b(70.0, 70.0, 80.0, 80.0), 2, "b", 0.7, ClassGroup::Unseen), // miss
                ],
            ),
            det_img(
                2,
                vec![
                    detection(b(5.0, 5.0, 15.0, 15.0), 1, "a", 0.6, ClassGroup::Unseen), // exact
                    detection(b(26.0, 6.0, 34.0, 14.0), 2, "b", 0.5, ClassGroup::Unseen), // iou .64
                    detection(b(45.0, 5.0, 50.0, 15.0), 2, "b", 0.4, ClassGroup::Unseen), // iou .5
                ],
            ),
            det_img(
                3,
                vec![
                    detection(b(0.0, 0.0, 12.0, 12.0), 1, "a", 0.99, ClassGroup::Unseen),
                    // wrong class for gt "b"
                    detection(b(50.0, 50.0, 62.0, 62.0), 1, "a", 0.98, ClassGroup::Unseen),
                ],
            ),
        ];
        let got = recall_at_k(&dets, &gts, 100, 0.5).unwrap();

        // brute-force oracle: per image and class, maximum bipartite
        // matching by recursion over detections
        fn max_match(
            dets: &[(&Detection, usize)],
            gts: &[&GtBox],
            used: &mut Vec<bool>,
            thr: f64,
        ) -> usize {
            match dets.split_first() {
                None => 0,
                Some(((det, _), rest)) => {
                    let mut best = max_match(rest, gts, used, thr);
                    for (gi, gtb) in gts.iter().enumerate() {
                        if !used[gi]
                            && gtb.class == det.class_name
                            && det.bbox.iou(&gtb.bbox) >= thr
                        {
                            used[gi] = true;
                            best = best.max(1 + max_match(rest, gts, used, thr));
                            used[gi] = false;
                        }
                    }
                    best
                }
            }
        }
        let mut oracle_matched = 0usize;
        let mut total_gt = 0usize;
        for gt_image in &gts {
            total_gt += gt_image.boxes.len();
            if let Some(img) = dets.iter().find(|d| d.image_id == gt_image.image_id) {
                let top: Vec<(&Detection, usize)> =
                    top_k_sorted(img, 100).into_iter().zip(0..).collect();
                let gt_refs: Vec<&GtBox> = gt_image.boxes.iter().collect();
                let mut used = vec![false; gt_refs.len()];
                oracle_matched += max_match(&top, &gt_refs, &mut used, 0.5);
            }
        }
        let oracle = 100.0 * oracle_matched as f64 / total_gt as f64;
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(got, 100.0 * 7.0 / 10.0, epsilon = 1e-9);
    }

    #[test]
    fn k_caps_detections_per_image() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        // correct detection ranked below k junk detections
        let mut dets_list = vec![];
        for i in 0..5 {
            dets_list.push(detection(
                b(50.0 + i as f64, 50.0, 70.0 + i as f64, 70.0),
                1,
                "a",
                0.9 - 0.01 * i as f64,
                ClassGroup::Unseen,
            ));
        }
        dets_list.push(detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.1, ClassGroup::Unseen));
        let dets = vec![det_img(1, dets_list)];
        assert_eq!(recall_at_k(&dets, &gts, 5, 0.5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&dets, &gts, 6, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn single_perfect_detection_gives_ap_100() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        let dets = vec![det_img(
            1,
            vec![detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen)],
        )];
        assert_abs_diff_eq!(
            average_precision(&dets, &gts, "a", 0.5).unwrap(),
            100.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn tp_fp_order_changes_ap() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        // TP first, FP second: AP = 100
        let dets_tp_first = vec![det_img(
            1,
            vec![
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(50.0, 50.0, 60.0, 60.0), 1, "a", 0.8, ClassGroup::Unseen),
            ],
        )];
        assert_abs_diff_eq!(
            average_precision(&dets_tp_first, &gts, "a", 0.5).unwrap(),
            100.0,
            epsilon = 1e-9
        );
        // FP first, TP second: precision at the TP is 1/2 → AP = 50
        let dets_fp_first = vec![det_img(
            1,
            vec![
                detection(b(50.0, 50.0, 60.0, 60.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.8, ClassGroup::Unseen),
            ],
        )];
        assert_abs_diff_eq!(
            average_precision(&dets_fp_first, &gts, "a", 0.5).unwrap(),
            50.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn five_box_fixture_matches_scalar_loop_reference() {
        let gts = vec![gt_img(
            1,
            vec![
                gt("a", b(0.0, 0.0, 10.0, 10.0)),
                gt("a", b(20.0, 0.0, 30.0, 10.0)),
                gt("a", b(40.0, 0.0, 50.0, 10.0)),
            ],
        )];
        let dets = vec![det_img(
            1,
            vec![
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.95, ClassGroup::Unseen), // TP
                detection(b(60.0, 60.0, 70.0, 70.0), 1, "a", 0.9, ClassGroup::Unseen), // FP
                detection(b(20.0, 0.0, 30.0, 10.0), 1, "a", 0.85, ClassGroup::Unseen), // TP
                detection(b(61.0, 61.0, 71.0, 71.0), 1, "a", 0.8, ClassGroup::Unseen), // FP
                detection(b(40.0, 0.0, 50.0, 10.0), 1, "a", 0.75, ClassGroup::Unseen), // TP
            ],
        )];
        let got = average_precision(&dets, &gts, "a", 0.5).unwrap();
        // independent scalar-loop reference over the TP/FP sequence
        let tps = [true, false, true, false, true];
        let total_gt = 3.0;
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut prec: Vec<f64> = Vec::new();
        let mut rec: Vec<f64> = Vec::new();
        for &is_tp in &tps {
            if is_tp {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            prec.push(tp / (tp + fp));
            rec.push(tp / total_gt);
        }
        // envelope + rectangle sum
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..prec.len() {
            if rec[i] > prev_r {
                let env = prec[i..].iter().cloned().fold(0.0f64, f64::max);
                ap += (rec[i] - prev_r) * env;
                prev_r = rec[i];
            }
        }
        assert_abs_diff_eq!(got, 100.0 * ap, epsilon = 1e-9);
    }

    #[test]
    fn harmonic_mean_paper_arithmetic() {
        assert_abs_diff_eq!(harmonic_mean(36.00, 13.10).unwrap(), 19.21, epsilon = 0.005);
        assert_abs_diff_eq!(harmonic_mean(56.39, 51.65).unwrap(), 53.92, epsilon = 0.005);
    }

    #[test]
    fn harmonic_mean_equal_arguments_identity() {
        for x in [1.0, 13.5, 99.0] {
            assert_abs_diff_eq!(harmonic_mean(x, x).unwrap(), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn harmonic_mean_both_zero_errors() {
        assert!(matches!(
            harmonic_mean(0.0, 0.0),
            Err(BlcError::UndefinedHarmonicMean)
        ));
    }

    #[test]
    fn classwise_recall_decomposes_overall() {
        let gts = vec![gt_img(
            1,
            vec![
                gt("a", b(0.0, 0.0, 10.0, 10.0)),
                gt("a", b(20.0, 0.0, 30.0, 10.0)),
                gt("b", b(40.0, 0.0, 50.0, 10.0)),
            ],
        )];
        let dets = vec![det_img(
            1,
            vec![
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(40.0, 0.0, 50.0, 10.0), 2, "b", 0.8, ClassGroup::Unseen),
            ],
        )];
        let classes = vec!["a".to_string(), "b".to_string()];
        let per_class = classwise_recall(&dets, &gts, &classes, 0.5, 100);
        let overall = recall_at_k(&dets, &gts, 100, 0.5).unwrap();
        // gt-count-weighted mean of per-class recalls
        let weighted = (per_class["a"].unwrap() * 2.0 + per_class["b"].unwrap() * 1.0) / 3.0;
        assert_abs_diff_eq!(overall, weighted, epsilon = 1e-9);
        assert_abs_diff_eq!(per_class["a"].unwrap(), 50.0, epsilon = 1e-9);
    }

    #[test]
    fn class_without_gt_is_not_applicable() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        let classes = vec!["a".to_string(), "ghost".to_string()];
        let per_class = classwise_recall(&[], &gts, &classes, 0.5, 100);
        assert_eq!(per_class["ghost"], None);
        assert_eq!(per_class["a"], Some(0.0));
    }

    #[test]
    fn recall_monotone_in_iou_and_k() {
        let gts = vec![gt_img(
            1,
            vec![
                gt("a", b(0.0, 0.0, 10.0, 10.0)),
                gt("a", b(20.0, 0.0, 30.0, 10.0)),
            ],
        )];
        let dets = vec![det_img(
            1,
            vec![
                detection(b(1.0, 1.0, 11.0, 11.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(21.0, 1.0, 29.0, 9.0), 1, "a", 0.8, ClassGroup::Unseen),
            ],
        )];
        let mut prev = 101.0;
        for thr in [0.4, 0.5, 0.6, 0.7] {
            let r = recall_at_k(&dets, &gts, 100, thr).unwrap();
            assert!(r <= prev);
            prev = r;
        }
        let r1 = recall_at_k(&dets, &gts, 1, 0.4).unwrap();
        let r2 = recall_at_k(&dets, &gts, 2, 0.4).unwrap();
        assert!(r2 >= r1);
    }

    #[test]
    fn no_gt_double_counting() {
        let gts = vec![gt_img(1, vec![gt("a", b(0.0, 0.0, 10.0, 10.0))])];
        let dets = vec![det_img(
            1,
            vec![
                detection(b(0.0, 0.0, 10.0, 10.0), 1, "a", 0.9, ClassGroup::Unseen),
                detection(b(1.0, 1.0, 10.0, 10.0), 1, "a", 0.8, ClassGroup::Unseen),
            ],
        )];
        // second detection overlaps the same (already matched) gt: recall
        // stays 100, not 200
        assert_abs_diff_eq!(
            recall_at_k(&dets, &gts, 100, 0.5).unwrap(),
            100.0,
            epsilon = 1e-12
        );
        let top: Vec<&Detection> = dets[0].detections.iter().collect();
        let gt_refs: Vec<&GtBox> = gts[0].boxes.iter().collect();
        let m = match_greedy(&top, &gt_refs, 0.5);
        assert_eq!(m.det_tp[0].0, true);
        assert_eq!(m.det_tp[1].0, false);
    }

    #[test]
    fn ground_truth_file_round_trip() {
        let gts = vec![gt_img(
            7,
            vec![GtBox {
                bbox: b(1.0, 2.0, 3.0, 4.0),
                class: "hot dog".into(),
                group: ClassGroup::Unseen,
            }],
        )];
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &gts, "# gt\n").unwrap();
        let back = read_ground_truth(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].boxes[0].class, "hot dog");
    }

    #[test]
    fn report_formats_are_deterministic() {
        let report = EvalReport {
            zsd: Some(ZsdReport {
                recall_at_iou: vec![(0.4, 50.0), (0.5, 40.0), (0.6, 30.0)],
                map_05: 12.5,
                per_class_recall: BTreeMap::from([
                    ("a".to_string(), Some(40.0)),
                    ("b".to_string(), None),
                ]),
                k: 100,
            }),
            gzsd: Some(GzsdReport {
                seen_map: 36.0,
                seen_recall: 56.39,
                unseen_map: 13.1,
                unseen_recall: 51.65,
                hm_map: 19.21,
                hm_recall: 53.92,
            }),
            ap_interpolation: "all-point".into(),
        };
        assert_eq!(report.format_table(), report.format_table());
        let kv = report.format_kv();
        assert!(kv.contains("gzsd.hm.map = 19.2100"));
        assert!(kv.contains("zsd.class_recall.b = n/a"));
    }
}
