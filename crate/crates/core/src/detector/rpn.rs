//! Region proposal network at toy scale: a per-cell linear head over the
//! feature map scoring a fixed anchor grid (3 scales, single aspect ratio).

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use crate::detector::bbox::{decode_box, BBox};
use crate::detector::features::FeatureMap;
use crate::error::Result;
use crate::util::fan_in_matrix;

/// RPN proposal-generation knobs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct RpnConfig {
    /// Anchor side lengths in pixels (square anchors, one aspect ratio).
    pub anchor_scales: Vec<f64>,
    /// Candidates kept before NMS.
    pub pre_nms_top_n: usize,
    /// IoU above which a lower-scored proposal is suppressed.
    pub nms_iou: f64,
    /// Proposals returned after NMS.
    pub max_proposals: usize,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            anchor_scales: vec![12.0, 24.0, 40.0],
            pre_nms_top_n: 200,
            nms_iou: 0.7,
            max_proposals: 100,
        }
    }
}

/// Linear objectness + regression heads applied to every cell feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    /// scales × channels
    pub obj_w: Array2<f64>,
    pub obj_b: Array1<f64>,
    /// (4·scales) × channels
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
}

impl RpnHead {
    pub fn seeded(r: &mut ChaCha12Rng, channels: usize, num_scales: usize) -> Self {
        Self {
            obj_w: fan_in_matrix(r, num_scales, channels, channels),
            obj_b: Array1::zeros(num_scales),
            reg_w: fan_in_matrix(r, 4 * num_scales, channels, channels),
            reg_b: Array1::zeros(4 * num_scales),
        }
    }
}

/// The fixed anchor grid for a feature map: cell-major (row, column), scale
/// innermost, so anchor index is `(y·W + x)·A + a`. Anchors are not clipped.
pub fn generate_anchors(feat_h: usize, feat_w: usize, stride: f64, scales: &[f64]) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * scales.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in scales {
                anchors.push(BBox {
                    x1: cx - s / 2.0,
                    y1: cy - s / 2.0,
                    x2: cx + s / 2.0,
                    y2: cy + s / 2.0,
                });
            }
        }
    }
    anchors
}

/// Raw per-anchor outputs: objectness logit and box deltas.
pub struct RpnRaw {
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
    pub anchors: Vec<BBox>,
}

/// Scores and regresses every anchor.
pub fn rpn_forward(feat: &FeatureMap, head: &RpnHead, cfg: &RpnConfig) -> RpnRaw {
    let (h, w) = (feat.height(), feat.width());
    let num_scales = cfg.anchor_scales.len();
    let anchors = generate_anchors(h, w, feat.stride, &cfg.anchor_scales);
    let mut logits = Vec::with_capacity(anchors.len());
    let mut deltas = Vec::with_capacity(anchors.len());
    for y in 0..h {
        for x in 0..w {
            let cell = feat.data.slice(ndarray::s![.., y, x]);
            let obj = head.obj_w.dot(&cell) + &head.obj_b;
            let reg = head.reg_w.dot(&cell) + &head.reg_b;
            for a in 0..num_scales {
                logits.push(obj[a]);
                deltas.push([reg[4 * a], reg[4 * a + 1], reg[4 * a + 2], reg[4 * a + 3]]);
            }
        }
    }
    RpnRaw {
        logits,
        deltas,
        anchors,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates scored proposals: decode, clip, sort by score (ties broken by
/// anchor index ascending), pre-NMS cut, class-agnostic NMS, final cap.
pub fn rpn_propose(
    feat: &FeatureMap,
    head: &RpnHead,
    cfg: &RpnConfig,
) -> Result<Vec<(BBox, f64)>> {
    let raw = rpn_forward(feat, head, cfg);
    let (img_w, img_h) = feat.image_size();
    let mut candidates: Vec<(usize, BBox, f64)> = Vec::new();
    for (idx, anchor) in raw.anchors.iter().enumerate() {
        let score = sigmoid(raw.logits[idx]);
        let decoded = match decode_box(anchor, &raw.deltas[idx], img_w, img_h) {
            Ok(b) => b,
            Err(_) => match anchor.clip(img_w, img_h) {
                Some(b) => b,
                None => continue,
            },
        };
        candidates.push((idx, decoded, score));
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    candidates.truncate(cfg.pre_nms_top_n);

    let mut kept: Vec<(BBox, f64)> = Vec::new();
    for (_, bx, score) in candidates {
        if kept.iter().all(|(k, _)| k.iou(&bx) <= cfg.nms_iou) {
            kept.push((bx, score));
            if kept.len() == cfg.max_proposals {
                break;
            }
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use ndarray::Array3;

    fn toy_feat(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut r = rng(seed);
        FeatureMap {
            data: Array3::from_shape_fn((c, h, w), |_| {
                use rand::Rng;
                r.random_range(-1.0..1.0)
            }),
            stride: 4.0,
        }
    }

    #[test]
    fn proposals_satisfy_box_invariants() {
        let feat = toy_feat(8, 16, 16, 3);
        let mut r = rng(4);
        let head = RpnHead::seeded(&mut r, 8, 3);
        let cfg = RpnConfig::default();
        let props = rpn_propose(&feat, &head, &cfg).unwrap();
        assert!(!props.is_empty());
        let (img_w, img_h) = feat.image_size();
        for (b, _) in &props {
            assert!(b.is_valid());
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= img_w && b.y2 <= img_h);
        }
        assert!(props.len() <= cfg.max_proposals);
    }

    #[test]
    fn scores_sorted_non_increasing() {
        let feat = toy_feat(8, 16, 16, 5);
        let mut r = rng(6);
        let head = RpnHead::seeded(&mut r, 8, 3);
        let props = rpn_propose(&feat, &head, &RpnConfig::default()).unwrap();
        for pair in props.windows(2) {
            assert!(pair[0].1 >= pair[1].1);
        }
    }

    #[test]
    fn constant_logits_fall_back_to_anchor_index_order() {
        let feat = toy_feat(8, 4, 4, 7);
        let head = RpnHead {
            obj_w: Array2::zeros((3, 8)),
            obj_b: Array1::from_elem(3, 0.3),
            reg_w: Array2::zeros((12, 8)),
            reg_b: Array1::zeros(12),
        };
        let cfg = RpnConfig {
            nms_iou: 1.1, // keep everything: ordering is what we check
            ..RpnConfig::default()
        };
        let props = rpn_propose(&feat, &head, &cfg).unwrap();
        // zero deltas: proposals are anchors clipped to the image, in
        // anchor-index order
        let anchors = generate_anchors(4, 4, 4.0, &cfg.anchor_scales);
        let expected: Vec<BBox> = anchors
            .iter()
            .filter_map(|a| a.clip(16.0, 16.0))
            .collect();
        assert_eq!(props.len(), expected.len().min(cfg.max_proposals));
        for ((b, _), e) in props.iter().zip(expected.iter()) {
            assert!((b.x1 - e.x1).abs() < 1e-12 && (b.y2 - e.y2).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_grid_is_cell_major_scale_innermost() {
        let anchors = generate_anchors(2, 2, 4.0, &[8.0, 16.0]);
        assert_eq!(anchors.len(), 8);
        // first two anchors share the first cell center
        let (cx0, cy0) = anchors[0].center();
        let (cx1, cy1) = anchors[1].center();
        assert_eq!((cx0, cy0), (2.0, 2.0));
        assert_eq!((cx1, cy1), (2.0, 2.0));
        assert_eq!(anchors[0].width(), 8.0);
        assert_eq!(anchors[1].width(), 16.0);
        // third anchor moves one cell right
        let (cx2, _) = anchors[2].center();
        assert_eq!(cx2, 6.0);
    }
}
