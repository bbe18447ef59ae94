//! Inference: seen-class scoring from the cascade's final stage, unseen
//! scoring by back-projecting seen probabilities through the word-vector
//! matrices, per-class NMS, and the generalized task that runs both
//! reasoning paths with per-group score thresholds.

use std::io::{BufRead, Write};

use ndarray::{Array1, ArrayView1};

use crate::data::ClassGroup;
use crate::detector::bbox::BBox;
use crate::detector::cascade::{cascade_forward, CascadeModel};
use crate::detector::features::{ImageData, ToyBackbone};
use crate::detector::rpn::rpn_propose;
use crate::embeddings::{SeenMatrix, UnseenMatrix};
use crate::error::{BlcError, Result};
use crate::semantic_head::ClassScores;

/// One scored detection. `class_id` is 1-based within its group's class
/// order; scores are clamped to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub class_name: String,
    pub score: f64,
    pub group: ClassGroup,
}

/// Back-projects seen-class probabilities into unseen-class scores:
/// `W_uᵀ · (W_s · p)` — the probability-weighted combination of seen word
/// vectors, projected onto the unseen (and background) vectors. Not
/// re-normalized; entries live in cosine range and may be negative.
pub fn unseen_scores(
    wu: &UnseenMatrix,
    ws: &SeenMatrix,
    seen_probs: &ClassScores,
) -> Result<Array1<f64>> {
    if seen_probs.len() != ws.num_classes() + 1 {
        return Err(BlcError::DimMismatch {
            expected: ws.num_classes() + 1,
            got: seen_probs.len(),
            context: "seen probability vector".into(),
        });
    }
    if wu.dim() != ws.dim() {
        return Err(BlcError::shapes(
            "W_u",
            wu.matrix().shape(),
            "W_s",
            ws.matrix().shape(),
        ));
    }
    let semantic = ws.matrix().dot(&seen_probs.probs);
    Ok(wu.matrix().t().dot(&semantic))
}

/// Greedy per-class non-maximum suppression: within each (group, class),
/// keep by descending score (ties broken by input order) and suppress any
/// remaining detection whose IoU with a kept one exceeds the threshold.
/// The merged result is ordered by score descending with input-order ties.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept_idx: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept_idx.iter().any(|&j| {
            dets[j].group == dets[i].group
                && dets[j].class_id == dets[i].class_id
                && dets[j].bbox.iou(&dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept_idx.push(i);
        }
    }
    kept_idx.into_iter().map(|i| dets[i].clone()).collect()
}

/// Final-stage boxes and class probabilities for one image.
fn final_stage_outputs(
    image: &ImageData,
    model: &CascadeModel,
    backbone: &ToyBackbone,
) -> Result<(Vec<BBox>, Vec<Array1<f64>>)> {
    let feat = backbone.forward(image)?;
    let proposals: Vec<BBox> = rpn_propose(&feat, &model.rpn_head, &model.cfg.rpn)?
        .into_iter()
        .map(|(b, _)| b)
        .collect();
    let outputs = cascade_forward(&feat, &proposals, model, model.use_flow)?;
    let last = outputs.last().expect("cascade has stages");
    let boxes = last.boxes.clone();
    let probs: Vec<Array1<f64>> = (0..boxes.len())
        .map(|i| {
            if model.cfg.ensemble_stage_scores {
                let mut acc = Array1::<f64>::zeros(last.probs.ncols());
                for stage in &outputs {
                    acc = acc + stage.probs.row(i);
                }
                acc / outputs.len() as f64
            } else {
                last.probs.row(i).to_owned()
            }
        })
        .collect();
    Ok((boxes, probs))
}

fn rank_and_cap(mut dets: Vec<Detection>, iou: f64, top_k: usize) -> Vec<Detection> {
    dets = nms(&dets, iou);
    dets.truncate(top_k);
    dets
}

/// Zero-shot detection: unseen classes only. The final stage's seen
/// probabilities are back-projected through the word vectors, the
/// background column is dropped, and per-class NMS plus a top-K cap give
/// the final ranked list.
pub fn detect_zsd(
    image: &ImageData,
    model: &CascadeModel,
    wu: &UnseenMatrix,
    backbone: &ToyBackbone,
) -> Result<Vec<Detection>> {
    let (boxes, probs) = final_stage_outputs(image, model, backbone)?;
    let mut dets = Vec::new();
    for (bx, p) in boxes.iter().zip(probs.iter()) {
        let scores = unseen_scores(
            wu,
            &model.ws,
            &ClassScores { probs: p.clone() },
        )?;
        for c in 1..scores.len() {
            dets.push(Detection {
                bbox: *bx,
                class_id: c,
                class_name: wu.class_name(c).unwrap_or("?").to_string(),
                score: scores[c].clamp(0.0, 1.0),
                group: ClassGroup::Unseen,
            });
        }
    }
    Ok(rank_and_cap(dets, model.cfg.detection_nms_iou, model.cfg.top_k))
}

/// Seen-class detection from the final stage's softmax scores (background
/// column dropped).
pub fn detect_seen(
    image: &ImageData,
    model: &CascadeModel,
    backbone: &ToyBackbone,
) -> Result<Vec<Detection>> {
    let (boxes, probs) = final_stage_outputs(image, model, backbone)?;
    let mut dets = Vec::new();
    for (bx, p) in boxes.iter().zip(probs.iter()) {
        for c in 1..p.len() {
            dets.push(Detection {
                bbox: *bx,
                class_id: c,
                class_name: model.ws.class_name(c).unwrap_or("?").to_string(),
                score: p[c].clamp(0.0, 1.0),
                group: ClassGroup::Seen,
            });
        }
    }
    Ok(rank_and_cap(dets, model.cfg.detection_nms_iou, model.cfg.top_k))
}

/// Generalized zero-shot detection: both reasoning paths run on the same
/// image; seen detections keep scores ≥ the seen threshold (0.2), unseen
/// ≥ the unseen threshold (0.05); the union is returned ordered by score.
pub fn detect_gzsd(
    image: &ImageData,
    model: &CascadeModel,
    wu: &UnseenMatrix,
    backbone: &ToyBackbone,
) -> Result<Vec<Detection>> {
    let seen = detect_seen(image, model, backbone)?;
    let unseen = detect_zsd(image, model, wu, backbone)?;
    let mut union: Vec<Detection> = seen
        .into_iter()
        .filter(|d| d.score >= model.cfg.gzsd_seen_threshold)
        .chain(
            unseen
                .into_iter()
                .filter(|d| d.score >= model.cfg.gzsd_unseen_threshold),
        )
        .collect();
    union.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(union)
}

/// Detections for one image, as written to and read from dump files.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

/// Which reasoning path(s) to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectMode {
    Zsd,
    Gzsd,
    Seen,
}

impl std::str::FromStr for DetectMode {
    type Err = BlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsd" => Ok(DetectMode::Zsd),
            "gzsd" => Ok(DetectMode::Gzsd),
            "seen" => Ok(DetectMode::Seen),
            other => Err(BlcError::InvalidConfig(format!(
                "unknown detect mode '{other}' (expected zsd, gzsd, or seen)"
            ))),
        }
    }
}

/// Runs detection over a whole dataset. Images without data are skipped.
pub fn detect_dataset(
    ds: &crate::data::Dataset,
    model: &CascadeModel,
    wu: &UnseenMatrix,
    backbone: &ToyBackbone,
    mode: DetectMode,
) -> Result<Vec<ImageDetections>> {
    ds.images
        .iter()
        .filter_map(|img| img.data.as_ref().map(|data| (img.id, data)))
        .map(|(id, data)| {
            let detections = match mode {
                DetectMode::Zsd => detect_zsd(data, model, wu, backbone)?,
                DetectMode::Gzsd => detect_gzsd(data, model, wu, backbone)?,
                DetectMode::Seen => detect_seen(data, model, backbone)?,
            };
            Ok(ImageDetections {
                image_id: id,
                detections,
            })
        })
        .collect()
}

/// Writes the detection dump: one tab-separated record per detection
/// (image id, group, class name, score, x1 y1 x2 y2). Lines starting with
/// `#` are headers.
pub fn write_detections<W: Write>(
    mut w: W,
    images: &[ImageDetections],
    header: &str,
) -> Result<()> {
    w.write_all(header.as_bytes())?;
    for img in images {
        for d in &img.detections {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.9}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                img.image_id, d.group, d.class_name, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2,
                d.bbox.y2
            )?;
        }
    }
    Ok(())
}

/// Reads a detection dump written by [`write_detections`].
pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<ImageDetections>> {
    let mut out: Vec<ImageDetections> = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split('\t').collect();
        if fields.len() != 8 {
            return Err(BlcError::Parse {
                line: line_no,
                msg: format!("expected 8 tab-separated fields, got {}", fields.len()),
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
        let det = Detection {
            bbox: BBox::new(num(fields[4])?, num(fields[5])?, num(fields[6])?, num(fields[7])?)?,
            class_id: 0,
            class_name: fields[2].to_string(),
            score: num(fields[3])?,
            group,
        };
        match out.iter_mut().find(|i| i.image_id == image_id) {
            Some(img) => img.detections.push(det),
            None => out.push(ImageDetections {
                image_id,
                detections: vec![det],
            }),
        }
    }
    Ok(out)
}

/// Convenience for tests and fixtures.
pub fn detection(
    bbox: BBox,
    class_id: usize,
    class_name: &str,
    score: f64,
    group: ClassGroup,
) -> Detection {
    Detection {
        bbox,
        class_id,
        class_name: class_name.to_string(),
        score,
        group,
    }
}

/// Seen-probability view helper used by the scoring tests.
pub fn class_scores_from(v: ArrayView1<'_, f64>) -> ClassScores {
    ClassScores {
        probs: v.to_owned(),
    }
}
