//! The two training phases. Phase one trains the background-learnable RPN
//! (foreground-background semantic branch over sampled anchors) and exports
//! its learned background vector. Phase two trains the cascade from scratch
//! with the supplied seen matrix; the RPN proposal head trains jointly with
//! the cascade heads. Stage boxes are detached between stages: each training
//! step assigns targets at the boxes produced by the current parameters and
//! differentiates the head losses at those fixed RoIs.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ClassGroup, Dataset};
use crate::detector::bbox::{decode_box, encode_box, BBox};
use crate::detector::cascade::{pool_rois, BlrpnModel, CascadeModel, ModelConfig};
use crate::detector::features::{FeatureMap, ToyBackbone};
use crate::detector::rpn::{generate_anchors, rpn_forward, rpn_propose, RpnConfig};
use crate::embeddings::{ForegroundBackgroundMatrix, SeenMatrix, VocabularyMatrix};
use crate::error::{BlcError, Result};
use crate::training::assign::{assign_rpn_targets, assign_stage_targets, sample_anchors};
use crate::training::grad::{blrpn_head_loss, cascade_head_loss, StageBatch};
use crate::training::optim::{global_norm, SgdMomentum};
use crate::training::TrainConfig;
use crate::util::{derive_seed, rng};

/// One optimizer-step log entry.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub reg_loss: f64,
    pub sem_loss: f64,
    pub rpn_loss: f64,
}

/// Zero-shot hygiene counters: how many unseen-tagged boxes reached the
/// training ops. Must be zero for a correctly filtered dataset.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct HygieneAudit {
    pub unseen_boxes_in_training: usize,
    pub train_images: usize,
    pub seen_boxes_used: usize,
}

#[derive(Debug, Clone)]
pub struct BlrpnTrainResult {
    pub model: BlrpnModel,
    pub learned_background: Array1<f64>,
    pub initial_background: Array1<f64>,
    pub log: Vec<TrainLogRecord>,
    pub audit: HygieneAudit,
}

#[derive(Debug, Clone)]
pub struct CascadeTrainResult {
    pub model: CascadeModel,
    pub log: Vec<TrainLogRecord>,
    pub audit: HygieneAudit,
}

fn features_for(
    image: &crate::data::AnnotatedImage,
    backbone: &ToyBackbone,
) -> Result<FeatureMap> {
    let data = image.data.as_ref().ok_or_else(|| {
        BlcError::InvalidConfig(format!("image {} has no pixel or feature data", image.id))
    })?;
    backbone.forward(data)
}

/// Ground-truth boxes usable for training, with unseen-tagged boxes counted
/// and withheld.
fn training_gt(
    image: &crate::data::AnnotatedImage,
    ws: Option<&SeenMatrix>,
    audit: &mut HygieneAudit,
) -> Vec<(BBox, usize)> {
    let mut out = Vec::new();
    for b in &image.boxes {
        if b.group == ClassGroup::Unseen {
            audit.unseen_boxes_in_training += 1;
            continue;
        }
        let label = match ws {
            Some(ws) => match ws.class_id(&b.class) {
                Some(id) => id,
                None => {
                    audit.unseen_boxes_in_training += 1;
                    continue;
                }
            },
            None => 1,
        };
        audit.seen_boxes_used += 1;
        out.push((b.bbox, label));
    }
    out
}

fn anchors_inside(anchors: &[BBox], w: f64, h: f64) -> Vec<usize> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= w && a.y2 <= h)
        .map(|(i, _)| i)
        .collect()
}

/// Trains the foreground-background branch on anchor samples and returns
/// the learned background vector (column 0 of W_fb). The background column
/// starts from the seen matrix's current background (the seen-class mean);
/// the foreground column starts uniform random. D is never updated.
pub fn train_blrpn(
    dataset: &Dataset,
    ws: &SeenMatrix,
    vocab: &VocabularyMatrix,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    backbone: &ToyBackbone,
    max_iters: Option<usize>,
) -> Result<BlrpnTrainResult> {
    cfg.validate(1).ok();
    let d = ws.dim();
    let initial_background = ws.background().to_owned();
    let mut init_rng = rng(derive_seed(cfg.seed, "blrpn-init", 0));
    let scale = 1.0 / (d as f64).sqrt();
    let v_f = Array1::from_shape_fn(d, |_| init_rng.random_range(-scale..scale));
    let wfb = ForegroundBackgroundMatrix::new(initial_background.clone(), v_f)?;
    let mut model = BlrpnModel::new(
        wfb,
        vocab,
        model_cfg.clone(),
        derive_seed(cfg.seed, "blrpn-params", 0),
    )?;

    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut audit = HygieneAudit {
        train_images: dataset.len(),
        ..Default::default()
    };
    let mut iteration = 0usize;
    'outer: for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_for_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "blrpn-shuffle", epoch as u64)));
        for &img_idx in &order {
            if let Some(limit) = max_iters {
                if iteration >= limit {
                    break 'outer;
                }
            }
            let image = &dataset.images[img_idx];
            let feat = features_for(image, backbone)?;
            let gt = training_gt(image, None, &mut audit);
            let gt_boxes: Vec<BBox> = gt.iter().map(|(b, _)| *b).collect();
            let anchors = generate_anchors(
                feat.height(),
                feat.width(),
                feat.stride,
                &model_cfg.rpn.anchor_scales,
            );
            let inside = anchors_inside(&anchors, image.width, image.height);
            let inside_boxes: Vec<BBox> = inside.iter().map(|&i| anchors[i]).collect();
            let targets = assign_rpn_targets(&inside_boxes, &gt_boxes, 0.7, 0.3);
            let mut sample_rng = rng(derive_seed(cfg.seed, "blrpn-sample", iteration as u64));
            let picked = sample_anchors(&targets, cfg.anchor_batch, &mut sample_rng);
            if picked.is_empty() {
                continue;
            }
            let rois: Vec<BBox> = picked.iter().map(|&i| inside_boxes[i]).collect();
            let x = pool_rois(&feat, &rois, model_cfg.pool_size)?;
            let labels: Vec<usize> = picked
                .iter()
                .map(|&i| usize::from(targets[i].label == Some(true)))
                .collect();
            let reg_targets: Vec<Option<[f64; 4]>> = picked
                .iter()
                .map(|&i| {
                    targets[i]
                        .matched_gt
                        .map(|gi| encode_box(&inside_boxes[i], &gt_boxes[gi]))
                })
                .collect();
            let batch = StageBatch {
                x,
                labels,
                reg_targets,
            };
            let ((reg_loss, sem_loss, total), grads) = blrpn_head_loss(&model, vocab, &batch)?;
            if !total.is_finite() {
                return Err(BlcError::Divergence {
                    iteration,
                    msg: format!("non-finite blrpn loss {total}"),
                });
            }
            let clip_scale = clip_factor(
                cfg.grad_clip,
                grads
                    .wfb
                    .iter()
                    .chain(grads.t.iter())
                    .chain(grads.m.iter())
                    .chain(grads.reg_w.iter())
                    .chain(grads.reg_b.iter()),
            );
            step2(&mut opt, lr, "wfb", &mut model.wfb.mat, &grads.wfb, clip_scale);
            step2(&mut opt, lr, "t", &mut model.semantic.t, &grads.t, clip_scale);
            step2(&mut opt, lr, "m", &mut model.semantic.m, &grads.m, clip_scale);
            step2(&mut opt, lr, "reg_w", &mut model.reg_w, &grads.reg_w, clip_scale);
            step1(&mut opt, lr, "reg_b", &mut model.reg_b, &grads.reg_b, clip_scale);
            iteration += 1;
            log.push(TrainLogRecord {
                iteration,
                epoch,
                lr,
                loss: total,
                reg_loss,
                sem_loss,
                rpn_loss: 0.0,
            });
        }
    }
    Ok(BlrpnTrainResult {
        learned_background: model.learned_background(),
        initial_background,
        model,
        log,
        audit,
    })
}

fn clip_factor<'a>(clip: Option<f64>, grads: impl Iterator<Item = &'a f64>) -> f64 {
    match clip {
        Some(max_norm) => {
            let norm = global_norm(grads.cloned());
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

fn step2(
    opt: &mut SgdMomentum,
    lr: f64,
    name: &str,
    param: &mut ndarray::Array2<f64>,
    grad: &ndarray::Array2<f64>,
    clip_scale: f64,
) {
    let len = param.len();
    opt.step(
        lr,
        name,
        len,
        param.iter_mut(),
        grad.iter().map(|g| g * clip_scale),
    );
}

fn step1(
    opt: &mut SgdMomentum,
    lr: f64,
    name: &str,
    param: &mut Array1<f64>,
    grad: &Array1<f64>,
    clip_scale: f64,
) {
    let len = param.len();
    opt.step(
        lr,
        name,
        len,
        param.iter_mut(),
        grad.iter().map(|g| g * clip_scale),
    );
}

struct RpnGrads {
    obj_w: ndarray::Array2<f64>,
    obj_b: Array1<f64>,
    reg_w: ndarray::Array2<f64>,
    reg_b: Array1<f64>,
    loss: f64,
}

/// Binary cross-entropy objectness plus smooth-ℓ1 regression over sampled
/// anchors, with gradients for the per-cell linear RPN head.
fn rpn_loss_and_grads(
    feat: &FeatureMap,
    model: &CascadeModel,
    gt_boxes: &[BBox],
    image_w: f64,
    image_h: f64,
    sample_rng: &mut rand_chacha::ChaCha12Rng,
    anchor_batch: usize,
) -> RpnGrads {
    let head = &model.rpn_head;
    let rpn_cfg = &model.cfg.rpn;
    let num_scales = rpn_cfg.anchor_scales.len();
    let raw = rpn_forward(feat, head, rpn_cfg);
    let inside = anchors_inside(&raw.anchors, image_w, image_h);
    let inside_boxes: Vec<BBox> = inside.iter().map(|&i| raw.anchors[i]).collect();
    let targets = assign_rpn_targets(&inside_boxes, gt_boxes, 0.7, 0.3);
    let picked = sample_anchors(&targets, anchor_batch, sample_rng);

    let mut obj_w = ndarray::Array2::<f64>::zeros(head.obj_w.raw_dim());
    let mut obj_b = Array1::<f64>::zeros(head.obj_b.len());
    let mut reg_w = ndarray::Array2::<f64>::zeros(head.reg_w.raw_dim());
    let mut reg_b = Array1::<f64>::zeros(head.reg_b.len());
    if picked.is_empty() {
        return RpnGrads {
            obj_w,
            obj_b,
            reg_w,
            reg_b,
            loss: 0.0,
        };
    }

    let n_samples = picked.len() as f64;
    let n_pos = picked
        .iter()
        .filter(|&&i| targets[i].label == Some(true))
        .count()
        .max(1) as f64;
    let mut loss = 0.0;
    let feat_w = feat.width();
    for &local_idx in &picked {
        let anchor_idx = inside[local_idx];
        let scale_idx = anchor_idx % num_scales;
        let cell = anchor_idx / num_scales;
        let (cy, cx) = (cell / feat_w, cell % feat_w);
        let cell_feat = feat.data.slice(ndarray::s![.., cy, cx]);
        let y = f64::from(targets[local_idx].label == Some(true));
        let z = raw.logits[anchor_idx];
        let p = 1.0 / (1.0 + (-z).exp());
        loss += -(y * p.max(f64::MIN_POSITIVE).ln()
            + (1.0 - y) * (1.0 - p).max(f64::MIN_POSITIVE).ln())
            / n_samples;
        let dz = (p - y) / n_samples;
        for (c, cv) in cell_feat.iter().enumerate() {
            obj_w[[scale_idx, c]] += dz * cv;
        }
        obj_b[scale_idx] += dz;
        if let Some(gi) = targets[local_idx].matched_gt {
            let target = encode_box(&inside_boxes[local_idx], &gt_boxes[gi]);
            let delta = raw.deltas[anchor_idx];
            for j in 0..4 {
                let diff = delta[j] - target[j];
                loss += crate::training::smooth_l1_scalar(diff) / n_pos;
                let dd = crate::training::smooth_l1_derivative(diff) / n_pos;
                for (c, cv) in cell_feat.iter().enumerate() {
                    reg_w[[4 * scale_idx + j, c]] += dd * cv;
                }
                reg_b[4 * scale_idx + j] += dd;
            }
        }
    }
    RpnGrads {
        obj_w,
        obj_b,
        reg_w,
        reg_b,
        loss,
    }
}

/// Builds the fixed per-stage batches for one image: runs the box cascade
/// with current parameters, assigns targets at each stage's input RoIs,
/// pools the features the differentiable pass will consume, and balances
/// each stage's loss batch (all positives, negatives capped at
/// `neg_pos_ratio` per positive). Box refinement sees every proposal.
fn build_stage_batches(
    feat: &FeatureMap,
    proposals: &[BBox],
    model: &CascadeModel,
    gt: &[(BBox, usize)],
    cfg: &TrainConfig,
    sample_rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<StageBatch>> {
    let (img_w, img_h) = feat.image_size();
    let mut rois: Vec<BBox> = proposals.to_vec();
    let mut batches = Vec::with_capacity(model.stages.len());
    for (stage, thr) in model
        .stages
        .iter()
        .zip(model.cfg.stage_iou_thresholds.iter())
    {
        let x = pool_rois(feat, &rois, model.cfg.pool_size)?;
        let assignment = assign_stage_targets(&rois, gt, *thr);

        let positives: Vec<usize> = (0..rois.len())
            .filter(|&i| assignment.labels[i] != 0)
            .collect();
        let mut negatives: Vec<usize> = (0..rois.len())
            .filter(|&i| assignment.labels[i] == 0)
            .collect();
        negatives.shuffle(sample_rng);
        let keep_neg = ((positives.len() as f64 * cfg.neg_pos_ratio).ceil() as usize)
            .max(cfg.min_negatives)
            .min(negatives.len());
        let mut picked: Vec<usize> = positives;
        picked.extend(negatives.into_iter().take(keep_neg));
        picked.sort_unstable();

        let n = model.cfg.roi_feature_dim();
        let mut bx = ndarray::Array2::<f64>::zeros((picked.len(), n));
        for (row, &i) in picked.iter().enumerate() {
            bx.row_mut(row).assign(&x.row(i));
        }
        batches.push(StageBatch {
            x: bx,
            labels: picked.iter().map(|&i| assignment.labels[i]).collect(),
            reg_targets: picked.iter().map(|&i| assignment.reg_targets[i]).collect(),
        });

        // advance boxes for the next stage (detached)
        let deltas = x.dot(&stage.reg_w.t()) + &stage.reg_b;
        rois = rois
            .iter()
            .enumerate()
            .map(|(i, roi)| {
                let dl = [
                    deltas[[i, 0]],
                    deltas[[i, 1]],
                    deltas[[i, 2]],
                    deltas[[i, 3]],
                ];
                decode_box(roi, &dl, img_w, img_h).unwrap_or(*roi)
            })
            .collect();
    }
    Ok(batches)
}

/// Trains a fresh cascade (no pre-trained seen-class weights) on the given
/// seen matrix. The RPN proposal head trains jointly; W_s and D stay fixed
/// throughout.
pub fn train_cascade(
    dataset: &Dataset,
    ws: &SeenMatrix,
    vocab: &VocabularyMatrix,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    use_flow: bool,
    backbone: &ToyBackbone,
) -> Result<CascadeTrainResult> {
    cfg.validate(model_cfg.num_stages)?;
    let mut model = CascadeModel::new(
        ws.clone(),
        vocab.clone(),
        model_cfg.clone(),
        use_flow,
        derive_seed(cfg.seed, "cascade-params", 0),
    )?;
    let mut opt = SgdMomentum::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut audit = HygieneAudit {
        train_images: dataset.len(),
        ..Default::default()
    };
    let train_rpn_cfg = RpnConfig {
        max_proposals: cfg.train_max_proposals,
        ..model.cfg.rpn.clone()
    };
    let mut iteration = 0usize;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_for_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "cascade-shuffle", epoch as u64)));
        for &img_idx in &order {
            let image = &dataset.images[img_idx];
            let feat = features_for(image, backbone)?;
            let gt = training_gt(image, Some(ws), &mut audit);
            let gt_boxes: Vec<BBox> = gt.iter().map(|(b, _)| *b).collect();

            let mut sample_rng = rng(derive_seed(cfg.seed, "cascade-sample", iteration as u64));
            let rpn = rpn_loss_and_grads(
                &feat,
                &model,
                &gt_boxes,
                image.width,
                image.height,
                &mut sample_rng,
                cfg.anchor_batch,
            );

            let mut proposals: Vec<BBox> = rpn_propose(&feat, &model.rpn_head, &train_rpn_cfg)?
                .into_iter()
                .map(|(b, _)| b)
                .collect();
            if cfg.append_gt_proposals {
                proposals.extend(gt_boxes.iter().cloned());
            }
            if proposals.is_empty() {
                iteration += 1;
                continue;
            }

            let batches = build_stage_batches(&feat, &proposals, &model, &gt, cfg, &mut sample_rng)?;
            let (parts, grads) =
                cascade_head_loss(&model, &batches, use_flow, &cfg.stage_weights)?;
            let total = parts.total + rpn.loss;
            if !total.is_finite() {
                return Err(BlcError::Divergence {
                    iteration,
                    msg: format!("non-finite cascade loss {total}"),
                });
            }

            let clip_scale = clip_factor(
                cfg.grad_clip,
                grads.stages.iter().flat_map(|g| {
                    g.t.iter()
                        .chain(g.m.iter())
                        .chain(g.reg_w.iter())
                        .chain(g.reg_b.iter())
                }),
            );

            for (s, g) in grads.stages.iter().enumerate() {
                let p = &mut model.stages[s];
                step2(&mut opt, lr, &format!("stage{s}.t"), &mut p.semantic.t, &g.t, clip_scale);
                step2(&mut opt, lr, &format!("stage{s}.m"), &mut p.semantic.m, &g.m, clip_scale);
                step2(&mut opt, lr, &format!("stage{s}.reg_w"), &mut p.reg_w, &g.reg_w, clip_scale);
                step1(&mut opt, lr, &format!("stage{s}.reg_b"), &mut p.reg_b, &g.reg_b, clip_scale);
            }
            if use_flow {
                for (fidx, g) in grads.fusers.iter().enumerate() {
                    let fu = &mut model.fusers[fidx];
                    step2(&mut opt, lr, &format!("fuser{fidx}.a"), &mut fu.a, &g.a, clip_scale);
                    step2(&mut opt, lr, &format!("fuser{fidx}.b"), &mut fu.b, &g.b, clip_scale);
                }
            }
            step2(&mut opt, lr, "rpn.obj_w", &mut model.rpn_head.obj_w, &rpn.obj_w, 1.0);
            step1(&mut opt, lr, "rpn.obj_b", &mut model.rpn_head.obj_b, &rpn.obj_b, 1.0);
            step2(&mut opt, lr, "rpn.reg_w", &mut model.rpn_head.reg_w, &rpn.reg_w, 1.0);
            step1(&mut opt, lr, "rpn.reg_b", &mut model.rpn_head.reg_b, &rpn.reg_b, 1.0);

            iteration += 1;
            let reg_sum: f64 = parts.per_stage.iter().map(|(r, _)| r).sum();
            let sem_sum: f64 = parts.per_stage.iter().map(|(_, s)| s).sum();
            log.push(TrainLogRecord {
                iteration,
                epoch,
                lr,
                loss: total,
                reg_loss: reg_sum,
                sem_loss: sem_sum,
                rpn_loss: rpn.loss,
            });
        }
    }
    Ok(CascadeTrainResult { model, log, audit })
}
