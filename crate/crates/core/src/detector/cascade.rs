//! The three-stage cascade detector: per-stage semantic branches with
//! non-shared weights, class-agnostic box regression, optional semantic
//! information flow between stages, and the foreground-background model
//! trained by the background-learnable RPN phase.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::detector::bbox::{decode_box, BBox};
use crate::detector::features::{roi_pool, FeatureMap};
use crate::detector::rpn::{RpnConfig, RpnHead};
use crate::embeddings::{ForegroundBackgroundMatrix, SeenMatrix, VocabularyMatrix};
use crate::error::{BlcError, Result};
use crate::semantic_flow::{fuse, FlowFuser, FlowState};
use crate::semantic_head::{
    compose_projection_with_state, semantic_scores_batch, ClassScores, SemanticBranchParams,
};
use crate::util::{fan_in_matrix, rng};

/// Structural configuration shared by the detector and both training phases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature-map channels produced by the backbone (or supplied by the
    /// dataset in oracle-features mode).
    pub feature_channels: usize,
    /// RoI-Align output grid side; pooled feature length is
    /// `feature_channels · pool_size²`.
    pub pool_size: usize,
    pub num_stages: usize,
    /// Ascending per-stage assignment thresholds.
    pub stage_iou_thresholds: Vec<f64>,
    pub rpn: RpnConfig,
    /// Per-class NMS threshold for final detections.
    pub detection_nms_iou: f64,
    /// Detections kept per image after ranking.
    pub top_k: usize,
    /// Average the three stages' class scores instead of using stage 3 only.
    pub ensemble_stage_scores: bool,
    pub gzsd_seen_threshold: f64,
    pub gzsd_unseen_threshold: f64,
    /// Seed for the frozen conv backbone (pixel mode only).
    pub backbone_seed: u64,
    /// Initial scale of the flow fusers' identity matrices.
    pub fuser_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            pool_size: 2,
            num_stages: 3,
            stage_iou_thresholds: vec![0.5, 0.6, 0.7],
            rpn: RpnConfig::default(),
            detection_nms_iou: 0.5,
            top_k: 100,
            ensemble_stage_scores: false,
            gzsd_seen_threshold: 0.2,
            gzsd_unseen_threshold: 0.05,
            backbone_seed: 0,
            fuser_init_scale: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn roi_feature_dim(&self) -> usize {
        self.feature_channels * self.pool_size * self.pool_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages != self.stage_iou_thresholds.len() {
            return Err(BlcError::InvalidConfig(
                "stage_iou_thresholds length must equal num_stages".into(),
            ));
        }
        if self
            .stage_iou_thresholds
            .windows(2)
            .any(|w| w[0] > w[1])
        {
            return Err(BlcError::InvalidConfig(
                "stage IoU thresholds must be ascending".into(),
            ));
        }
        Ok(())
    }
}

/// One cascade stage: its own semantic adapters and regression map.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeStage {
    pub semantic: SemanticBranchParams,
    /// 4 × N class-agnostic delta regressor.
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
}

/// The full detector. `ws` and `vocab` are fixed; everything else trains.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub ws: SeenMatrix,
    pub vocab: VocabularyMatrix,
    pub stages: Vec<CascadeStage>,
    /// Fusers for stages 2..=num_stages (index t-2).
    pub fusers: Vec<FlowFuser>,
    pub rpn_head: RpnHead,
    pub use_flow: bool,
    pub cfg: ModelConfig,
}

impl CascadeModel {
    pub fn new(
        ws: SeenMatrix,
        vocab: VocabularyMatrix,
        cfg: ModelConfig,
        use_flow: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = ws.dim();
        if vocab.dim() != d {
            return Err(BlcError::DimMismatch {
                expected: d,
                got: vocab.dim(),
                context: "vocabulary matrix".into(),
            });
        }
        let n = cfg.roi_feature_dim();
        let v = vocab.len();
        let mut r = rng(seed);
        let stages = (0..cfg.num_stages)
            .map(|_| CascadeStage {
                semantic: SemanticBranchParams::new(
                    fan_in_matrix(&mut r, n, d, n),
                    fan_in_matrix(&mut r, v, d, v),
                ),
                reg_w: fan_in_matrix(&mut r, 4, n, n),
                reg_b: Array1::zeros(4),
            })
            .collect();
        let fusers = (1..cfg.num_stages)
            .map(|_| FlowFuser::scaled_identity(d, cfg.fuser_init_scale))
            .collect();
        let rpn_head = RpnHead::seeded(&mut r, cfg.feature_channels, cfg.rpn.anchor_scales.len());
        Ok(Self {
            ws,
            vocab,
            stages,
            fusers,
            rpn_head,
            use_flow,
            cfg,
        })
    }

    /// Number of seen classes s (softmax width is s+1).
    pub fn num_seen(&self) -> usize {
        self.ws.num_classes()
    }

    /// Semantic states f_t for every stage. Without flow each stage uses its
    /// local D·M_t; with flow the states chain through the fusers.
    pub fn flow_states(&self, use_flow: bool) -> Result<Vec<FlowState>> {
        let d = self.vocab.matrix().view();
        let mut states = Vec::with_capacity(self.stages.len());
        for (idx, stage) in self.stages.iter().enumerate() {
            let state = if idx == 0 || !use_flow {
                FlowState {
                    f: self.vocab.matrix().dot(&stage.semantic.m),
                    stage_index: idx + 1,
                }
            } else {
                fuse(
                    &states[idx - 1],
                    d,
                    stage.semantic.m.view(),
                    &self.fusers[idx - 1],
                )?
            };
            states.push(state);
        }
        Ok(states)
    }

    /// Composed k×N projections per stage (k = s+1).
    pub fn stage_projections(&self, use_flow: bool) -> Result<Vec<Array2<f64>>> {
        let states = self.flow_states(use_flow)?;
        self.stages
            .iter()
            .zip(states.iter())
            .map(|(stage, st)| {
                compose_projection_with_state(
                    self.ws.matrix().view(),
                    st.f.view(),
                    stage.semantic.t.view(),
                )
            })
            .collect()
    }
}

/// Outputs of one cascade stage for a batch of RoIs.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Regressed boxes r_t (one per input RoI).
    pub boxes: Vec<BBox>,
    /// Class probabilities, m × (s+1).
    pub probs: Array2<f64>,
    /// Raw regression deltas, m × 4.
    pub deltas: Array2<f64>,
    /// Pooled features the stage consumed, m × N.
    pub pooled: Array2<f64>,
}

impl StageOutput {
    pub fn scores(&self, roi: usize) -> ClassScores {
        ClassScores {
            probs: self.probs.row(roi).to_owned(),
        }
    }
}

/// Pools a batch of RoIs into an m×N matrix.
pub fn pool_rois(feat: &FeatureMap, rois: &[BBox], pool_size: usize) -> Result<Array2<f64>> {
    let n = feat.channels() * pool_size * pool_size;
    let mut x = Array2::<f64>::zeros((rois.len(), n));
    for (i, roi) in rois.iter().enumerate() {
        x.row_mut(i).assign(&roi_pool(feat, roi, pool_size)?);
    }
    Ok(x)
}

/// Runs the full cascade: each stage pools features at the previous stage's
/// boxes, scores them, and regresses refined boxes. Returns all stages'
/// outputs. Empty proposals produce empty outputs.
pub fn cascade_forward(
    feat: &FeatureMap,
    proposals: &[BBox],
    model: &CascadeModel,
    use_flow: bool,
) -> Result<Vec<StageOutput>> {
    let k = model.num_seen() + 1;
    let n = model.cfg.roi_feature_dim();
    if proposals.is_empty() {
        return Ok((0..model.stages.len())
            .map(|_| StageOutput {
                boxes: Vec::new(),
                probs: Array2::zeros((0, k)),
                deltas: Array2::zeros((0, 4)),
                pooled: Array2::zeros((0, n)),
            })
            .collect());
    }
    let projections = model.stage_projections(use_flow)?;
    let (img_w, img_h) = feat.image_size();
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(model.stages.len());
    let mut rois: Vec<BBox> = proposals.to_vec();
    for (stage, proj) in model.stages.iter().zip(projections.iter()) {
        let pooled = pool_rois(feat, &rois, model.cfg.pool_size)?;
        let probs = semantic_scores_batch(proj.view(), pooled.view())?;
        let deltas = pooled.dot(&stage.reg_w.t()) + &stage.reg_b;
        let boxes: Vec<BBox> = rois
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
        rois = boxes.clone();
        outputs.push(StageOutput {
            boxes,
            probs,
            deltas,
            pooled,
        });
    }
    Ok(outputs)
}

/// The model trained in the background-learnable phase: the trainable
/// two-column W_fb plus its own adapters and regression head. Only the
/// learned background vector survives into the cascade phase.
#[derive(Debug, Clone)]
pub struct BlrpnModel {
    pub wfb: ForegroundBackgroundMatrix,
    pub semantic: SemanticBranchParams,
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
    pub cfg: ModelConfig,
}

impl BlrpnModel {
    pub fn new(
        wfb: ForegroundBackgroundMatrix,
        vocab: &VocabularyMatrix,
        cfg: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = wfb.dim();
        if vocab.dim() != d {
            return Err(BlcError::DimMismatch {
                expected: d,
                got: vocab.dim(),
                context: "vocabulary matrix".into(),
            });
        }
        let n = cfg.roi_feature_dim();
        let v = vocab.len();
        let mut r = rng(seed);
        Ok(Self {
            wfb,
            semantic: SemanticBranchParams::new(
                fan_in_matrix(&mut r, n, d, n),
                fan_in_matrix(&mut r, v, d, v),
            ),
            reg_w: fan_in_matrix(&mut r, 4, n, n),
            reg_b: Array1::zeros(4),
        cfg,
        })
    }

    /// The composed 2×N foreground-background projection.
    pub fn projection(&self, vocab: &VocabularyMatrix) -> Result<Array2<f64>> {
        let f = vocab.matrix().dot(&self.semantic.m);
        compose_projection_with_state(self.wfb.mat.view(), f.view(), self.semantic.t.view())
    }

    pub fn learned_background(&self) -> Array1<f64> {
        self.wfb.background().to_owned()
    }
}

/// Scores RoIs with the foreground-background branch: per-RoI 2-way
/// probabilities plus regression deltas.
pub fn blrpn_forward(
    feat: &FeatureMap,
    rois: &[BBox],
    model: &BlrpnModel,
    vocab: &VocabularyMatrix,
) -> Result<(Vec<ClassScores>, Vec<[f64; 4]>)> {
    if rois.is_empty() {
        return Err(BlcError::EmptyInput("blrpn rois".into()));
    }
    let pooled = pool_rois(feat, rois, model.cfg.pool_size)?;
    let proj = model.projection(vocab)?;
    let probs = semantic_scores_batch(proj.view(), pooled.view())?;
    let deltas = pooled.dot(&model.reg_w.t()) + &model.reg_b;
    let scores = (0..rois.len())
        .map(|i| ClassScores {
            probs: probs.row(i).to_owned(),
        })
        .collect();
    let delta_rows = (0..rois.len())
        .map(|i| {
            [
                deltas[[i, 0]],
                deltas[[i, 1]],
                deltas[[i, 2]],
                deltas[[i, 3]],
            ]
        })
        .collect();
    Ok((scores, delta_rows))
}
