//! Training: the two loss functions, target assignment, manual
//! backpropagation through the semantic stack, the SGD schedule, and the
//! two-phase protocol (background-learnable RPN first, then the cascade).

pub mod assign;
pub mod grad;
pub mod optim;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{BlcError, Result};
use crate::semantic_head::ClassScores;

pub use assign::{assign_rpn_targets, assign_stage_targets, AnchorTarget, StageAssignment};
pub use grad::{blrpn_head_loss, cascade_head_loss, BlrpnGrads, CascadeGrads, StageBatch};
pub use optim::SgdMomentum;
pub use trainer::{
    train_blrpn, train_cascade, BlrpnTrainResult, CascadeTrainResult, HygieneAudit,
    TrainLogRecord,
};

/// Optimizer configuration and schedule. Defaults follow the reference
/// recipe: SGD momentum 0.9, weight decay 1e-4, lr 0.01 decayed by 0.1
/// after epochs 8 and 11 of 12, stage loss weights [1, 0.5, 0.25].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Per-stage loss weights α.
    pub stage_weights: Vec<f64>,
    /// Anchors sampled per image for RPN-style losses.
    pub anchor_batch: usize,
    /// Proposals kept per image during cascade training.
    pub train_max_proposals: usize,
    /// Append ground-truth boxes to the proposal set during training.
    pub append_gt_proposals: bool,
    /// Cap on background RoIs per stage loss: at most this many negatives
    /// per positive (all positives always participate). Box refinement
    /// still runs over every proposal.
    pub neg_pos_ratio: f64,
    /// Negatives kept even when a stage has no positives.
    pub min_negatives: usize,
    /// Optional global-norm gradient clip (off by default).
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 12,
            lr_decay_epochs: vec![8, 11],
            decay_factor: 0.1,
            stage_weights: vec![1.0, 0.5, 0.25],
            anchor_batch: 64,
            train_max_proposals: 32,
            append_gt_proposals: true,
            neg_pos_ratio: 1.0,
            min_negatives: 4,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 1-based epoch: decayed once per decay boundary
    /// already passed.
    pub fn learning_rate_for_epoch(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|&&boundary| epoch > boundary)
            .count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    pub fn validate(&self, num_stages: usize) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(BlcError::InvalidConfig("lr must be positive".into()));
        }
        if self.stage_weights.len() != num_stages {
            return Err(BlcError::InvalidConfig(format!(
                "stage_weights length {} != stage count {num_stages}",
                self.stage_weights.len()
            )));
        }
        Ok(())
    }
}

/// Smooth-ℓ1 of the elementwise difference, summed over coordinates:
/// 0.5x² for |x| < 1, |x| − 0.5 otherwise. Averaging over RoIs happens at
/// the batch level.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(BlcError::DimMismatch {
            expected: target.len(),
            got: pred.len(),
            context: "smooth_l1".into(),
        });
    }
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| smooth_l1_scalar(p - t))
        .sum())
}

pub(crate) fn smooth_l1_scalar(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub(crate) fn smooth_l1_derivative(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// −log p[label].
pub fn cross_entropy(probs: &ClassScores, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(BlcError::InvalidLabel {
            label,
            k: probs.len(),
        });
    }
    let p = probs.probs[label];
    if !p.is_finite() || p < 0.0 {
        return Err(BlcError::NonFinite("class probabilities".into()));
    }
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

/// Stage-weighted cascade loss: Σ α_t (reg_t + sem_t).
pub fn cascade_loss(stage_losses: &[(f64, f64)], alpha: &[f64]) -> Result<f64> {
    if stage_losses.len() != alpha.len() {
        return Err(BlcError::DimMismatch {
            expected: alpha.len(),
            got: stage_losses.len(),
            context: "cascade_loss stages".into(),
        });
    }
    let mut total = 0.0;
    for ((reg, sem), a) in stage_losses.iter().zip(alpha.iter()) {
        if !reg.is_finite() || !sem.is_finite() {
            return Err(BlcError::NonFinite("stage loss".into()));
        }
        total += a * (reg + sem);
    }
    Ok(total)
}

/// Unweighted sum of the RPN-phase losses.
pub fn blrpn_loss(reg_loss: f64, fbsem_loss: f64) -> Result<f64> {
    if !reg_loss.is_finite() || !fbsem_loss.is_finite() {
        return Err(BlcError::NonFinite("blrpn loss".into()));
    }
    Ok(reg_loss + fbsem_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn smooth_l1_zero() {
        assert_eq!(smooth_l1(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_quadratic_region() {
        assert_abs_diff_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_linear_region() {
        assert_abs_diff_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn smooth_l1_length_mismatch_errors() {
        assert!(smooth_l1(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_one_hot_is_zero() {
        let s = ClassScores {
            probs: array![0.0, 1.0, 0.0],
        };
        assert_abs_diff_eq!(cross_entropy(&s, 1).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_four_way() {
        let s = ClassScores {
            probs: array![0.25, 0.25, 0.25, 0.25],
        };
        for label in 0..4 {
            assert_abs_diff_eq!(
                cross_entropy(&s, label).unwrap(),
                4.0f64.ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn cross_entropy_invalid_label_errors() {
        let s = ClassScores {
            probs: array![0.5, 0.5],
        };
        assert!(matches!(
            cross_entropy(&s, 2),
            Err(BlcError::InvalidLabel { label: 2, k: 2 })
        ));
    }

    #[test]
    fn batch_mean_matches_per_sample_oracle() {
        let batch = [
            (array![0.7, 0.2, 0.1], 0usize),
            (array![0.1, 0.6, 0.3], 1),
            (array![0.2, 0.2, 0.6], 2),
            (array![0.3, 0.4, 0.3], 0),
        ];
        let mean: f64 = batch
            .iter()
            .map(|(p, l)| {
                cross_entropy(
                    &ClassScores {
                        probs: p.clone(),
                    },
                    *l,
                )
                .unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64;
        // scalar loop oracle
        let mut acc = 0.0;
        for (p, l) in &batch {
            acc += -(p[*l]).ln();
        }
        assert_abs_diff_eq!(mean, acc / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cascade_loss_unit_stage_losses() {
        let total = cascade_loss(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)], &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(total, 3.5);
    }

    #[test]
    fn cascade_loss_zero() {
        assert_eq!(
            cascade_loss(&[(0.0, 0.0); 3], &[1.0, 0.5, 0.25]).unwrap(),
            0.0
        );
    }

    #[test]
    fn doubling_alpha3_adds_stage3_contribution() {
        let losses = [(0.4, 0.6), (0.2, 0.3), (0.7, 0.1)];
        let base = cascade_loss(&losses, &[1.0, 0.5, 0.25]).unwrap();
        let boosted = cascade_loss(&losses, &[1.0, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(boosted - base, 0.25 * (0.7 + 0.1), epsilon = 1e-12);
    }

    #[test]
    fn cascade_loss_non_finite_errors() {
        assert!(cascade_loss(&[(f64::NAN, 0.0), (0.0, 0.0), (0.0, 0.0)], &[1.0, 0.5, 0.25]).is_err());
    }

    #[test]
    fn blrpn_loss_is_plain_sum() {
        assert_eq!(blrpn_loss(0.3, 0.7).unwrap(), 1.0);
        assert_eq!(blrpn_loss(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn blrpn_loss_equals_single_stage_unit_alpha_cascade() {
        let (r, s) = (0.37, 0.21);
        assert_abs_diff_eq!(
            blrpn_loss(r, s).unwrap(),
            cascade_loss(&[(r, s)], &[1.0]).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn schedule_matches_decay_rule() {
        let cfg = TrainConfig::default();
        for epoch in 1..=8 {
            assert_abs_diff_eq!(cfg.learning_rate_for_epoch(epoch), 0.01, epsilon = 1e-15);
        }
        for epoch in 9..=11 {
            assert_abs_diff_eq!(cfg.learning_rate_for_epoch(epoch), 0.001, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(cfg.learning_rate_for_epoch(12), 0.0001, epsilon = 1e-15);
    }

    #[test]
    fn default_config_carries_reference_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 0.0001);
        assert_eq!(cfg.epochs, 12);
        assert_eq!(cfg.lr_decay_epochs, vec![8, 11]);
        assert_eq!(cfg.stage_weights, vec![1.0, 0.5, 0.25]);
    }
}
