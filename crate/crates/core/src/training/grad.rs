//! Closed-form gradients for the cascade and foreground-background head
//! losses. The loss is a function of the trainable tensors with RoIs,
//! pooled features, and targets held fixed (boxes are detached between
//! stages, as is standard for cascade training), so central finite
//! differences over the same function validate every gradient here.

use ndarray::{Array1, Array2};

use crate::detector::cascade::{BlrpnModel, CascadeModel};
use crate::embeddings::VocabularyMatrix;
use crate::error::{BlcError, Result};
use crate::semantic_head::softmax;
use crate::training::{smooth_l1_derivative, smooth_l1_scalar};

/// Fixed per-stage inputs: pooled features, class labels (0 = background),
/// and regression targets for the positive RoIs.
#[derive(Debug, Clone)]
pub struct StageBatch {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub reg_targets: Vec<Option<[f64; 4]>>,
}

impl StageBatch {
    pub fn empty(n: usize) -> Self {
        Self {
            x: Array2::zeros((0, n)),
            labels: Vec::new(),
            reg_targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StageGrads {
    pub t: Array2<f64>,
    pub m: Array2<f64>,
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct FuserGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct CascadeGrads {
    pub stages: Vec<StageGrads>,
    pub fusers: Vec<FuserGrads>,
}

#[derive(Debug, Clone)]
pub struct BlrpnGrads {
    pub wfb: Array2<f64>,
    pub t: Array2<f64>,
    pub m: Array2<f64>,
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
}

/// Per-stage (regression, semantic) losses and their weighted total.
#[derive(Debug, Clone)]
pub struct CascadeLossParts {
    pub per_stage: Vec<(f64, f64)>,
    pub total: f64,
}

struct HeadBackward {
    d_t: Array2<f64>,
    d_f: Array2<f64>,
    d_w: Array2<f64>,
    d_reg_w: Array2<f64>,
    d_reg_b: Array1<f64>,
    sem_loss: f64,
    reg_loss: f64,
}

/// Forward + backward for one semantic head over a fixed batch.
///
/// The head computes `P = tanh((T·f·W)ᵀ)`, `logits = X·Pᵀ`, row softmax,
/// mean cross-entropy, plus smooth-ℓ1 on the positive RoIs' deltas. `scale`
/// multiplies the gradients (the stage weight α_t).
fn head_forward_backward(
    w: &Array2<f64>,
    f: &Array2<f64>,
    t: &Array2<f64>,
    reg_w: &Array2<f64>,
    reg_b: &Array1<f64>,
    batch: &StageBatch,
    scale: f64,
) -> Result<HeadBackward> {
    let m_rois = batch.len();
    let k = w.ncols();
    let g = t.dot(f); // N×d
    let h = g.dot(w); // N×k
    let p = h.t().mapv(f64::tanh); // k×N
    let logits = batch.x.dot(&p.t()); // m×k
    let mut probs = Array2::<f64>::zeros(logits.raw_dim());
    for (mut row, lrow) in probs.rows_mut().into_iter().zip(logits.rows()) {
        row.assign(&softmax(lrow));
    }

    let mut sem_loss = 0.0;
    for (i, &label) in batch.labels.iter().enumerate() {
        if label >= k {
            return Err(BlcError::InvalidLabel { label, k });
        }
        sem_loss -= probs[[i, label]].max(f64::MIN_POSITIVE).ln();
    }
    if m_rois > 0 {
        sem_loss /= m_rois as f64;
    }

    // regression over positive rois
    let deltas = batch.x.dot(&reg_w.t()) + reg_b; // m×4
    let n_pos = batch.reg_targets.iter().flatten().count();
    let mut reg_loss = 0.0;
    let mut d_deltas = Array2::<f64>::zeros((m_rois, 4));
    if n_pos > 0 {
        for (i, target) in batch.reg_targets.iter().enumerate() {
            if let Some(target) = target {
                for j in 0..4 {
                    let diff = deltas[[i, j]] - target[j];
                    reg_loss += smooth_l1_scalar(diff);
                    d_deltas[[i, j]] = scale * smooth_l1_derivative(diff) / n_pos as f64;
                }
            }
        }
        reg_loss /= n_pos as f64;
    }

    // semantic backward
    let (d_t, d_f, d_w) = if m_rois > 0 {
        let mut d_logits = probs;
        for (i, &label) in batch.labels.iter().enumerate() {
            d_logits[[i, label]] -= 1.0;
        }
        d_logits *= scale / m_rois as f64;
        let d_p = d_logits.t().dot(&batch.x); // k×N
        let d_c = &d_p * &p.mapv(|e| 1.0 - e * e); // tanh'
        let d_h = d_c.t().to_owned(); // N×k
        let d_g = d_h.dot(&w.t()); // N×d
        let d_t = d_g.dot(&f.t()); // N×d
        let d_f = t.t().dot(&d_g); // d×d
        let d_w = g.t().dot(&d_h); // d×k
        (d_t, d_f, d_w)
    } else {
        (
            Array2::zeros(t.raw_dim()),
            Array2::zeros(f.raw_dim()),
            Array2::zeros(w.raw_dim()),
        )
    };

    let d_reg_w = d_deltas.t().dot(&batch.x);
    let d_reg_b = d_deltas.sum_axis(ndarray::Axis(0));

    Ok(HeadBackward {
        d_t,
        d_f,
        d_w,
        d_reg_w,
        d_reg_b,
        sem_loss,
        reg_loss,
    })
}

/// L_cs over fixed per-stage batches: per-stage losses, the α-weighted
/// total, and gradients for every trainable tensor (T_t, M_t, fuser A/B,
/// regression weights). W_s and D receive no gradients.
pub fn cascade_head_loss(
    model: &CascadeModel,
    batches: &[StageBatch],
    use_flow: bool,
    alpha: &[f64],
) -> Result<(CascadeLossParts, CascadeGrads)> {
    let num_stages = model.stages.len();
    if batches.len() != num_stages || alpha.len() != num_stages {
        return Err(BlcError::InvalidConfig(
            "one batch and one stage weight per stage".into(),
        ));
    }
    let d_mat = model.vocab.matrix();
    let states = model.flow_states(use_flow)?;
    let w = model.ws.matrix();

    let mut per_stage = Vec::with_capacity(num_stages);
    let mut stage_grads: Vec<StageGrads> = Vec::with_capacity(num_stages);
    let mut d_f: Vec<Array2<f64>> = Vec::with_capacity(num_stages);
    for (t_idx, stage) in model.stages.iter().enumerate() {
        let back = head_forward_backward(
            w,
            &states[t_idx].f,
            &stage.semantic.t,
            &stage.reg_w,
            &stage.reg_b,
            &batches[t_idx],
            alpha[t_idx],
        )?;
        per_stage.push((back.reg_loss, back.sem_loss));
        stage_grads.push(StageGrads {
            t: back.d_t,
            m: Array2::zeros(stage.semantic.m.raw_dim()),
            reg_w: back.d_reg_w,
            reg_b: back.d_reg_b,
        });
        d_f.push(back.d_f);
    }

    let mut fuser_grads: Vec<FuserGrads> = model
        .fusers
        .iter()
        .map(|fu| FuserGrads {
            a: Array2::zeros(fu.a.raw_dim()),
            b: Array2::zeros(fu.b.raw_dim()),
        })
        .collect();

    if use_flow {
        // back through f_t = A·(B·f_{t-1}) + D·M_t, accumulating into the
        // previous stage's state gradient
        for t_idx in (1..num_stages).rev() {
            let fuser = &model.fusers[t_idx - 1];
            let prev_f = &states[t_idx - 1].f;
            let y = fuser.b.dot(prev_f);
            let df_t = d_f[t_idx].clone();
            fuser_grads[t_idx - 1].a = &fuser_grads[t_idx - 1].a + df_t.dot(&y.t());
            let d_y = fuser.a.t().dot(&df_t);
            fuser_grads[t_idx - 1].b = &fuser_grads[t_idx - 1].b + d_y.dot(&prev_f.t());
            let back_prev = fuser.b.t().dot(&d_y);
            d_f[t_idx - 1] = &d_f[t_idx - 1] + &back_prev;
            stage_grads[t_idx].m = d_mat.t().dot(&df_t);
        }
        stage_grads[0].m = d_mat.t().dot(&d_f[0]);
    } else {
        for (t_idx, grad) in stage_grads.iter_mut().enumerate() {
            grad.m = d_mat.t().dot(&d_f[t_idx]);
        }
    }

    let total = crate::training::cascade_loss(&per_stage, alpha)?;
    Ok((
        CascadeLossParts { per_stage, total },
        CascadeGrads {
            stages: stage_grads,
            fusers: fuser_grads,
        },
    ))
}

/// L_blrpn over a fixed anchor batch, with gradients for W_fb, T, M and the
/// regression head. D receives no gradient.
pub fn blrpn_head_loss(
    model: &BlrpnModel,
    vocab: &VocabularyMatrix,
    batch: &StageBatch,
) -> Result<((f64, f64, f64), BlrpnGrads)> {
    let d_mat = vocab.matrix();
    let f = d_mat.dot(&model.semantic.m);
    let back = head_forward_backward(
        &model.wfb.mat,
        &f,
        &model.semantic.t,
        &model.reg_w,
        &model.reg_b,
        batch,
        1.0,
    )?;
    let total = crate::training::blrpn_loss(back.reg_loss, back.sem_loss)?;
    let d_m = d_mat.t().dot(&back.d_f);
    Ok((
        (back.reg_loss, back.sem_loss, total),
        BlrpnGrads {
            wfb: back.d_w,
            t: back.d_t,
            m: d_m,
            reg_w: back.d_reg_w,
            reg_b: back.d_reg_b,
        },
    ))
}
