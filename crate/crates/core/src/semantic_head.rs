//! The semantic branch: projects pooled visual features through the fixed
//! word-vector stack and trainable adapters into per-class scores.
//!
//! The composed map is `P = tanh(Wᵀ Mᵀ Dᵀ Tᵀ)` of shape k×N, and scores are
//! `softmax(P · x)`. Equivalently, per feature: `u = Tᵀx` (semantic feature,
//! d), `a = Dᵀu` (vocabulary attention, v), `m = Mᵀa` (attended embedding,
//! d), `logits = Wᵀm` (k) — except that the tanh is applied to the composed
//! matrix, not to the transformed feature. The foreground-background branch
//! is the same stack with the two-column W_fb in place of W.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::embeddings::ForegroundBackgroundMatrix;
use crate::error::{BlcError, Result};

/// Probability tolerance for [`ClassScores`] invariants.
pub const PROB_TOL: f64 = 1e-6;

/// Trainable per-stage adapters. The fixed matrices (W and D) live with the
/// model and are passed to the ops explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBranchParams {
    /// Feature-to-semantic adapter, N×d.
    pub t: Array2<f64>,
    /// Vocabulary attention, v×d.
    pub m: Array2<f64>,
}

impl SemanticBranchParams {
    pub fn new(t: Array2<f64>, m: Array2<f64>) -> Self {
        Self { t, m }
    }

    pub fn feature_dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.t.ncols()
    }
}

/// A softmax distribution over k classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub probs: Array1<f64>,
}

impl ClassScores {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn check_chain(
    left: &str,
    l: ArrayView2<'_, f64>,
    right: &str,
    r: ArrayView2<'_, f64>,
) -> Result<()> {
    if l.ncols() != r.nrows() {
        return Err(BlcError::shapes(left, l.shape(), right, r.shape()));
    }
    Ok(())
}

/// Composes `tanh(Wᵀ Mᵀ Dᵀ Tᵀ)`, the k×N map from feature space to class
/// logits. Computed as `tanh((T·D·M·W)ᵀ)`.
pub fn compose_projection(
    w: ArrayView2<'_, f64>,
    m: ArrayView2<'_, f64>,
    d: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_chain("T", t, "D", d)?;
    check_chain("D", d, "M", m)?;
    check_chain("M", m, "W", w)?;
    let chain = t.dot(&d).dot(&m).dot(&w);
    Ok(chain.t().mapv(f64::tanh))
}

/// Composes `tanh(Wᵀ fᵀ Tᵀ)` where the d×d semantic state `f` stands in for
/// D·M. With `f = D·M` this equals [`compose_projection`].
pub fn compose_projection_with_state(
    w: ArrayView2<'_, f64>,
    f: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_chain("T", t, "f", f)?;
    check_chain("f", f, "W", w)?;
    let chain = t.dot(&f).dot(&w);
    Ok(chain.t().mapv(f64::tanh))
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// `softmax(P · x)`: class scores for one pooled feature.
pub fn semantic_scores(p: ArrayView2<'_, f64>, x: ArrayView1<'_, f64>) -> Result<ClassScores> {
    if p.ncols() != x.len() {
        return Err(BlcError::shapes("P", p.shape(), "x", &[x.len()]));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(BlcError::NonFinite("feature vector".into()));
    }
    let logits = p.dot(&x);
    Ok(ClassScores {
        probs: softmax(logits.view()),
    })
}

/// Two-way background/foreground scores from the W_fb stack.
pub fn fb_scores(
    wfb: &ForegroundBackgroundMatrix,
    params: &SemanticBranchParams,
    d: ArrayView2<'_, f64>,
    x: ArrayView1<'_, f64>,
) -> Result<ClassScores> {
    let p = compose_projection(wfb.mat.view(), params.m.view(), d, params.t.view())?;
    semantic_scores(p.view(), x)
}

/// Row-wise scores for a batch of pooled features X (m×N): returns m×k probs.
pub fn semantic_scores_batch(
    p: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if p.ncols() != x.ncols() {
        return Err(BlcError::shapes("P", p.shape(), "X", x.shape()));
    }
    let logits = x.dot(&p.t());
    let mut probs = Array2::<f64>::zeros(logits.raw_dim());
    for (mut row, lrow) in probs.rows_mut().into_iter().zip(logits.rows()) {
        row.assign(&softmax(lrow));
    }
    Ok(probs)
}
