//! Inter-stage semantic information flow.
//!
//! Each cascade stage carries a d×d semantic state `f` standing in for the
//! local product D·M. Stage 1 starts from `f_1 = D·M_1`; later stages fuse
//! the previous state through two linear maps and add the local semantics:
//! `f_t = A·(B·f_{t-1}) + D·M_t`. Scoring substitutes `f` for D·M in the
//! composed projection.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{BlcError, Result};
use crate::semantic_head::{compose_projection_with_state, semantic_scores, ClassScores};

/// The d×d semantic state carried between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub f: Array2<f64>,
    pub stage_index: usize,
}

/// The two trainable linear maps modulating the previous stage's state.
/// Applied as `A·(B·f)` with no intermediate activation and no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowFuser {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl FlowFuser {
    /// Identity fuser: passes the previous state through unchanged, so a
    /// freshly initialized cascade accumulates stage semantics additively.
    pub fn identity(d: usize) -> Self {
        Self::scaled_identity(d, 1.0)
    }

    /// Scaled-identity init: `A = B = scale·I`, so the previous state
    /// enters attenuated by `scale²` and the accumulated state norm stays
    /// bounded across stages.
    pub fn scaled_identity(d: usize, scale: f64) -> Self {
        let mut a = Array2::eye(d);
        a *= scale;
        Self { a: a.clone(), b: a }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// `f_1 = D·M_1`.
pub fn init_flow(d: ArrayView2<'_, f64>, m1: ArrayView2<'_, f64>) -> Result<FlowState> {
    if d.ncols() != m1.nrows() {
        return Err(BlcError::shapes("D", d.shape(), "M1", m1.shape()));
    }
    Ok(FlowState {
        f: d.dot(&m1),
        stage_index: 1,
    })
}

/// `f_t = A·(B·f_{t-1}) + D·M_t`, advancing the stage index.
pub fn fuse(
    prev: &FlowState,
    d: ArrayView2<'_, f64>,
    mt: ArrayView2<'_, f64>,
    fuser: &FlowFuser,
) -> Result<FlowState> {
    if d.ncols() != mt.nrows() {
        return Err(BlcError::shapes("D", d.shape(), "Mt", mt.shape()));
    }
    if fuser.b.ncols() != prev.f.nrows() {
        return Err(BlcError::shapes("B", fuser.b.shape(), "f", prev.f.shape()));
    }
    if fuser.a.ncols() != fuser.b.nrows() {
        return Err(BlcError::shapes("A", fuser.a.shape(), "B", fuser.b.shape()));
    }
    let modulated = fuser.a.dot(&fuser.b.dot(&prev.f));
    Ok(FlowState {
        f: modulated + d.dot(&mt),
        stage_index: prev.stage_index + 1,
    })
}

/// Stage scores with the flow state substituted for the local semantics:
/// `softmax(tanh(Wᵀ fᵀ Tᵀ) · x)`.
pub fn stage_scores_with_flow(
    ws: ArrayView2<'_, f64>,
    flow: &FlowState,
    t: ArrayView2<'_, f64>,
    x: ArrayView1<'_, f64>,
) -> Result<ClassScores> {
    let p = compose_projection_with_state(ws, flow.f.view(), t)?;
    semantic_scores(p.view(), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic_head::compose_projection;
    use crate::util::{rng, uniform_matrix};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn identity_product_init() {
        let eye: Array2<f64> = Array2::eye(4);
        let f = init_flow(eye.view(), eye.view()).unwrap();
        assert_eq!(f.f, eye);
        assert_eq!(f.stage_index, 1);
    }

    #[test]
    fn init_shape_is_d_by_d() {
        let mut r = rng(2);
        let d = uniform_matrix(&mut r, 4, 6, 1.0);
        let m1 = uniform_matrix(&mut r, 6, 4, 1.0);
        let f = init_flow(d.view(), m1.view()).unwrap();
        assert_eq!(f.f.shape(), &[4, 4]);
    }

    #[test]
    fn init_matches_explicit_product() {
        let mut r = rng(3);
        let d = uniform_matrix(&mut r, 4, 6, 1.0);
        let m1 = uniform_matrix(&mut r, 6, 4, 1.0);
        let f = init_flow(d.view(), m1.view()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += d[[i, k]] * m1[[k, j]];
                }
                assert_abs_diff_eq!(f.f[[i, j]], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_a_reduces_to_local_semantics() {
        let mut r = rng(5);
        let d = uniform_matrix(&mut r, 4, 6, 1.0);
        let m1 = uniform_matrix(&mut r, 6, 4, 1.0);
        let mt = uniform_matrix(&mut r, 6, 4, 1.0);
        let prev = init_flow(d.view(), m1.view()).unwrap();
        let fuser = FlowFuser {
            a: Array2::zeros((4, 4)),
            b: uniform_matrix(&mut r, 4, 4, 1.0),
        };
        let f = fuse(&prev, d.view(), mt.view(), &fuser).unwrap();
        assert_eq!(f.stage_index, 2);
        let local = d.dot(&mt);
        for (a, b) in f.f.iter().zip(local.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_input_with_identity_fuser() {
        let mut r = rng(6);
        let d = uniform_matrix(&mut r, 4, 6, 1.0);
        let mt = uniform_matrix(&mut r, 6, 4, 1.0);
        let prev = FlowState {
            f: Array2::zeros((4, 4)),
            stage_index: 1,
        };
        let f = fuse(&prev, d.view(), mt.view(), &FlowFuser::identity(4)).unwrap();
        assert_eq!(f.f, d.dot(&mt));
    }

    #[test]
    fn fuse_matches_straight_line_oracle() {
        let mut r = rng(9);
        let d = uniform_matrix(&mut r, 4, 6, 1.0);
        let m1 = uniform_matrix(&mut r, 6, 4, 1.0);
        let mt = uniform_matrix(&mut r, 6, 4, 1.0);
        let fuser = FlowFuser {
            a: uniform_matrix(&mut r, 4, 4, 1.0),
            b: uniform_matrix(&mut r, 4, 4, 1.0),
        };
        let prev = init_flow(d.view(), m1.view()).unwrap();
        let f = fuse(&prev, d.view(), mt.view(), &fuser).unwrap();
        let oracle = fuser.a.dot(&fuser.b).dot(&prev.f) + d.dot(&mt);
        for (a, b) in f.f.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn disabled_fusers_reproduce_no_flow_scores() {
        // with f literally set to D·M_t, scoring equals the no-flow head
        let mut r = rng(13);
        let (n, dd, v, k) = (8, 4, 6, 4);
        let w = uniform_matrix(&mut r, dd, k, 1.0);
        let m = uniform_matrix(&mut r, v, dd, 1.0);
        let d = uniform_matrix(&mut r, dd, v, 1.0);
        let t = uniform_matrix(&mut r, n, dd, 1.0);
        let x = uniform_matrix(&mut r, 1, n, 2.0).row(0).to_owned();

        let flow = init_flow(d.view(), m.view()).unwrap();
        let with_flow = stage_scores_with_flow(w.view(), &flow, t.view(), x.view()).unwrap();

        let p = compose_projection(w.view(), m.view(), d.view(), t.view()).unwrap();
        let without = semantic_scores(p.view(), x.view()).unwrap();
        for i in 0..k {
            assert_abs_diff_eq!(with_flow.probs[i], without.probs[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn flow_scores_sum_to_one() {
        let mut r = rng(17);
        let (n, dd, v, k) = (8, 4, 6, 4);
        let w = uniform_matrix(&mut r, dd, k, 1.0);
        let m = uniform_matrix(&mut r, v, dd, 1.0);
        let d = uniform_matrix(&mut r, dd, v, 1.0);
        let t = uniform_matrix(&mut r, n, dd, 1.0);
        let x = uniform_matrix(&mut r, 1, n, 2.0).row(0).to_owned();
        let flow = init_flow(d.view(), m.view()).unwrap();
        let s = stage_scores_with_flow(w.view(), &flow, t.view(), x.view()).unwrap();
        assert_abs_diff_eq!(s.probs.sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn eq5_matches_straight_line_oracle() {
        let mut r = rng(21);
        let (n, dd, v, k) = (8, 4, 6, 4);
        let w = uniform_matrix(&mut r, dd, k, 1.0);
        let m1 = uniform_matrix(&mut r, v, dd, 1.0);
        let m2 = uniform_matrix(&mut r, v, dd, 1.0);
        let d = uniform_matrix(&mut r, dd, v, 1.0);
        let t2 = uniform_matrix(&mut r, n, dd, 1.0);
        let fuser = FlowFuser {
            a: uniform_matrix(&mut r, dd, dd, 1.0),
            b: uniform_matrix(&mut r, dd, dd, 1.0),
        };
        let x = uniform_matrix(&mut r, 1, n, 2.0).row(0).to_owned();

        let f1 = init_flow(d.view(), m1.view()).unwrap();
        let f2 = fuse(&f1, d.view(), m2.view(), &fuser).unwrap();
        let s = stage_scores_with_flow(w.view(), &f2, t2.view(), x.view()).unwrap();

        // single-expression oracle
        let f_mat = fuser.a.dot(&fuser.b).dot(&d.dot(&m1)) + d.dot(&m2);
        let logits = t2.dot(&f_mat).dot(&w).t().mapv(f64::tanh).dot(&x);
        let oracle = crate::semantic_head::softmax(logits.view());
        for i in 0..k {
            assert_abs_diff_eq!(s.probs[i], oracle[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn three_stages_apply_exactly_two_fusers() {
        let mut r = rng(25);
        let (dd, v) = (4, 6);
        let d = uniform_matrix(&mut r, dd, v, 1.0);
        let ms: Vec<_> = (0..3).map(|_| uniform_matrix(&mut r, v, dd, 1.0)).collect();
        let fusers: Vec<_> = (0..2)
            .map(|_| FlowFuser {
                a: uniform_matrix(&mut r, dd, dd, 1.0),
                b: uniform_matrix(&mut r, dd, dd, 1.0),
            })
            .collect();
        let mut state = init_flow(d.view(), ms[0].view()).unwrap();
        let mut applied = 0;
        for t in 1..3 {
            state = fuse(&state, d.view(), ms[t].view(), &fusers[t - 1]).unwrap();
            applied += 1;
        }
        assert_eq!(applied, 2);
        assert_eq!(state.stage_index, 3);
    }
}
