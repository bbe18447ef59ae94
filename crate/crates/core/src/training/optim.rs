//! SGD with momentum and weight decay, tracking one velocity buffer per
//! named parameter tensor. Only tensors explicitly stepped ever change, so
//! the fixed word-vector layers stay bit-identical by construction.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocities: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocities: BTreeMap::new(),
        }
    }

    /// v ← μ·v + (g + wd·θ); θ ← θ − lr·v
    ///
    /// Parameters and gradients stream in logical element order, so array
    /// memory layout never matters; `len` sizes the velocity buffer.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        name: &str,
        len: usize,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = f64>,
    ) {
        let vel = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(vel.len(), len);
        for ((i, p), g) in params.enumerate().zip(grads) {
            let g = g + self.weight_decay * *p;
            vel[i] = self.momentum * vel[i] + g;
            *p -= lr * vel[i];
        }
    }

    /// Slice convenience wrapper around [`Self::step`].
    pub fn step_tensor(&mut self, lr: f64, name: &str, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        let len = param.len();
        self.step(lr, name, len, param.iter_mut(), grad.iter().cloned());
    }
}

/// Global ℓ2 norm over a gradient element stream (for optional clipping).
pub fn global_norm(grads: impl Iterator<Item = f64>) -> f64 {
    grads.map(|v| v * v).sum::<f64>().sqrt()
}
