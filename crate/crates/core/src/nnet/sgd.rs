use crate::scalar::{lit, Scalar};

use super::{NnetError, Result, SegNet};

/// SGD with momentum and L2 weight decay, PyTorch convention:
/// `v ← μ·v + g + λ·θ`, `θ ← θ - lr·v`. The learning rate decays
/// geometrically once per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch_decay: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            epoch_decay: 0.99,
            velocity: Vec::new(),
        }
    }

    /// Updates `params` in place from `grads` (same order and lengths).
    pub fn step(&mut self, params: Vec<&mut Vec<T>>, grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnetError::ShapeMismatch(format!(
                "{} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        let mu: T = lit(self.momentum);
        let wd: T = lit(self.weight_decay);
        let lr: T = lit(self.lr);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                return Err(NnetError::ShapeMismatch("parameter/gradient length".into()));
            }
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + *gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    pub fn step_net(&mut self, net: &mut SegNet<T>, grads: &[Vec<T>]) -> Result<()> {
        self.step(net.params_mut(), grads)
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.epoch_decay;
    }
}
