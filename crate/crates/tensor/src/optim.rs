//! Adam / AdamW with global gradient-norm clipping, plus a gradient
//! accumulation helper.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32, store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn adam(lr: f32, store: &ParamStore<f32>) -> Self {
        Self::new(OptimizerKind::Adam, lr, 0.0, store)
    }

    pub fn adamw(lr: f32, weight_decay: f32, store: &ParamStore<f32>) -> Self {
        Self::new(OptimizerKind::AdamW, lr, weight_decay, store)
    }

    /// Clips the global gradient norm to `clip_norm` (if given), applies one
    /// bias-corrected update and zeroes the gradients.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        clip_norm: Option<f32>,
    ) -> Result<StepStats> {
        if self.first_moment.len() != store.len() {
            return Err(TensorError::Contract(
                "optimizer state does not match parameter store".into(),
            ));
        }
        for (_, p) in store.iter() {
            let bad = p.grad.iter().filter(|g| !g.is_finite()).count();
            if bad > 0 {
                return Err(TensorError::NonFiniteGradient {
                    name: p.name.clone(),
                    count: bad,
                });
            }
        }
        let grad_norm = store.grad_norm();
        let mut clipped = false;
        if let Some(max) = clip_norm {
            if grad_norm > max as f64 {
                store.scale_grads((max as f64 / grad_norm) as f32);
                clipped = true;
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let lr = self.lr as f64;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps as f64, self.weight_decay);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let mut g = p.grad[j];
                if self.kind == OptimizerKind::Adam && wd != 0.0 {
                    g += wd * values[j];
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let mut update = lr * mhat / (vhat.sqrt() + eps);
                if self.kind == OptimizerKind::AdamW {
                    update += lr * wd as f64 * values[j] as f64;
                }
                values[j] = (values[j] as f64 - update) as f32;
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(StepStats { grad_norm, clipped })
    }
}

/// Steps the optimizer once every `n_micro` backward passes, averaging the
/// accumulated gradients so the update matches one `n_micro`-times larger
/// batch (each micro loss being a mean over its own micro-batch).
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    n_micro: usize,
    pending: usize,
}

impl GradAccumulator {
    pub fn new(n_micro: usize) -> Result<Self> {
        if n_micro == 0 {
            return Err(TensorError::Contract("n_micro must be >= 1".into()));
        }
        Ok(Self {
            n_micro,
            pending: 0,
        })
    }

    pub fn n_micro(&self) -> usize {
        self.n_micro
    }

    /// Call after each micro-batch backward. Returns the step statistics
    /// when this call completed a cycle.
    pub fn micro_step(
        &mut self,
        opt: &mut Optimizer,
        store: &mut ParamStore<f32>,
        clip_norm: Option<f32>,
    ) -> Result<Option<StepStats>> {
        self.pending += 1;
        if self.pending < self.n_micro {
            return Ok(None);
        }
        self.pending = 0;
        if self.n_micro > 1 {
            store.scale_grads(1.0 / self.n_micro as f32);
        }
        opt.step(store, clip_norm).map(Some)
    }
}
