//! Momentum SGD with cosine decay, and a LAMB-style trust-ratio variant.
//!
//! Each parameter's gradient is multiplied by its `grad_scale` first (the
//! step-size gradient scale of learned quantizers). Weight decay applies to
//! weight tensors only.

use std::f64::consts::PI;

use crate::model::config::{OptimKind, TrainConfig};
use crate::param::{Param, ParamKind};
use crate::real::Real;
use crate::tensor::Tensor;

const LAMB_BETA2: f64 = 0.999;
const LAMB_EPS: f64 = 1e-6;
/// Learned step sizes are kept above this.
const MIN_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    step: usize,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            kind: cfg.optim,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            total_steps: total_steps.max(1),
            step: 0,
        }
    }

    /// Cosine-decayed rate for the current step.
    pub fn current_lr(&self) -> f64 {
        let p = (self.step as f64 / self.total_steps as f64).min(1.0);
        0.5 * self.lr * (1.0 + (PI * p).cos())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Update one parameter with the current rate.
    pub fn update<T: Real>(&self, p: &mut Param<T>) {
        let lr = self.current_lr();
        let decay = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
        let g: Vec<f64> = p
            .grad
            .data()
            .iter()
            .zip(p.value.data())
            .map(|(&g, &w)| (g * p.grad_scale).as_f64() + decay * w.as_f64())
            .collect();
        let shape = p.value.shape().to_vec();
        match self.kind {
            OptimKind::Sgd => {
                let m = p.moment1.get_or_insert_with(|| Tensor::zeros(&shape));
                for ((w, mi), gi) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(&g) {
                    *mi = T::c(self.momentum) * *mi + T::c(*gi);
                    *w = *w - T::c(lr) * *mi;
                }
            }
            OptimKind::Lamb => {
                let t = (self.step + 1) as i32;
                let (b1, b2) = (self.momentum, LAMB_BETA2);
                let m = p.moment1.get_or_insert_with(|| Tensor::zeros(&shape));
                let mut r = vec![0.0; g.len()];
                {
                    let v = p.moment2.get_or_insert_with(|| Tensor::zeros(&shape));
                    for (((ri, mi), vi), gi) in r.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(&g) {
                        *mi = T::c(b1 * mi.as_f64() + (1.0 - b1) * gi);
                        *vi = T::c(b2 * vi.as_f64() + (1.0 - b2) * gi * gi);
                        let mh = mi.as_f64() / (1.0 - b1.powi(t));
                        let vh = vi.as_f64() / (1.0 - b2.powi(t));
                        *ri = mh / (vh.sqrt() + LAMB_EPS);
                    }
                }
                let wn = p.value.data().iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt();
                let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let trust = if wn > 0.0 && rn > 0.0 { wn / rn } else { 1.0 };
                for (w, ri) in p.value.data_mut().iter_mut().zip(&r) {
                    *w = *w - T::c(lr * trust * ri);
                }
            }
        }
        if p.kind == ParamKind::StepSize {
            for w in p.value.data_mut() {
                *w = w.max(T::c(MIN_STEP));
            }
        }
    }

    /// Advance the schedule by one step.
    pub fn advance(&mut self) {
        self.step += 1;
    }
}
