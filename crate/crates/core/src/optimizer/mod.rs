//! Adamax updates with a gradient-norm skip guard and cosine learning-rate
//! decay. A plain-Adam variant exists as the stability-harness baseline.
//!
//! Adamax tracks the exponentially-decayed infinity norm `u` instead of
//! Adam's squared second moment, so the per-coordinate step is bounded by
//! `lr / (1 - beta1^t)` no matter how large the gradients get.

pub mod stability;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSet;
use crate::tensor::Arr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adamax,
    Adam,
}

/// First moment plus infinity-norm (Adamax) or second-moment (Adam) state
/// for every parameter, in parameter order.
pub struct OptimizerState {
    algorithm: Algorithm,
    t: u64,
    m: Vec<Arr>,
    u: Vec<Arr>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl OptimizerState {
    pub fn new(
        algorithm: Algorithm,
        params: &ParamSet,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config(format!(
                "momentum decays must lie in [0, 1), got beta1={beta1} beta2={beta2}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        let zeros: Vec<Arr> = params
            .values()
            .iter()
            .map(|v| Arr::zeros(IxDyn(v.shape())))
            .collect();
        Ok(OptimizerState {
            algorithm,
            t: 0,
            m: zeros.clone(),
            u: zeros,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    /// Applied-update count; increments by exactly 1 per applied step.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    /// One applied update. `grads` is aligned with the parameter order;
    /// a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Arr>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if grads.len() != params.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, value) in params.values_mut().iter_mut().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Arr::zeros(IxDyn(value.shape()));
                    &zero
                }
            };
            let m = &mut self.m[i];
            let u = &mut self.u[i];
            match self.algorithm {
                Algorithm::Adamax => {
                    for ((mv, uv), (&gv, pv)) in m
                        .iter_mut()
                        .zip(u.iter_mut())
                        .zip(g.iter().zip(value.iter_mut()))
                    {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *uv = (self.beta2 * *uv).max(gv.abs());
                        *pv -= lr * *mv / (bias1 * (*uv + self.epsilon));
                    }
                }
                Algorithm::Adam => {
                    for ((mv, uv), (&gv, pv)) in m
                        .iter_mut()
                        .zip(u.iter_mut())
                        .zip(g.iter().zip(value.iter_mut()))
                    {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *uv = self.beta2 * *uv + (1.0 - self.beta2) * gv * gv;
                        let mhat = *mv / bias1;
                        let vhat = *uv / bias2;
                        *pv -= lr * mhat / (vhat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Arr], &[Arr]) {
        (&self.m, &self.u)
    }

    /// Restore serialized state (checkpoint resume).
    pub fn restore(&mut self, t: u64, m: Vec<Arr>, u: Vec<Arr>) -> Result<()> {
        if m.len() != self.m.len() || u.len() != self.u.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state holds {} tensors, checkpoint has {}",
                self.m.len(),
                m.len()
            )));
        }
        self.t = t;
        self.m = m;
        self.u = u;
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to `floor_lr` at `total_steps`,
/// constant afterwards.
pub fn cosine_lr(step: u64, base_lr: f64, total_steps: u64, floor_lr: f64) -> f64 {
    assert!(total_steps > 0, "total_steps must be positive");
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Outcome of a guarded update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// Discards updates whose global gradient norm (loss in nats/dim) exceeds
/// the threshold; a skipped update leaves every piece of training state
/// bit-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipGuard {
    pub threshold: f64,
    pub skipped_count: u64,
}

impl SkipGuard {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0) {
            return Err(Error::config(format!(
                "skip threshold must be positive, got {threshold}"
            )));
        }
        Ok(SkipGuard {
            threshold,
            skipped_count: 0,
        })
    }

    /// Run `apply` only if `grad_norm` is finite and within the threshold.
    /// Non-finite norms (NaN gradients) are rejected and counted as skips.
    pub fn guarded_apply<T>(
        &mut self,
        grad_norm: f64,
        apply: impl FnOnce() -> T,
    ) -> (StepOutcome, Option<T>) {
        if !grad_norm.is_finite() || grad_norm > self.threshold {
            self.skipped_count += 1;
            (StepOutcome::Skipped, None)
        } else {
            (StepOutcome::Applied, Some(apply()))
        }
    }
}
