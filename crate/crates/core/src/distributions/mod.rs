//! Probability primitives: diagonal Gaussians with smoothed scale
//! activations, their closed-form KL, discretized mixture-of-logistics and
//! Bernoulli likelihoods, and temperature sampling.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently across tapes.

mod bernoulli;
mod mol;

pub use bernoulli::{bernoulli_log_prob, bernoulli_sample, BernoulliParams};
pub use mol::{
    mol_log_prob, mol_mean_decode, mol_sample, MoLConfig, MoLParams, DEFAULT_SCALE_FLOOR,
    PROB_FLOOR,
};

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};

/// `(1/beta) * ln(1 + exp(beta * y))` elementwise. The derivative,
/// `sigmoid(beta * y)`, lies strictly inside (0, 1), which is what keeps
/// scale gradients bounded when this parameterizes a standard deviation.
pub fn smoothed_softplus(y: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(Error::config(format!(
            "smoothing multiplier must be positive, got {beta}"
        )));
    }
    Ok(y.softplus_beta(beta))
}

/// How a raw scale activation is turned into a positive standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleActivation {
    /// `sigma = Softplus(y, beta)`; the gradient of `sigma` in the raw
    /// activation is bounded by 1.
    SmoothedSoftplus { beta: f64 },
    /// `sigma = exp(y)`, the conventional parameterization the smoothing
    /// replaces. Kept for the stability-harness comparison arm.
    Exp,
}

/// Diagonal Gaussian whose standard deviation comes from a smoothed-softplus
/// (or, for comparison runs, exponential) activation of a raw tensor.
pub struct SmoothedGaussian {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl SmoothedGaussian {
    pub fn from_raw(
        raw_mean: &Tensor,
        raw_scale: &Tensor,
        activation: ScaleActivation,
    ) -> Result<Self> {
        if raw_mean.shape() != raw_scale.shape() {
            return Err(Error::shape(format!(
                "raw mean {:?} vs raw scale {:?}",
                raw_mean.shape(),
                raw_scale.shape()
            )));
        }
        let sigma = match activation {
            ScaleActivation::SmoothedSoftplus { beta } => smoothed_softplus(raw_scale, beta)?,
            ScaleActivation::Exp => raw_scale.exp(),
        };
        Ok(SmoothedGaussian {
            mu: raw_mean.clone(),
            sigma,
        })
    }

    /// Standard normal of the given shape, as constants on `tape`.
    pub fn standard(tape: &crate::tensor::Tape, shape: &[usize]) -> Self {
        SmoothedGaussian {
            mu: tape.constant(Arr::zeros(IxDyn(shape))),
            sigma: tape.constant(Arr::ones(IxDyn(shape))),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.mu.shape()
    }
}

/// Closed-form per-dimension `KL(q || p)` for diagonal Gaussians:
/// `ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2`.
pub fn gaussian_kl(q: &SmoothedGaussian, p: &SmoothedGaussian) -> Result<Tensor> {
    if q.shape() != p.shape() {
        return Err(Error::shape(format!(
            "kl operands {:?} vs {:?}",
            q.shape(),
            p.shape()
        )));
    }
    let log_ratio = p.sigma.ln().sub(&q.sigma.ln());
    let var_q = q.sigma.mul(&q.sigma);
    let dmu = q.mu.sub(&p.mu);
    let num = var_q.add(&dmu.mul(&dmu));
    let denom = p.sigma.mul(&p.sigma).mul_scalar(2.0);
    Ok(log_ratio.add(&num.div(&denom)).add_scalar(-0.5))
}

/// Reparameterized draw `mu + temperature * sigma * eps`. Gradients flow to
/// `mu` and `sigma`; the noise is a constant on the tape.
pub fn gaussian_sample<R: Rng>(
    dist: &SmoothedGaussian,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if temperature < 0.0 {
        return Err(Error::config(format!(
            "sampling temperature must be nonnegative, got {temperature}"
        )));
    }
    let shape = dist.shape();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = dist
        .mu
        .tape()
        .constant(Arr::from_shape_vec(IxDyn(&shape), noise).unwrap());
    Ok(dist.mu.add(&dist.sigma.mul(&eps).mul_scalar(temperature)))
}
