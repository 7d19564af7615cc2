//! Hierarchical ELBO computation and metric decomposition.
//!
//! Every term is normalized per image dimension (`H * W * C` of the input),
//! including KL terms at lower latent resolutions, so per-dimension KL
//! statistics are comparable across the hierarchy.

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::distributions::gaussian_kl;
use crate::error::{Error, Result};
use crate::network::{HeadParams, LatentHierarchy, ModelConfig};
use crate::tensor::{Arr, Tensor};

/// Per-step loss decomposition and training telemetry. All `*_nats_per_dim`
/// fields are natural-log units per pixel dimension; `bits_per_dim` is the
/// base-2 conversion of the negative ELBO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub negative_elbo_nats_per_dim: f64,
    pub reconstruction_nats_per_dim: f64,
    pub kl_per_resolution_nats_per_dim: Vec<f64>,
    pub total_kl_nats_per_dim: f64,
    pub bits_per_dim: f64,
    pub gradient_norm: f64,
    pub skipped: bool,
    pub ssim: Option<f64>,
}

/// Scalar loss tensors from one forward pass, all in nats per dimension.
pub struct ElboBreakdown {
    /// Objective actually differentiated: reconstruction plus the
    /// (possibly warm-up-weighted) KL sum.
    pub loss: Tensor,
    /// Unweighted negative ELBO.
    pub nelbo: Tensor,
    pub reconstruction: Tensor,
    pub kl_per_resolution: Vec<Tensor>,
}

impl ElboBreakdown {
    pub fn reconstruction_value(&self) -> f64 {
        self.reconstruction.scalar_value()
    }

    pub fn kl_values(&self) -> Vec<f64> {
        self.kl_per_resolution
            .iter()
            .map(Tensor::scalar_value)
            .collect()
    }

    /// Assemble the metrics record; the decomposition identity
    /// `nelbo = recon + sum(kl)` holds exactly by construction.
    pub fn record(
        &self,
        step: u64,
        gradient_norm: f64,
        skipped: bool,
        ssim: Option<f64>,
    ) -> MetricsRecord {
        let reconstruction = self.reconstruction_value();
        let kls = self.kl_values();
        let total_kl: f64 = kls.iter().sum();
        let nelbo = reconstruction + total_kl;
        MetricsRecord {
            step,
            negative_elbo_nats_per_dim: nelbo,
            reconstruction_nats_per_dim: reconstruction,
            kl_per_resolution_nats_per_dim: kls,
            total_kl_nats_per_dim: total_kl,
            bits_per_dim: nelbo / std::f64::consts::LN_2,
            gradient_norm,
            skipped,
            ssim,
        }
    }
}

/// Linear KL warm-up multiplier: ramps 0 -> 1 over `warmup_steps`, 1 when
/// disabled (`warmup_steps == 0`).
pub fn kl_warmup_weight(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Negative hierarchical ELBO of one batch: reconstruction term from the
/// output head, plus one single-sample KL term per layer (layers past the
/// first are conditioned on the sampled `z` above them by construction of
/// the hierarchy). `kl_weight` scales only the differentiated loss.
pub fn hierarchical_elbo(
    config: &ModelConfig,
    hierarchy: &LatentHierarchy,
    head: &HeadParams,
    targets: &Arr,
    target_bits: u8,
    kl_weight: f64,
) -> Result<ElboBreakdown> {
    let head_bits = config.output_head.num_bits();
    if head_bits != target_bits {
        return Err(Error::config(format!(
            "unit mismatch: {target_bits}-bit targets fed to a {head_bits}-bit output head"
        )));
    }
    let batch = targets.shape()[0];
    let norm = 1.0 / (batch * config.image_dims()) as f64;

    let log_prob = head.log_prob(targets)?;
    let reconstruction = log_prob.sum_all().mul_scalar(-norm);
    debug_assert!(reconstruction.scalar_value() >= 0.0);

    let tape = reconstruction.tape().clone();
    let nres = config.resolutions.len();
    let mut kl_per_resolution: Vec<Tensor> = (0..nres).map(|_| tape.scalar(0.0)).collect();
    for entry in &hierarchy.entries {
        let kl = gaussian_kl(&entry.posterior, &entry.prior)?;
        let kl = match &entry.mask {
            Some(m) => {
                let shape: Vec<usize> = std::iter::once(1)
                    .chain(m.shape().iter().copied())
                    .collect();
                let keep = tape.constant(m.clone().into_shape(IxDyn(&shape)).unwrap());
                kl.mul(&keep)
            }
            None => kl,
        };
        let contribution = kl.sum_all().mul_scalar(norm);
        kl_per_resolution[entry.resolution_index] =
            kl_per_resolution[entry.resolution_index].add(&contribution);
    }

    let mut nelbo = reconstruction.clone();
    let mut loss = reconstruction.clone();
    for kl in &kl_per_resolution {
        nelbo = nelbo.add(kl);
        loss = loss.add(&kl.mul_scalar(kl_weight));
    }
    Ok(ElboBreakdown {
        loss,
        nelbo,
        reconstruction,
        kl_per_resolution,
    })
}

/// KL overfitting gap: validation total KL minus training total KL in
/// nats/dim. Positive values flag an aggregate-posterior mismatch.
pub fn kl_gap(train: &MetricsRecord, valid: &MetricsRecord) -> f64 {
    valid.total_kl_nats_per_dim - train.total_kl_nats_per_dim
}

/// Structural similarity with a Gaussian window (11x11, sigma 1.5, shrunk
/// to the largest odd size that fits small images), averaged over windows,
/// channels and batch. `data_range` is the dynamic range of the inputs.
pub fn ssim(a: &Arr, b: &Arr, data_range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim operands {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.ndim() != 4 {
        return Err(Error::shape("ssim expects [N, C, H, W]".to_string()));
    }
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    let sigma = 1.5f64;
    let half = (win / 2) as isize;
    let mut kernel = Vec::with_capacity(win * win);
    for i in -half..=half {
        for j in -half..=half {
            kernel.push((-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..=(h - win) {
                for ow in 0..=(w - win) {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let mut idx = 0;
                    for i in 0..win {
                        for j in 0..win {
                            let k = kernel[idx];
                            ma += k * a[[ni, ci, oh + i, ow + j]];
                            mb += k * b[[ni, ci, oh + i, ow + j]];
                            idx += 1;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    idx = 0;
                    for i in 0..win {
                        for j in 0..win {
                            let k = kernel[idx];
                            let da = a[[ni, ci, oh + i, ow + j]] - ma;
                            let db = b[[ni, ci, oh + i, ow + j]] - mb;
                            va += k * da * da;
                            vb += k * db * db;
                            cov += k * da * db;
                            idx += 1;
                        }
                    }
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
