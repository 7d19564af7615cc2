//! Discretized mixture of logistics over integer pixel grids.
//!
//! Targets on `2^num_bits` levels are rescaled to `[-1, 1]`; each level owns
//! a bin of width `2 / (2^num_bits - 1)` with half-bin edges, the lowest and
//! highest bins absorbing the tails. Bin probabilities are logistic-CDF
//! differences, floored at `PROB_FLOOR` before the log.

use ndarray::{ArrayViewD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};

/// Smallest bin probability fed to the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default log-scale floor on the `[-1, 1]` axis for bounded heads.
pub const DEFAULT_SCALE_FLOOR: f64 = -7.0;

/// Static configuration of a mixture-of-logistics output layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoLConfig {
    /// Discretization depth; 5 or 8.
    pub num_bits: u8,
    /// Number of mixture components per pixel.
    pub components: usize,
    /// Whether the effective log-scale is floored at `scale_floor`.
    pub bounded: bool,
    pub scale_floor: f64,
    /// Smoothing multiplier for the inverse-scale softplus.
    pub beta_smoothing: f64,
    /// Smoothed softplus inverse scale when true; `scale = exp(raw)`
    /// (the conventional parameterization) when false.
    pub gradient_smoothing: bool,
}

impl MoLConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.num_bits, 5 | 8) {
            return Err(Error::config(format!(
                "mixture-of-logistics head supports 5 or 8 bits, got {}",
                self.num_bits
            )));
        }
        if self.components == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if !(self.beta_smoothing > 0.0) {
            return Err(Error::config(format!(
                "scale smoothing multiplier must be positive, got {}",
                self.beta_smoothing
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        1usize << self.num_bits
    }

    pub fn max_level(&self) -> f64 {
        (self.levels() - 1) as f64
    }

    /// Head channels needed for `channels`-channel images.
    pub fn head_channels(&self, channels: usize) -> usize {
        let k = self.components;
        match channels {
            1 => 3 * k,
            3 => 10 * k,
            _ => unreachable!("mol head supports 1 or 3 channels"),
        }
    }
}

/// Per-pixel mixture parameters. `means` and `raw_log_scales` are
/// `[N, K, C, H, W]`; `mixture_logits` is `[N, K, H, W]`; the RGB
/// autoregressive coefficients are already tanh-squashed.
pub struct MoLParams {
    pub mixture_logits: Tensor,
    pub means: Tensor,
    pub raw_log_scales: Tensor,
    pub channel_coeffs: Option<Tensor>,
    pub config: MoLConfig,
}

impl MoLParams {
    pub fn new(
        mixture_logits: Tensor,
        means: Tensor,
        raw_log_scales: Tensor,
        raw_coeffs: Option<Tensor>,
        config: MoLConfig,
    ) -> Result<Self> {
        config.validate()?;
        let ms = means.shape();
        if ms.len() != 5 {
            return Err(Error::shape(format!("mol means must be 5-d, got {ms:?}")));
        }
        let (n, k, c, h, w) = (ms[0], ms[1], ms[2], ms[3], ms[4]);
        if k != config.components {
            return Err(Error::shape(format!(
                "means have {k} components, config says {}",
                config.components
            )));
        }
        if !matches!(c, 1 | 3) {
            return Err(Error::config(format!(
                "mixture-of-logistics supports 1 or 3 channels, got {c}"
            )));
        }
        if raw_log_scales.shape() != ms {
            return Err(Error::shape("mol raw scales must match means".to_string()));
        }
        if mixture_logits.shape() != [n, k, h, w] {
            return Err(Error::shape(format!(
                "mixture logits must be [N, K, H, W], got {:?}",
                mixture_logits.shape()
            )));
        }
        let channel_coeffs = match (c, raw_coeffs) {
            (3, Some(raw)) => {
                if raw.shape() != [n, k, 3, h, w] {
                    return Err(Error::shape(format!(
                        "channel coeffs must be [N, K, 3, H, W], got {:?}",
                        raw.shape()
                    )));
                }
                Some(raw.tanh())
            }
            (3, None) => {
                return Err(Error::config(
                    "3-channel mixture-of-logistics needs channel coefficients",
                ))
            }
            (1, None) => None,
            (1, Some(_)) => {
                return Err(Error::config(
                    "1-channel mixture-of-logistics takes no channel coefficients",
                ))
            }
            _ => unreachable!(),
        };
        Ok(MoLParams {
            mixture_logits,
            means,
            raw_log_scales,
            channel_coeffs,
            config,
        })
    }

    /// Split a `[N, head_channels, H, W]` network output into parameters.
    /// Channel layout: `K` mixture logits, then `K*C` means, `K*C` raw
    /// scales and (RGB only) `K*3` raw coefficients, component-major.
    pub fn from_head(head: &Tensor, channels: usize, config: MoLConfig) -> Result<Self> {
        config.validate()?;
        if !matches!(channels, 1 | 3) {
            return Err(Error::config(format!(
                "mixture-of-logistics supports 1 or 3 channels, got {channels}"
            )));
        }
        let hs = head.shape();
        if hs.len() != 4 {
            return Err(Error::shape(format!(
                "head must be [N, CH, H, W], got {hs:?}"
            )));
        }
        let want = config.head_channels(channels);
        if hs[1] != want {
            return Err(Error::shape(format!(
                "head has {} channels, config needs {want}",
                hs[1]
            )));
        }
        let (n, h, w) = (hs[0], hs[2], hs[3]);
        let k = config.components;
        let kc = k * channels;
        let grouped = |t: Tensor| t.reshape(&[n, k, channels, h, w]);
        let logits = head.slice_axis(1, 0, k);
        let means = grouped(head.slice_axis(1, k, kc));
        let scales = grouped(head.slice_axis(1, k + kc, kc));
        let raw_coeffs = if channels == 3 {
            Some(
                head.slice_axis(1, k + 2 * kc, 3 * k)
                    .reshape(&[n, k, 3, h, w]),
            )
        } else {
            None
        };
        MoLParams::new(logits, means, scales, raw_coeffs, config)
    }

    pub fn batch_shape(&self) -> (usize, usize, usize, usize) {
        let ms = self.means.shape();
        (ms[0], ms[2], ms[3], ms[4])
    }

    /// Logistic inverse scale `1/s`. The scale itself is
    /// `Softplus(raw, beta)` in smoothed mode, mirroring the Gaussian std
    /// treatment so gradients of `1/s` carry the `beta < 1` multiplier, and
    /// `exp(raw)` otherwise. A bounded head floors the scale at
    /// `exp(scale_floor)`, capping sharpness.
    pub fn inv_scales(&self) -> Tensor {
        let floor = self.config.scale_floor.exp();
        if self.config.gradient_smoothing {
            let s = self
                .raw_log_scales
                .softplus_beta(self.config.beta_smoothing);
            let s = if self.config.bounded {
                s.clamp_min(floor)
            } else {
                s
            };
            s.recip()
        } else {
            let raw = if self.config.bounded {
                self.raw_log_scales.clamp_min(self.config.scale_floor)
            } else {
                self.raw_log_scales.clone()
            };
            raw.neg().exp()
        }
    }

    /// Mixture weights after normalization, `[N, K, H, W]`.
    pub fn log_weights(&self) -> Tensor {
        self.mixture_logits
            .sub(&self.mixture_logits.logsumexp_keepdim(1))
    }

    /// Means after the autoregressive cross-channel shift, given rescaled
    /// targets `[N, 1, C, H, W]` on the tape.
    fn shifted_means(&self, rescaled: &Tensor) -> Tensor {
        match &self.channel_coeffs {
            None => self.means.clone(),
            Some(coeffs) => {
                let x0 = rescaled.slice_axis(2, 0, 1);
                let x1 = rescaled.slice_axis(2, 1, 1);
                let m0 = self.means.slice_axis(2, 0, 1);
                let m1 = self
                    .means
                    .slice_axis(2, 1, 1)
                    .add(&coeffs.slice_axis(2, 0, 1).mul(&x0));
                let m2 = self
                    .means
                    .slice_axis(2, 2, 1)
                    .add(&coeffs.slice_axis(2, 1, 1).mul(&x0))
                    .add(&coeffs.slice_axis(2, 2, 1).mul(&x1));
                Tensor::concat(&[&m0, &m1, &m2], 2)
            }
        }
    }
}

fn validate_targets(targets: &ArrayViewD<'_, f64>, max_level: f64) -> Result<()> {
    for &v in targets.iter() {
        if !v.is_finite() || v.fract() != 0.0 || !(0.0..=max_level).contains(&v) {
            return Err(Error::data(format!(
                "target value {v} outside integer range [0, {max_level}]"
            )));
        }
    }
    Ok(())
}

/// Per-pixel log-likelihood (nats) of integer `targets` `[N, C, H, W]`
/// under the mixture; returns `[N, H, W]` covering all channels jointly.
pub fn mol_log_prob(params: &MoLParams, targets: &Arr) -> Result<Tensor> {
    let (n, c, h, w) = params.batch_shape();
    if targets.shape() != [n, c, h, w] {
        return Err(Error::shape(format!(
            "targets {:?} vs head batch [{n}, {c}, {h}, {w}]",
            targets.shape()
        )));
    }
    let max_level = params.config.max_level();
    validate_targets(&targets.view(), max_level)?;
    let tape = params.means.tape();
    let half_bin = 1.0 / max_level;

    let mut rescaled = targets.mapv(|v| 2.0 * v / max_level - 1.0);
    rescaled = rescaled.into_shape(IxDyn(&[n, 1, c, h, w])).unwrap();
    let low_mask = tape.constant(
        targets
            .mapv(|v| f64::from(v == 0.0))
            .into_shape(IxDyn(&[n, 1, c, h, w]))
            .unwrap(),
    );
    let high_mask = tape.constant(
        targets
            .mapv(|v| f64::from(v == max_level))
            .into_shape(IxDyn(&[n, 1, c, h, w]))
            .unwrap(),
    );
    let rescaled = tape.constant(rescaled);

    let means = params.shifted_means(&rescaled);
    let inv_s = params.inv_scales();
    let centered = rescaled.sub(&means);
    let cdf_plus = centered.add_scalar(half_bin).mul(&inv_s).sigmoid();
    let cdf_min = centered.add_scalar(-half_bin).mul(&inv_s).sigmoid();

    // interior bins use the CDF difference; the edge bins take the tails
    let interior = cdf_plus.sub(&cdf_min);
    let mid_mask = low_mask.add(&high_mask).neg().add_scalar(1.0);
    let prob = low_mask
        .mul(&cdf_plus)
        .add(&high_mask.mul(&cdf_min.neg().add_scalar(1.0)))
        .add(&mid_mask.mul(&interior));

    let log_bin = prob.clamp_min(PROB_FLOOR).ln();
    let per_component = log_bin.sum_axis(2).add(&params.log_weights());
    Ok(per_component.logsumexp_keepdim(1).reshape(&[n, h, w]))
}

/// Ancestral sample from the mixture: Gumbel-argmax component choice,
/// inverse-CDF logistic noise, channel-by-channel autoregressive shift,
/// clamp to `[-1, 1]`, then discretize to the nearest level. Returns
/// integer levels as `f64`, `[N, C, H, W]`.
pub fn mol_sample<R: Rng>(params: &MoLParams, rng: &mut R) -> Result<Arr> {
    decode(params, Some(rng))
}

/// Deterministic decode: highest-weight component, zero noise. Used for
/// mean/argmax reconstructions.
pub fn mol_mean_decode(params: &MoLParams) -> Result<Arr> {
    decode::<rand::rngs::ThreadRng>(params, None)
}

fn decode<R: Rng>(params: &MoLParams, mut rng: Option<&mut R>) -> Result<Arr> {
    let (n, c, h, w) = params.batch_shape();
    let k = params.config.components;
    let max_level = params.config.max_level();
    let logits = params.mixture_logits.value();
    let means = params.means.value();
    let inv_s = params.inv_scales().value();
    let coeffs = params.channel_coeffs.as_ref().map(|t| t.value());

    let mut out = Arr::zeros(IxDyn(&[n, c, h, w]));
    let mut cont = vec![0.0f64; c];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for ki in 0..k {
                    let mut score = logits[[ni, ki, hi, wi]];
                    if let Some(r) = rng.as_deref_mut() {
                        let u: f64 = r.gen::<f64>().max(1e-300);
                        score += -(-u.ln()).ln();
                    }
                    if score > best_score {
                        best_score = score;
                        best = ki;
                    }
                }
                for ci in 0..c {
                    let mut m = means[[ni, best, ci, hi, wi]];
                    if let Some(cf) = &coeffs {
                        for (prev, &x_prev) in cont.iter().enumerate().take(ci) {
                            // coefficient order: (1,0), (2,0), (2,1)
                            let idx = if ci == 1 { 0 } else { 1 + prev };
                            m += cf[[ni, best, idx, hi, wi]] * x_prev;
                        }
                    }
                    let noise = match rng.as_deref_mut() {
                        Some(r) => {
                            let u = 1e-5 + (1.0 - 2e-5) * r.gen::<f64>();
                            (u.ln() - (1.0 - u).ln()) / inv_s[[ni, best, ci, hi, wi]]
                        }
                        None => 0.0,
                    };
                    let x = (m + noise).clamp(-1.0, 1.0);
                    cont[ci] = x;
                    out[[ni, ci, hi, wi]] =
                        ((x + 1.0) * max_level / 2.0).round().clamp(0.0, max_level);
                }
            }
        }
    }
    Ok(out)
}
