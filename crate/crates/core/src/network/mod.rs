//! Bidirectional hierarchical VAE: a bottom-up encoder stack feeding
//! activations into a top-down generative stack, built from a declarative
//! configuration.
//!
//! Pool layers are trainable 1x1 convolutions (leaky-rectified) followed by
//! average downsampling; unpool layers are 1x1 convolutions before
//! nearest-neighbor upsampling; every bottom-up block projects its output
//! through a 1x1 convolution before handing it to the top-down posterior
//! branch; the last convolution of each bottleneck-residual branch and the
//! z-projection are scaled by `1/sqrt(L)` at initialization.

mod blocks;
mod model;
pub mod presets;

pub use blocks::{ParamId, ParamSet};
pub use model::{plan, HeadParams, Model, ModelPlan};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::distributions::{MoLConfig, SmoothedGaussian, DEFAULT_SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{Arr, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Output likelihood of the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputHeadConfig {
    Mol {
        num_bits: u8,
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_bounded")]
        bounded: bool,
        #[serde(default = "default_scale_floor")]
        scale_floor: f64,
        #[serde(default = "default_beta")]
        beta_smoothing: f64,
    },
    Bernoulli,
}

fn default_components() -> usize {
    10
}
fn default_bounded() -> bool {
    true
}
fn default_scale_floor() -> f64 {
    DEFAULT_SCALE_FLOOR
}
fn default_beta() -> f64 {
    std::f64::consts::LN_2
}

impl OutputHeadConfig {
    /// Bit depth of the targets this head models.
    pub fn num_bits(&self) -> u8 {
        match self {
            OutputHeadConfig::Mol { num_bits, .. } => *num_bits,
            OutputHeadConfig::Bernoulli => 1,
        }
    }

    pub fn mol_config(&self, gradient_smoothing: bool) -> Option<MoLConfig> {
        match *self {
            OutputHeadConfig::Mol {
                num_bits,
                components,
                bounded,
                scale_floor,
                beta_smoothing,
            } => Some(MoLConfig {
                num_bits,
                components,
                bounded,
                scale_floor,
                beta_smoothing,
                gradient_smoothing,
            }),
            OutputHeadConfig::Bernoulli => None,
        }
    }
}

/// Architecture plus the scale-activation recipe.
///
/// `resolutions` is strictly increasing toward the input resolution and each
/// entry divides the next. Per-resolution lists of length one are broadcast
/// to every resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolutions: Vec<usize>,
    pub layers_per_resolution: Vec<usize>,
    pub widths_per_resolution: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_ratio: f64,
    #[serde(default = "default_beta")]
    pub beta_smoothing: f64,
    /// Smoothed-softplus scale activations when true; `exp` otherwise.
    #[serde(default = "default_true")]
    pub gradient_smoothing: bool,
    pub output_head: OutputHeadConfig,
    /// Consecutive top-down blocks sharing one encoder activation, per
    /// resolution. Empty means fully shared (one activation per resolution).
    #[serde(default)]
    pub sharing_per_resolution: Vec<usize>,
    #[serde(default)]
    pub include_input_resolution_latents: bool,
    /// Linear KL weight ramp 0 -> 1 over this many steps; 0 disables it.
    #[serde(default)]
    pub kl_warmup_steps: u64,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
}

fn default_bottleneck() -> f64 {
    0.25
}
fn default_true() -> bool {
    true
}
fn default_channels() -> usize {
    1
}

impl ModelConfig {
    /// Lists broadcast, consistency checked; the canonical form every other
    /// accessor assumes.
    pub fn normalized(&self) -> Result<ModelConfig> {
        let mut cfg = self.clone();
        let r = cfg.resolutions.len();
        if r == 0 {
            return Err(Error::config("at least one resolution required"));
        }
        for win in cfg.resolutions.windows(2) {
            if win[1] <= win[0] || win[1] % win[0] != 0 {
                return Err(Error::config(format!(
                    "resolutions must be strictly increasing with integer factors, got {:?}",
                    cfg.resolutions
                )));
            }
        }
        if cfg.resolutions[0] == 0 {
            return Err(Error::config("resolutions must be positive"));
        }
        let broadcast = |v: &mut Vec<usize>, what: &str| -> Result<()> {
            if v.len() == 1 && r > 1 {
                *v = vec![v[0]; r];
            }
            if v.len() != r {
                return Err(Error::config(format!(
                    "{what} has {} entries for {r} resolutions",
                    v.len()
                )));
            }
            Ok(())
        };
        broadcast(&mut cfg.widths_per_resolution, "widths_per_resolution")?;
        if cfg.layers_per_resolution.len() != r {
            return Err(Error::config(format!(
                "layers_per_resolution has {} entries for {r} resolutions",
                cfg.layers_per_resolution.len()
            )));
        }
        if cfg.sharing_per_resolution.is_empty() {
            cfg.sharing_per_resolution = cfg
                .layers_per_resolution
                .iter()
                .map(|&l| l.max(1))
                .collect();
        }
        broadcast(&mut cfg.sharing_per_resolution, "sharing_per_resolution")?;
        if cfg.sharing_per_resolution.contains(&0) {
            return Err(Error::config("sharing factors must be at least 1"));
        }
        if cfg.widths_per_resolution.contains(&0) {
            return Err(Error::config("widths must be positive"));
        }
        if cfg.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if !(cfg.bottleneck_ratio > 0.0) {
            return Err(Error::config("bottleneck_ratio must be positive"));
        }
        if !(cfg.beta_smoothing > 0.0) {
            return Err(Error::config("beta_smoothing must be positive"));
        }
        if !cfg.include_input_resolution_latents && *cfg.layers_per_resolution.last().unwrap() > 0 {
            return Err(Error::config(
                "input-resolution latent layers configured but \
                 include_input_resolution_latents is false",
            ));
        }
        if cfg.total_layers() == 0 {
            return Err(Error::config("total stochastic depth must be at least 1"));
        }
        match (&cfg.output_head, cfg.input_channels) {
            (OutputHeadConfig::Bernoulli, 1) => {}
            (OutputHeadConfig::Bernoulli, c) => {
                return Err(Error::config(format!(
                    "bernoulli head needs 1-channel data, got {c}"
                )))
            }
            (OutputHeadConfig::Mol { .. }, 1 | 3) => {
                cfg.output_head
                    .mol_config(cfg.gradient_smoothing)
                    .unwrap()
                    .validate()?;
            }
            (OutputHeadConfig::Mol { .. }, c) => {
                return Err(Error::config(format!(
                    "mixture-of-logistics head supports 1 or 3 channels, got {c}"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn input_resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    pub fn total_layers(&self) -> usize {
        self.layers_per_resolution.iter().sum()
    }

    /// Scale activation for every Gaussian in the hierarchy.
    pub fn scale_activation(&self) -> crate::distributions::ScaleActivation {
        if self.gradient_smoothing {
            crate::distributions::ScaleActivation::SmoothedSoftplus {
                beta: self.beta_smoothing,
            }
        } else {
            crate::distributions::ScaleActivation::Exp
        }
    }

    /// Image dimensionality `H * W * C`, the per-dim normalizer.
    pub fn image_dims(&self) -> usize {
        self.input_resolution() * self.input_resolution() * self.input_channels
    }
}

/// Per-layer latent samples with their posterior and prior, ordered
/// top-down (lowest resolution first).
pub struct LatentHierarchy {
    pub entries: Vec<LayerLatents>,
}

pub struct LayerLatents {
    pub z: Tensor,
    pub posterior: SmoothedGaussian,
    pub prior: SmoothedGaussian,
    pub resolution: usize,
    pub resolution_index: usize,
    /// Kept-dimension mask applied during a pruned pass, `[d, r, r]`.
    pub mask: Option<Arr>,
    /// Node id of the encoder activation this layer consumed.
    pub chi_node: Option<usize>,
}

impl LatentHierarchy {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Encoder activations per resolution index, in execution order.
pub struct BottomUpActivations {
    pub per_resolution: Vec<Vec<Tensor>>,
}

/// Keep/drop flags for every latent dimension, one `[d, r, r]` array of
/// zeros and ones per layer in top-down order.
#[derive(Clone)]
pub struct LatentMask {
    pub per_layer: Vec<Arr>,
}

impl LatentMask {
    pub fn all_kept(config: &ModelConfig) -> Result<LatentMask> {
        Self::filled(config, 1.0)
    }

    pub fn none_kept(config: &ModelConfig) -> Result<LatentMask> {
        Self::filled(config, 0.0)
    }

    fn filled(config: &ModelConfig, v: f64) -> Result<LatentMask> {
        let cfg = config.normalized()?;
        let mut per_layer = Vec::new();
        for (ri, &l) in cfg.layers_per_resolution.iter().enumerate() {
            let r = cfg.resolutions[ri];
            for _ in 0..l {
                per_layer.push(Arr::from_elem(IxDyn(&[cfg.latent_dim, r, r]), v));
            }
        }
        Ok(LatentMask { per_layer })
    }

    pub fn total_dims(&self) -> usize {
        self.per_layer.iter().map(|m| m.len()).sum()
    }

    pub fn kept_dims(&self) -> usize {
        self.per_layer
            .iter()
            .map(|m| m.iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

/// Sampling temperature for generation: one value, or one per resolution.
#[derive(Debug, Clone)]
pub enum TemperatureSpec {
    Uniform(f64),
    PerResolution(Vec<f64>),
}

impl TemperatureSpec {
    pub fn validate(&self, resolutions: usize) -> Result<()> {
        let all = match self {
            TemperatureSpec::Uniform(t) => std::slice::from_ref(t),
            TemperatureSpec::PerResolution(ts) => {
                if ts.len() != resolutions {
                    return Err(Error::config(format!(
                        "{} temperatures for {resolutions} resolutions",
                        ts.len()
                    )));
                }
                ts.as_slice()
            }
        };
        if all.iter().any(|&t| t < 0.0) {
            return Err(Error::config("temperatures must be nonnegative"));
        }
        Ok(())
    }

    pub fn at(&self, resolution_index: usize) -> f64 {
        match self {
            TemperatureSpec::Uniform(t) => *t,
            TemperatureSpec::PerResolution(ts) => ts[resolution_index],
        }
    }
}
