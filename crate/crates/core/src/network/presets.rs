//! Published layer-distribution presets plus the desk-scale toy model used
//! throughout the test suite.

use super::{ModelConfig, OutputHeadConfig};

const LN_2: f64 = std::f64::consts::LN_2;

fn mol_head(num_bits: u8) -> OutputHeadConfig {
    OutputHeadConfig::Mol {
        num_bits,
        components: 10,
        bounded: true,
        scale_floor: -7.0,
        beta_smoothing: LN_2,
    }
}

fn preset(
    resolutions: Vec<usize>,
    widths: Vec<usize>,
    layers: Vec<usize>,
    num_bits: u8,
) -> ModelConfig {
    ModelConfig {
        resolutions,
        layers_per_resolution: layers,
        widths_per_resolution: widths,
        latent_dim: 16,
        bottleneck_ratio: 0.25,
        beta_smoothing: LN_2,
        gradient_smoothing: true,
        output_head: mol_head(num_bits),
        sharing_per_resolution: vec![],
        include_input_resolution_latents: true,
        kl_warmup_steps: 0,
        input_channels: 3,
    }
}

/// CIFAR-10 C1: incremental widths, 47 stochastic layers.
pub fn cifar10_c1() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32],
        vec![384, 384, 192, 96, 48],
        vec![3, 4, 7, 11, 22],
        8,
    )
}

/// CIFAR-10 C2: constant width 384, 47 stochastic layers.
pub fn cifar10_c2() -> ModelConfig {
    preset(vec![1, 4, 8, 16, 32], vec![384], vec![3, 4, 7, 11, 22], 8)
}

/// ImageNet 32x32 C1: incremental widths, 73 stochastic layers.
pub fn imagenet32_c1() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32],
        vec![512, 512, 256, 128, 64],
        vec![6, 7, 19, 25, 16],
        8,
    )
}

/// ImageNet 32x32 C2: constant width 512.
pub fn imagenet32_c2() -> ModelConfig {
    preset(vec![1, 4, 8, 16, 32], vec![512], vec![6, 7, 19, 25, 16], 8)
}

/// ImageNet 64x64 C1: incremental widths, 84 stochastic layers.
pub fn imagenet64_c1() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32, 64],
        vec![512, 512, 256, 256, 64, 64],
        vec![6, 7, 19, 25, 16, 11],
        8,
    )
}

/// ImageNet 64x64 C2: constant width 512.
pub fn imagenet64_c2() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32, 64],
        vec![512],
        vec![6, 7, 19, 25, 16, 11],
        8,
    )
}

/// FFHQ 256x256 C1 (5-bit): incremental widths, 66 stochastic layers.
pub fn ffhq256_c1() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32, 64, 128, 256],
        vec![512, 512, 512, 256, 256, 128, 128, 128],
        vec![2, 4, 5, 10, 22, 14, 8, 1],
        5,
    )
}

/// FFHQ 256x256 C2 (5-bit): constant width 512.
pub fn ffhq256_c2() -> ModelConfig {
    preset(
        vec![1, 4, 8, 16, 32, 64, 128, 256],
        vec![512],
        vec![2, 4, 5, 10, 22, 14, 8, 1],
        5,
    )
}

/// All published presets with their expected per-resolution layer counts.
pub fn all_presets() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("cifar10_c1", cifar10_c1()),
        ("cifar10_c2", cifar10_c2()),
        ("imagenet32_c1", imagenet32_c1()),
        ("imagenet32_c2", imagenet32_c2()),
        ("imagenet64_c1", imagenet64_c1()),
        ("imagenet64_c2", imagenet64_c2()),
        ("ffhq256_c1", ffhq256_c1()),
        ("ffhq256_c2", ffhq256_c2()),
    ]
}

/// Desk-scale model for the 8x8 synthetic blob dataset: four latent
/// resolutions, 340 latent dimensions, trains in minutes on one CPU core.
pub fn toy_blobs() -> ModelConfig {
    ModelConfig {
        resolutions: vec![1, 2, 4, 8],
        layers_per_resolution: vec![1, 1, 1, 1],
        widths_per_resolution: vec![16],
        latent_dim: 4,
        bottleneck_ratio: 0.5,
        beta_smoothing: LN_2,
        gradient_smoothing: true,
        output_head: OutputHeadConfig::Mol {
            num_bits: 8,
            components: 4,
            bounded: true,
            scale_floor: -7.0,
            beta_smoothing: LN_2,
        },
        sharing_per_resolution: vec![],
        include_input_resolution_latents: true,
        kl_warmup_steps: 0,
        input_channels: 1,
    }
}
