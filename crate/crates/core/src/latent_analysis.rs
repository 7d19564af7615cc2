//! Polarized-regime analysis: per-dimension average KL statistics over a
//! dataset, threshold/top-fraction pruning masks, and encoded-dataset size
//! accounting for pruned posteriors.

use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, Dataset, STREAM_EVAL};
use crate::distributions::gaussian_kl;
use crate::error::{Error, Result};
use crate::network::{LatentMask, Model};
use crate::training::{evaluate_masked, EvalOptions};

/// Bytes per stored latent value in encoded-size accounting
/// (single-precision storage).
pub const BYTES_PER_LATENT_VALUE: u64 = 4;

/// Per-dimension mean KL over a dataset, indexed `(layer, channel, y, x)`,
/// in nats normalized per image dimension.
#[derive(Clone)]
pub struct LatentKLStats {
    pub per_layer: Vec<crate::tensor::Arr>,
    pub dataset_size: usize,
}

impl LatentKLStats {
    pub fn total_dims(&self) -> usize {
        self.per_layer.iter().map(|a| a.len()).sum()
    }

    /// Flattened values in fixed (layer, then row-major) dimension order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dims());
        for layer in &self.per_layer {
            out.extend(layer.iter().copied());
        }
        out
    }

    /// One CSV row per latent dimension.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "layer,channel,y,x,mean_kl_nats_per_dim")?;
        for (li, layer) in self.per_layer.iter().enumerate() {
            let shape = layer.shape().to_vec();
            for ((c, y, x), v) in layer
                .indexed_iter()
                .map(|(ix, v)| ((ix[0], ix[1], ix[2]), v))
            {
                debug_assert_eq!(shape.len(), 3);
                writeln!(f, "{li},{c},{y},{x},{v}")?;
            }
        }
        Ok(())
    }
}

/// Streaming (Kahan-compensated) mean of per-dimension KL over `indices`.
/// Layers beyond the first are conditioned on sampled `z` above them, one
/// posterior sample per image.
pub fn accumulate_kl_stats(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<LatentKLStats> {
    if indices.is_empty() {
        return Err(Error::data(
            "cannot accumulate KL stats over an empty dataset".to_string(),
        ));
    }
    let cfg = model.config();
    let dims = cfg.image_dims() as f64;
    let mut sums: Vec<crate::tensor::Arr> = Vec::new();
    let mut comps: Vec<crate::tensor::Arr> = Vec::new();
    for (chunk_counter, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let x = dataset.batch(chunk);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            seed,
            chunk_counter as u64,
            u64::from(STREAM_EVAL) + 1000,
        ));
        let ctx = model.pass(false);
        let (hierarchy, _) = model.infer(&ctx, &x, &mut rng)?;
        if sums.is_empty() {
            for e in &hierarchy.entries {
                let shape: Vec<usize> = e.posterior.shape()[1..].to_vec();
                sums.push(crate::tensor::Arr::zeros(IxDyn(&shape)));
                comps.push(crate::tensor::Arr::zeros(IxDyn(&shape)));
            }
        }
        for (li, e) in hierarchy.entries.iter().enumerate() {
            let kl = gaussian_kl(&e.posterior, &e.prior)?.value();
            // sum over the batch axis, then compensated accumulate
            let batch_sum = kl.sum_axis(ndarray::Axis(0));
            let sum = &mut sums[li];
            let comp = &mut comps[li];
            for ((s, c), &v) in sum.iter_mut().zip(comp.iter_mut()).zip(batch_sum.iter()) {
                let y = v / dims - *c;
                let t = *s + y;
                *c = (t - *s) - y;
                *s = t;
            }
        }
    }
    let n = indices.len() as f64;
    for s in &mut sums {
        s.mapv_inplace(|v| v / n);
    }
    Ok(LatentKLStats {
        per_layer: sums,
        dataset_size: indices.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSelector {
    /// Keep dimensions whose mean KL is at least this value.
    Threshold(f64),
    /// Keep the top fraction of dimensions by mean KL, ties broken by
    /// dimension index order.
    KeptFraction(f64),
}

/// Build a keep mask from per-dimension statistics; deterministic for
/// identical stats.
pub fn make_mask(stats: &LatentKLStats, selector: MaskSelector) -> Result<LatentMask> {
    let flat = stats.flat();
    let total = flat.len();
    let keep_flags: Vec<bool> = match selector {
        MaskSelector::Threshold(t) => flat.iter().map(|&v| v >= t).collect(),
        MaskSelector::KeptFraction(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::config(format!(
                    "kept_fraction must lie in [0, 1], got {q}"
                )));
            }
            let kept = ((q * total as f64).round() as usize).min(total);
            let mut order: Vec<usize> = (0..total).collect();
            order.sort_by(|&a, &b| {
                flat[b]
                    .partial_cmp(&flat[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut flags = vec![false; total];
            for &i in &order[..kept] {
                flags[i] = true;
            }
            flags
        }
    };
    let mut per_layer = Vec::with_capacity(stats.per_layer.len());
    let mut offset = 0;
    for layer in &stats.per_layer {
        let n = layer.len();
        let vals: Vec<f64> = keep_flags[offset..offset + n]
            .iter()
            .map(|&b| f64::from(b))
            .collect();
        per_layer.push(crate::tensor::Arr::from_shape_vec(IxDyn(layer.shape()), vals).unwrap());
        offset += n;
    }
    Ok(LatentMask { per_layer })
}

/// Pruned-evaluation summary; costs in bits/dim on the evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningReport {
    pub kept_fraction: f64,
    pub kept_dims: usize,
    pub total_dims: usize,
    pub encoded_size_bytes: u64,
    pub negative_elbo_bits_per_dim: f64,
    pub reconstruction_bits_per_dim: f64,
    pub kl_bits_per_dim: f64,
}

/// Evaluate ELBO terms with prior substitution on masked-off dimensions.
/// `encoded_count` is the number of images the encoded-size figure refers
/// to (normally the whole dataset).
pub fn evaluate_pruned(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    mask: &LatentMask,
    encoded_count: usize,
    opts: &EvalOptions,
) -> Result<PruningReport> {
    let record = evaluate_masked(model, dataset, indices, Some(mask), opts)?;
    let kept = mask.kept_dims();
    let total = mask.total_dims();
    Ok(PruningReport {
        kept_fraction: kept as f64 / total as f64,
        kept_dims: kept,
        total_dims: total,
        encoded_size_bytes: kept as u64 * encoded_count as u64 * BYTES_PER_LATENT_VALUE,
        negative_elbo_bits_per_dim: record.bits_per_dim,
        reconstruction_bits_per_dim: record.reconstruction_nats_per_dim / std::f64::consts::LN_2,
        kl_bits_per_dim: record.total_kl_nats_per_dim / std::f64::consts::LN_2,
    })
}

/// Sweep kept fractions highest-first, one report per fraction.
pub fn prune_sweep(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    stats: &LatentKLStats,
    fractions: &[f64],
    encoded_count: usize,
    opts: &EvalOptions,
) -> Result<Vec<PruningReport>> {
    let mut out = Vec::with_capacity(fractions.len());
    for &q in fractions {
        let mask = make_mask(stats, MaskSelector::KeptFraction(q))?;
        out.push(evaluate_pruned(
            model,
            dataset,
            indices,
            &mask,
            encoded_count,
            opts,
        )?);
    }
    Ok(out)
}

pub fn write_reports_csv(path: &Path, reports: &[PruningReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "kept_fraction,kept_dims,total_dims,encoded_size_bytes,nelbo_bits_per_dim,recon_bits_per_dim,kl_bits_per_dim"
    )?;
    for r in reports {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.kept_fraction,
            r.kept_dims,
            r.total_dims,
            r.encoded_size_bytes,
            r.negative_elbo_bits_per_dim,
            r.reconstruction_bits_per_dim,
            r.kl_bits_per_dim
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BinarizeMode, DatasetSpec, SourceSpec, SyntheticKind};
    use crate::network::{presets, Model, TemperatureSpec};
    use crate::tensor::Arr;

    fn toy_setup() -> (Model, Dataset) {
        let cfg = presets::toy_blobs();
        let model = Model::build(&cfg, 21).unwrap();
        let data = Dataset::load(&DatasetSpec {
            source: SourceSpec::Synthetic {
                generator: SyntheticKind::GaussianBlobs,
                count: 12,
                seed: 3,
            },
            resolution: 8,
            channels: 1,
            num_bits: 8,
            train_fraction: 0.9,
            shuffle_seed: 0,
            binarize: BinarizeMode::Threshold,
        })
        .unwrap();
        (model, data)
    }

    #[test]
    fn single_sample_stats_match_direct_kl() {
        let (model, data) = toy_setup();
        let stats = accumulate_kl_stats(&model, &data, &[2], 4, 9).unwrap();
        // recompute with the same stream directly
        let x = data.batch(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(9, 0, u64::from(STREAM_EVAL) + 1000));
        let ctx = model.pass(false);
        let (h, _) = model.infer(&ctx, &x, &mut rng).unwrap();
        let dims = model.config().image_dims() as f64;
        for (li, e) in h.entries.iter().enumerate() {
            let kl = gaussian_kl(&e.posterior, &e.prior).unwrap().value();
            let direct = kl.sum_axis(ndarray::Axis(0)).mapv(|v| v / dims);
            let got = &stats.per_layer[li];
            for (a, b) in got.iter().zip(direct.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_distribution_branches_give_zero_stats() {
        let (mut model, data) = toy_setup();
        let zero: Vec<usize> = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, (n, _))| n.contains(".post.") || n.contains(".prior."))
            .map(|(i, _)| i)
            .collect();
        for i in zero {
            model.params_mut().values_mut()[i].fill(0.0);
        }
        let stats = accumulate_kl_stats(&model, &data, &[0, 1, 2], 2, 1).unwrap();
        for layer in &stats.per_layer {
            assert!(layer.iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn streaming_matches_full_materialization() {
        let (model, data) = toy_setup();
        let indices: Vec<usize> = (0..12).collect();
        let streaming = accumulate_kl_stats(&model, &data, &indices, 4, 5).unwrap();
        // full materialization with identical per-chunk noise streams
        let dims = model.config().image_dims() as f64;
        let mut all: Vec<Vec<Arr>> = Vec::new();
        for (ci, chunk) in indices.chunks(4).enumerate() {
            let x = data.batch(chunk);
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(5, ci as u64, u64::from(STREAM_EVAL) + 1000));
            let ctx = model.pass(false);
            let (h, _) = model.infer(&ctx, &x, &mut rng).unwrap();
            let kls: Vec<Arr> = h
                .entries
                .iter()
                .map(|e| gaussian_kl(&e.posterior, &e.prior).unwrap().value())
                .collect();
            all.push(kls);
        }
        for li in 0..streaming.per_layer.len() {
            let mut acc = Arr::zeros(IxDyn(streaming.per_layer[li].shape()));
            for kls in &all {
                acc += &kls[li].sum_axis(ndarray::Axis(0));
            }
            acc.mapv_inplace(|v| v / dims / indices.len() as f64);
            for (a, b) in streaming.per_layer[li].iter().zip(acc.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (model, data) = toy_setup();
        assert!(accumulate_kl_stats(&model, &data, &[], 4, 0).is_err());
    }

    #[test]
    fn mask_selection_rules() {
        let (model, data) = toy_setup();
        let stats = accumulate_kl_stats(&model, &data, &[0, 1], 2, 2).unwrap();
        let total = stats.total_dims();
        assert_eq!(total, 340);

        let all = make_mask(&stats, MaskSelector::Threshold(0.0)).unwrap();
        assert_eq!(all.kept_dims(), total);

        let none = make_mask(&stats, MaskSelector::KeptFraction(0.0)).unwrap();
        assert_eq!(none.kept_dims(), 0);

        for q in [0.025, 0.03, 0.04, 0.05, 0.07, 1.0] {
            let m = make_mask(&stats, MaskSelector::KeptFraction(q)).unwrap();
            assert_eq!(m.kept_dims(), (q * total as f64).round() as usize);
            let ratio = m.kept_dims() as f64 / total as f64;
            assert!((ratio - q).abs() <= 0.5 / total as f64 + 1e-12);
        }
        assert!(make_mask(&stats, MaskSelector::KeptFraction(1.5)).is_err());
        assert!(make_mask(&stats, MaskSelector::KeptFraction(-0.1)).is_err());

        // determinism
        let a = make_mask(&stats, MaskSelector::KeptFraction(0.05)).unwrap();
        let b = make_mask(&stats, MaskSelector::KeptFraction(0.05)).unwrap();
        for (x, y) in a.per_layer.iter().zip(b.per_layer.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn fully_kept_evaluation_equals_unpruned() {
        let (model, data) = toy_setup();
        let stats = accumulate_kl_stats(&model, &data, &[0, 1, 2, 3], 2, 2).unwrap();
        let full = make_mask(&stats, MaskSelector::KeptFraction(1.0)).unwrap();
        let opts = EvalOptions {
            num_posterior_samples: 2,
            max_images: None,
            compute_ssim: false,
            seed: 77,
            batch_size: 3,
        };
        let pruned = evaluate_pruned(&model, &data, &[4, 5, 6], &full, data.count, &opts).unwrap();
        let plain = crate::training::evaluate_indices(&model, &data, &[4, 5, 6], &opts).unwrap();
        assert_eq!(pruned.negative_elbo_bits_per_dim, plain.bits_per_dim);
        assert_eq!(pruned.kept_fraction, 1.0);
        assert_eq!(
            pruned.encoded_size_bytes,
            340 * data.count as u64 * BYTES_PER_LATENT_VALUE
        );
    }

    #[test]
    fn all_dropped_at_zero_temperature_matches_prior_decoding() {
        let (model, data) = toy_setup();
        let mask = LatentMask::none_kept(model.config()).unwrap();
        let x = data.batch(&[0, 1]);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let recon = model.reconstruct(&x, Some(&mask), 0.0, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let gen = model
            .generate(2, &TemperatureSpec::Uniform(0.0), &mut r2)
            .unwrap();
        assert_eq!(recon, gen);
    }
}
