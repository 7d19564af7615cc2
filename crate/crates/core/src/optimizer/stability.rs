//! Paired-run stability harness: identically seeded runs differing only in
//! the scale-activation smoothing (and optionally batch size), compared by
//! final NLL and skipped-update counts. Diverged arms are recorded, not
//! fatal.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::training::{
    self, evaluate_indices, load_split, model_from_checkpoint, EvalOptions, RunConfig, RunStatus,
};

/// One harness arm: `(batch size, smoothing) x seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub batch_size: usize,
    pub smoothing: bool,
    pub seed: u64,
    /// Final validation NLL; NaN when the arm diverged.
    pub nll_bits_per_dim: f64,
    pub skipped_updates: u64,
    pub diverged: bool,
}

/// Derive the arm config: everything identical except the smoothing flag,
/// batch size, step budget and seed.
pub fn arm_config(
    base: &RunConfig,
    steps: u64,
    batch_size: usize,
    smoothing: bool,
    seed: u64,
) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.gradient_smoothing = smoothing;
    cfg.optimizer.batch_size = batch_size;
    cfg.optimizer.total_steps = steps;
    cfg.seed = seed;
    cfg
}

/// Run every `(batch, seed) x {smoothing off, on}` pair and collect one row
/// per run. Artifacts land under `out_dir/arm_b<batch>_s<seed>_<on|off>`.
pub fn stability_experiment(
    base: &RunConfig,
    steps: u64,
    batch_sizes: &[usize],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<StabilityRow>> {
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        for &seed in seeds {
            for smoothing in [false, true] {
                let cfg = arm_config(base, steps, batch, smoothing, seed);
                let arm_dir = out_dir.join(format!(
                    "arm_b{batch}_s{seed}_{}",
                    if smoothing { "on" } else { "off" }
                ));
                let outcome = training::train(&cfg, &arm_dir, None, None)?;
                let diverged = matches!(outcome.status, RunStatus::Diverged { .. });
                let nll = if diverged {
                    f64::NAN
                } else {
                    let data = load_split(&cfg)?;
                    let ckpt = crate::checkpoint::load(&outcome.final_checkpoint)?;
                    let model = model_from_checkpoint(&ckpt)?;
                    let eval_set = if data.split.valid.is_empty() {
                        &data.split.train
                    } else {
                        &data.split.valid
                    };
                    let opts = EvalOptions {
                        num_posterior_samples: 1,
                        max_images: Some(64),
                        compute_ssim: false,
                        seed: cfg.seed,
                        batch_size: batch,
                    };
                    evaluate_indices(&model, &data.dataset, eval_set, &opts)?.bits_per_dim
                };
                rows.push(StabilityRow {
                    batch_size: batch,
                    smoothing,
                    seed,
                    nll_bits_per_dim: nll,
                    skipped_updates: outcome.skipped_count,
                    diverged,
                });
            }
        }
    }
    Ok(rows)
}

/// CSV with the comparison-table schema:
/// `batch_size,smoothing,seed,nll_bits_per_dim,skipped_updates,diverged`.
pub fn write_rows_csv(path: &Path, rows: &[StabilityRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "batch_size,smoothing,seed,nll_bits_per_dim,skipped_updates,diverged"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.batch_size,
            u8::from(r.smoothing),
            r.seed,
            if r.diverged {
                "diverged".to_string()
            } else {
                r.nll_bits_per_dim.to_string()
            },
            r.skipped_updates,
            u8::from(r.diverged)
        )?;
    }
    Ok(())
}
