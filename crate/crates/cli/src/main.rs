//! Command-line front end: train / evaluate / sample / prune / stability.
//!
//! Any config key can be overridden with `HVAE_`-prefixed environment
//! variables, e.g. `HVAE_OPTIMIZER__BASE_LR=0.01`. Every error path exits
//! nonzero with a single-line `error: ...` reason on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hvae_core::checkpoint;
use hvae_core::config::load_run_config;
use hvae_core::data::stream_rng;
use hvae_core::image_io::{stack_batches, tile_grid, write_png};
use hvae_core::latent_analysis::{
    accumulate_kl_stats, make_mask, prune_sweep, write_reports_csv, MaskSelector,
};
use hvae_core::network::TemperatureSpec;
use hvae_core::optimizer::stability::{stability_experiment, write_rows_csv};
use hvae_core::training::{
    evaluate_indices, load_split, model_from_checkpoint, report_units, train, EvalOptions,
    RunConfig, RunStatus,
};

#[derive(Parser)]
#[command(
    name = "hvae",
    about = "Hierarchical VAE training and analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOverrides {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; checkpoints and metrics CSV land
    /// in the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint (config must match its echo).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Evaluate a checkpoint: train/valid ELBO decomposition, KL gap and
    /// optional SSIM.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate against a different config's dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Posterior samples per image.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Also report reconstruction SSIM.
        #[arg(long)]
        ssim: bool,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Draw unconditional samples into a PNG grid (one row per
    /// temperature).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images per temperature row.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Sampling temperatures, e.g. --temperature 0.8,0.85,0.9
        #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
        temperature: Vec<f64>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Sweep pruning fractions: KL stats, masks, report CSV and
    /// full-vs-pruned reconstruction grids.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Kept posteriors in percent, e.g. --sweep 2.5,3,4,5,7,100
        #[arg(long, value_delimiter = ',', default_values_t = [2.5, 3.0, 4.0, 5.0, 7.0, 100.0])]
        sweep: Vec<f64>,
        /// Posterior samples per image for the pruned evaluation.
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Paired stability runs: smoothing on/off across batch sizes and
    /// seeds, summarized as a CSV.
    Stability {
        #[arg(long)]
        config: PathBuf,
        /// Steps per arm (defaults to the config's total_steps).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize])]
        batch_sizes: Vec<usize>,
        /// Seeds, one paired run each, e.g. --seeds 1,2,3,4,5
        #[arg(long, value_delimiter = ',', default_values_t = [1u64])]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: CommonOverrides,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonOverrides) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
}

fn load_for_checkpoint(
    checkpoint_path: &Path,
    config_path: Option<&PathBuf>,
    common: &CommonOverrides,
) -> Result<(checkpoint::Checkpoint, RunConfig)> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let mut cfg = match config_path {
        Some(p) => load_run_config(p)?,
        None => ckpt.config.clone(),
    };
    apply_overrides(&mut cfg, common);
    cfg.validate()?;
    Ok((ckpt, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            common,
        } => {
            let mut cfg = load_run_config(&config)?;
            apply_overrides(&mut cfg, &common);
            cfg.validate()?;
            let out_dir = cfg.out_dir.clone();
            let outcome = train(&cfg, &out_dir, checkpoint.as_deref(), None)?;
            if let Some(last) = outcome.records.last() {
                println!(
                    "final step {}: nelbo {:.4} nats/dim ({:.4} bits/dim), {} skipped updates, {:.1}s, peak rss {} MiB",
                    last.step,
                    last.negative_elbo_nats_per_dim,
                    last.bits_per_dim,
                    outcome.skipped_count,
                    outcome.wall_seconds,
                    outcome.peak_rss_bytes / (1 << 20),
                );
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
            println!("metrics: {}", outcome.metrics_path.display());
            if let RunStatus::Diverged { at_step } = outcome.status {
                bail!("diverged: non-finite loss at step {at_step}");
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint: ckpt_path,
            config,
            samples,
            ssim,
            common,
        } => {
            let (ckpt, cfg) = load_for_checkpoint(&ckpt_path, config.as_ref(), &common)?;
            let model = model_from_checkpoint(&ckpt)?;
            let data = load_split(&cfg)?;
            let opts = EvalOptions {
                num_posterior_samples: samples,
                max_images: None,
                compute_ssim: ssim,
                seed: cfg.seed,
                batch_size: cfg.optimizer.batch_size,
            };
            let dims = cfg.model.image_dims();
            let train_rec = evaluate_indices(&model, &data.dataset, &data.split.train, &opts)?;
            let (tv, unit) = report_units(&train_rec, data.dataset.num_bits, dims);
            println!(
                "train: nelbo {:.4} {unit} (recon {:.4} + kl {:.4} nats/dim)",
                tv, train_rec.reconstruction_nats_per_dim, train_rec.total_kl_nats_per_dim
            );
            if let Some(s) = train_rec.ssim {
                println!("train: ssim {s:.4}");
            }
            if data.split.valid.is_empty() {
                println!("valid: (empty split)");
            } else {
                let valid_rec = evaluate_indices(&model, &data.dataset, &data.split.valid, &opts)?;
                let (vv, unit) = report_units(&valid_rec, data.dataset.num_bits, dims);
                println!(
                    "valid: nelbo {:.4} {unit} (recon {:.4} + kl {:.4} nats/dim)",
                    vv, valid_rec.reconstruction_nats_per_dim, valid_rec.total_kl_nats_per_dim
                );
                if let Some(s) = valid_rec.ssim {
                    println!("valid: ssim {s:.4}");
                }
                println!(
                    "kl_gap: {:.6} nats/dim",
                    hvae_core::objective::kl_gap(&train_rec, &valid_rec)
                );
            }
            Ok(())
        }
        Command::Sample {
            checkpoint: ckpt_path,
            count,
            temperature,
            common,
        } => {
            if count == 0 {
                bail!("--count must be at least 1");
            }
            let (ckpt, cfg) = load_for_checkpoint(&ckpt_path, None, &common)?;
            let model = model_from_checkpoint(&ckpt)?;
            let out_dir = cfg.out_dir.clone();
            let mut tiles = Vec::new();
            for (row, &t) in temperature.iter().enumerate() {
                let mut rng = stream_rng(cfg.seed, row as u64, hvae_core::data::STREAM_SAMPLE);
                let imgs = model.generate(count, &TemperatureSpec::Uniform(t), &mut rng)?;
                tiles.push(imgs);
            }
            let all = stack_batches(&tiles).context("stacking sample rows")?;
            let (w, h, c, data) = tile_grid(
                &all,
                cfg.model.output_head.num_bits(),
                temperature.len(),
                count,
            )?;
            let path = out_dir.join("samples.png");
            write_png(&path, w, h, c, &data)?;
            println!(
                "wrote {} ({w}x{h}, rows at temperatures {:?})",
                path.display(),
                temperature
            );
            Ok(())
        }
        Command::Prune {
            checkpoint: ckpt_path,
            config,
            sweep,
            samples,
            common,
        } => {
            let (ckpt, cfg) = load_for_checkpoint(&ckpt_path, config.as_ref(), &common)?;
            if ckpt.next_step == 0 {
                eprintln!("warning: pruning an untrained checkpoint; expect degenerate results");
            }
            let model = model_from_checkpoint(&ckpt)?;
            let data = load_split(&cfg)?;
            let out_dir = cfg.out_dir.clone();
            std::fs::create_dir_all(&out_dir)?;
            let eval_set = if data.split.valid.is_empty() {
                data.split.train.clone()
            } else {
                data.split.valid.clone()
            };
            let stats = accumulate_kl_stats(
                &model,
                &data.dataset,
                &data.split.train,
                cfg.optimizer.batch_size,
                cfg.seed,
            )?;
            stats.write_csv(&out_dir.join("kl_stats.csv"))?;
            let fractions: Vec<f64> = sweep.iter().map(|p| p / 100.0).collect();
            let opts = EvalOptions {
                num_posterior_samples: samples,
                max_images: Some(64),
                compute_ssim: false,
                seed: cfg.seed,
                batch_size: cfg.optimizer.batch_size,
            };
            let reports = prune_sweep(
                &model,
                &data.dataset,
                &eval_set,
                &stats,
                &fractions,
                data.dataset.count,
                &opts,
            )?;
            let csv_path = out_dir.join("pruning_reports.csv");
            write_reports_csv(&csv_path, &reports)?;
            for r in &reports {
                println!(
                    "kept {:>6.2}%: nelbo {:.4} bits/dim (recon {:.4}, kl {:.4}), encoded {} bytes",
                    100.0 * r.kept_fraction,
                    r.negative_elbo_bits_per_dim,
                    r.reconstruction_bits_per_dim,
                    r.kl_bits_per_dim,
                    r.encoded_size_bytes
                );
            }

            // side-by-side grids: row 0 targets, row 1 full recon, rows 2+
            // pruned recons per sweep point
            let n_show = eval_set.len().min(8);
            let x = data.dataset.batch(&eval_set[..n_show]);
            let mut rows = vec![x.clone()];
            let mut rng = stream_rng(cfg.seed, 0, 90);
            rows.push(model.reconstruct(&x, None, 0.0, &mut rng)?);
            for &q in &fractions {
                let mask = make_mask(&stats, MaskSelector::KeptFraction(q))?;
                let mut rng = stream_rng(cfg.seed, 0, 90);
                rows.push(model.reconstruct(&x, Some(&mask), 0.0, &mut rng)?);
            }
            let all = stack_batches(&rows).context("stacking reconstruction rows")?;
            let (w, h, c, png) = tile_grid(&all, data.dataset.num_bits, rows.len(), n_show)?;
            let grid_path = out_dir.join("reconstructions.png");
            write_png(&grid_path, w, h, c, &png)?;
            println!("wrote {} and {}", csv_path.display(), grid_path.display());
            Ok(())
        }
        Command::Stability {
            config,
            steps,
            batch_sizes,
            seeds,
            common,
        } => {
            let mut cfg = load_run_config(&config)?;
            apply_overrides(&mut cfg, &common);
            cfg.validate()?;
            let out_dir = cfg.out_dir.clone();
            let steps = steps.unwrap_or(cfg.optimizer.total_steps);
            let rows = stability_experiment(&cfg, steps, &batch_sizes, &seeds, &out_dir)?;
            let csv_path = out_dir.join("stability.csv");
            write_rows_csv(&csv_path, &rows)?;
            for r in &rows {
                println!(
                    "batch {:>3} smoothing {:>3} seed {:>3}: nll {}, skipped {}{}",
                    r.batch_size,
                    if r.smoothing { "on" } else { "off" },
                    r.seed,
                    if r.diverged {
                        "diverged".to_string()
                    } else {
                        format!("{:.4} bits/dim", r.nll_bits_per_dim)
                    },
                    r.skipped_updates,
                    if r.diverged { " (diverged)" } else { "" }
                );
            }
            println!("wrote {}", csv_path.display());
            Ok(())
        }
    }
}
