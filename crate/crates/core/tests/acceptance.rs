//! Acceptance suite: one test per release criterion, each printing a
//! `[criterion] PASS` line (visible with `--nocapture`) and enforcing the
//! stated tolerance. Full-scale published NLL figures are out of reach on a
//! desk machine; these property checks and directional reproductions are
//! the release gate instead (see `c01`).
//!
//! Run with `cargo test -p hvae-core --test acceptance`.

use std::cell::RefCell;
use std::path::PathBuf;

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvae_core::checkpoint;
use hvae_core::data::{BinarizeMode, Dataset, DatasetSpec, SourceSpec, SyntheticKind};
use hvae_core::distributions::{
    bernoulli_log_prob, gaussian_kl, mol_log_prob, BernoulliParams, MoLConfig, MoLParams,
    ScaleActivation, SmoothedGaussian,
};
use hvae_core::latent_analysis::{accumulate_kl_stats, evaluate_pruned, make_mask, MaskSelector};
use hvae_core::network::{plan, presets, Model, ModelConfig, OutputHeadConfig, TemperatureSpec};
use hvae_core::objective::hierarchical_elbo;
use hvae_core::optimizer::stability::stability_experiment;
use hvae_core::tensor::check::{max_rel_err, numeric_grad};
use hvae_core::tensor::{backward, Arr, Tape};
use hvae_core::training::{
    evaluate_masked, train, EvalOptions, OptimizerConfig, RunConfig, RunStatus,
};

const LN_2: f64 = std::f64::consts::LN_2;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hvae_accept_{}_{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn blobs_run_config() -> RunConfig {
    RunConfig {
        model: presets::toy_blobs(),
        data: DatasetSpec {
            source: SourceSpec::Synthetic {
                generator: SyntheticKind::GaussianBlobs,
                count: 512,
                seed: 7,
            },
            resolution: 8,
            channels: 1,
            num_bits: 8,
            train_fraction: 0.9,
            shuffle_seed: 11,
            binarize: BinarizeMode::Threshold,
        },
        optimizer: OptimizerConfig {
            algorithm: hvae_core::optimizer::Algorithm::Adamax,
            base_lr: 0.008,
            floor_lr: 0.0,
            total_steps: 2000,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            skip_threshold: 800.0,
        },
        seed: 1,
        eval_every: 0,
        checkpoint_every: 0,
        divergence_patience: 10,
        out_dir: PathBuf::from("unused"),
    }
}

fn pass(name: &str) {
    println!("[{name}] PASS");
}

/// Published full-scale NLL results are not reproducible at desk scale;
/// this suite substitutes property checks plus directional reproductions.
/// The substitution itself is checked here: the full-scale presets exist
/// (c09 verifies them structurally) and the desk model trains (c10).
#[test]
fn c01_desk_scale_substitution_in_place() {
    assert_eq!(presets::all_presets().len(), 8);
    assert!(blobs_run_config().validate().is_ok());
    // reference-conversion sanity for quoted benchmarks: 2.87 bits/dim in
    // nats/dim
    assert!((2.87 * LN_2 - 1.9893).abs() < 1e-3);
    pass("c01_desk_scale_substitution_in_place");
}

/// Mixture-of-logistics bin probabilities sum to 1 over every target value
/// for 5- and 8-bit grids, 100 random parameter draws, tolerance 1e-6.
#[test]
fn c02_likelihood_normalization() {
    let started = std::time::Instant::now();
    let tape = Tape::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_bits = if seed % 2 == 0 { 8 } else { 5 };
        let k = rng.gen_range(1..=3);
        let cfg = MoLConfig {
            num_bits,
            components: k,
            bounded: seed % 3 == 0,
            scale_floor: -7.0,
            beta_smoothing: LN_2,
            gradient_smoothing: seed % 5 != 0,
        };
        let shape4 = IxDyn(&[1, k, 1, 1]);
        let shape5 = IxDyn(&[1, k, 1, 1, 1]);
        let params = MoLParams::new(
            tape.constant(Arr::from_shape_fn(shape4, |_| rng.gen_range(-2.0..2.0))),
            tape.constant(Arr::from_shape_fn(shape5.clone(), |_| {
                rng.gen_range(-1.5..1.5)
            })),
            tape.constant(Arr::from_shape_fn(shape5, |_| rng.gen_range(-3.0..3.0))),
            None,
            cfg,
        )
        .unwrap();
        let levels = 1usize << num_bits;
        let mut total = 0.0;
        for v in 0..levels {
            let t = Arr::from_elem(IxDyn(&[1, 1, 1, 1]), v as f64);
            total += mol_log_prob(&params, &t).unwrap().value()[[0, 0, 0]].exp();
        }
        assert!(
            (total - 1.0).abs() < 1e-6,
            "seed {seed}: probabilities sum to {total}"
        );
    }
    assert!(started.elapsed().as_secs() < 60, "budget exceeded");
    pass("c02_likelihood_normalization");
}

/// Closed-form Gaussian KL against a 1e7-sample Monte-Carlo estimate on 20
/// random parameter pairs, within 1e-3.
#[test]
fn c03_kl_monte_carlo_oracle() {
    let started = std::time::Instant::now();
    let tape = Tape::new();
    // ranges keep the Monte-Carlo standard error near 2e-4 so the 1e-3
    // tolerance is several sigmas wide
    let mut param_rng = ChaCha8Rng::seed_from_u64(99);
    for pair in 0..20u64 {
        let mq = param_rng.gen_range(-1.0..1.0);
        let sq = param_rng.gen_range(0.85..1.18);
        let mp = mq + param_rng.gen_range(-0.25..0.25);
        let sp = param_rng.gen_range(0.85..1.18);
        let mut mc_rng = ChaCha8Rng::seed_from_u64(1_000 + pair);
        let n = 10_000_000usize;
        let mut acc = 0.0f64;
        for _ in 0..n {
            let e: f64 = mc_rng.sample(rand_distr::StandardNormal);
            let x = mq + sq * e;
            let lq = -((x - mq) / sq).powi(2) / 2.0 - sq.ln();
            let lp = -((x - mp) / sp).powi(2) / 2.0 - sp.ln();
            acc += lq - lp;
        }
        let mc = acc / n as f64;
        let q = SmoothedGaussian {
            mu: tape.constant(Arr::from_elem(IxDyn(&[1]), mq)),
            sigma: tape.constant(Arr::from_elem(IxDyn(&[1]), sq)),
        };
        let p = SmoothedGaussian {
            mu: tape.constant(Arr::from_elem(IxDyn(&[1]), mp)),
            sigma: tape.constant(Arr::from_elem(IxDyn(&[1]), sp)),
        };
        let closed = gaussian_kl(&q, &p).unwrap().value()[[0]];
        assert!(
            (closed - mc).abs() < 1e-3,
            "pair {pair}: closed-form {closed} vs monte-carlo {mc}"
        );
    }
    assert!(started.elapsed().as_secs() < 120, "budget exceeded");
    pass("c03_kl_monte_carlo_oracle");
}

fn tiny_elbo_config() -> ModelConfig {
    ModelConfig {
        resolutions: vec![2],
        layers_per_resolution: vec![1],
        widths_per_resolution: vec![6],
        latent_dim: 2,
        bottleneck_ratio: 0.5,
        beta_smoothing: LN_2,
        gradient_smoothing: true,
        output_head: OutputHeadConfig::Mol {
            num_bits: 8,
            components: 2,
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

/// Analytic gradients match central finite differences (step 1e-5, double
/// precision), max relative error below 1e-4: smoothed softplus, Gaussian
/// KL, MoL and Bernoulli log-likelihoods, and the full one-layer ELBO with
/// respect to every model parameter.
#[test]
fn c04_finite_difference_gradient_checks() {
    use hvae_core::tensor::check::scalar_fn_grad;
    let started = std::time::Instant::now();
    let step = 1e-5;
    let mut worst = 0.0f64;

    // smoothed softplus
    let y = Arr::from_shape_vec(IxDyn(&[5]), vec![-2.3, -0.4, 0.0, 0.9, 3.1]).unwrap();
    let err = scalar_fn_grad(
        &|ins: &[Arr]| {
            let tape = Tape::new();
            let x = tape.leaf(ins[0].clone());
            (vec![x.clone()], x.softplus_beta(LN_2).sum_all())
        },
        &[y],
        step,
    );
    worst = worst.max(err);

    // gaussian KL through both scale activations
    let raw =
        Arr::from_shape_vec(IxDyn(&[8]), vec![0.3, -1.1, 0.7, -0.2, 1.4, 0.1, -0.6, 0.5]).unwrap();
    let err = scalar_fn_grad(
        &|ins: &[Arr]| {
            let tape = Tape::new();
            let x = tape.leaf(ins[0].clone());
            let q = SmoothedGaussian::from_raw(
                &x.slice_axis(0, 0, 2),
                &x.slice_axis(0, 2, 2),
                ScaleActivation::SmoothedSoftplus { beta: LN_2 },
            )
            .unwrap();
            let p = SmoothedGaussian::from_raw(
                &x.slice_axis(0, 4, 2),
                &x.slice_axis(0, 6, 2),
                ScaleActivation::Exp,
            )
            .unwrap();
            (vec![x], gaussian_kl(&q, &p).unwrap().sum_all())
        },
        &[raw],
        step,
    );
    worst = worst.max(err);

    // RGB mixture-of-logistics log-likelihood
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 2;
    let mol_inputs: Vec<Arr> = [
        vec![1, k, 2, 2],
        vec![1, k, 3, 2, 2],
        vec![1, k, 3, 2, 2],
        vec![1, k, 3, 2, 2],
    ]
    .iter()
    .map(|s| Arr::from_shape_fn(IxDyn(s), |_| rng.gen_range(-0.7..0.7)))
    .collect();
    let targets = Arr::from_shape_fn(IxDyn(&[1, 3, 2, 2]), |_| rng.gen_range(0..256) as f64);
    let err = scalar_fn_grad(
        &move |ins: &[Arr]| {
            let tape = Tape::new();
            let leaves: Vec<_> = ins.iter().map(|a| tape.leaf(a.clone())).collect();
            let params = MoLParams::new(
                leaves[0].clone(),
                leaves[1].clone(),
                leaves[2].clone(),
                Some(leaves[3].clone()),
                MoLConfig {
                    num_bits: 8,
                    components: 2,
                    bounded: true,
                    scale_floor: -7.0,
                    beta_smoothing: LN_2,
                    gradient_smoothing: true,
                },
            )
            .unwrap();
            let lp = mol_log_prob(&params, &targets).unwrap();
            (leaves, lp.sum_all())
        },
        &mol_inputs,
        step,
    );
    worst = worst.max(err);

    // bernoulli log-likelihood
    let logits = Arr::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| rng.gen_range(-3.0..3.0));
    let bin_targets = Arr::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| f64::from(rng.gen::<bool>()));
    let err = scalar_fn_grad(
        &move |ins: &[Arr]| {
            let tape = Tape::new();
            let x = tape.leaf(ins[0].clone());
            let ll = bernoulli_log_prob(&BernoulliParams::new(x.clone()).unwrap(), &bin_targets)
                .unwrap();
            (vec![x], ll.sum_all())
        },
        &[logits],
        step,
    );
    worst = worst.max(err);

    // full one-layer ELBO with respect to every parameter, at a generic
    // point: zero-initialized biases would park whole activation chains
    // exactly on the rectifier kink, where central differences average the
    // two slopes
    let cfg = tiny_elbo_config();
    let model = RefCell::new(Model::build(&cfg, 31).unwrap());
    {
        let mut m = model.borrow_mut();
        let mut prng = ChaCha8Rng::seed_from_u64(113);
        for v in m.params_mut().values_mut() {
            for x in v.iter_mut() {
                *x += prng.gen_range(-0.05..0.05);
            }
        }
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(17);
    let x = Arr::from_shape_fn(IxDyn(&[1, 1, 2, 2]), |_| data_rng.gen_range(0..256) as f64);
    let param_values: Vec<Arr> = model.borrow().params().values().to_vec();
    let n_params: usize = param_values.iter().map(|p| p.len()).sum();
    let eval_loss = |ins: &[Arr]| -> f64 {
        let mut m = model.borrow_mut();
        for (i, v) in ins.iter().enumerate() {
            m.params_mut().values_mut()[i] = v.clone();
        }
        let ctx = m.pass(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, head) = m.infer(&ctx, &x, &mut rng).unwrap();
        let elbo = hierarchical_elbo(&cfg, &h, &head, &x, 8, 1.0).unwrap();
        elbo.loss.scalar_value()
    };
    // analytic gradients
    let analytic: Vec<Arr> = {
        let m = model.borrow();
        let ctx = m.pass(true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, head) = m.infer(&ctx, &x, &mut rng).unwrap();
        let elbo = hierarchical_elbo(&cfg, &h, &head, &x, 8, 1.0).unwrap();
        let grads = backward(&elbo.loss);
        ctx.param_tensors
            .iter()
            .zip(param_values.iter())
            .map(|(t, v)| {
                grads
                    .wrt(t)
                    .cloned()
                    .unwrap_or_else(|| Arr::zeros(IxDyn(v.shape())))
            })
            .collect()
    };
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_grad(&eval_loss, &param_values, i, step);
        worst = worst.max(max_rel_err(a, &numeric));
    }
    assert!(
        worst < 1e-4,
        "max relative gradient error {worst} over {n_params}+ coordinates"
    );
    assert!(started.elapsed().as_secs() < 300, "budget exceeded");
    pass("c04_finite_difference_gradient_checks");
}

/// Paired stability runs on 8x8 blobs, batch 4, 2000 steps, 5 seeds:
/// smoothed skip count is at most the unsmoothed count in at least 4 of 5
/// pairs, and no smoothed run diverges.
#[test]
fn c05_smoothing_stability_direction() {
    let started = std::time::Instant::now();
    let dir = tmp_dir("stability");
    let mut base = blobs_run_config();
    base.optimizer.batch_size = 4;
    let seeds = [1u64, 2, 3, 4, 5];
    let rows = stability_experiment(&base, 2000, &[4], &seeds, &dir).unwrap();
    assert_eq!(rows.len(), 10);
    let mut favorable = 0;
    for seed in seeds {
        let off = rows
            .iter()
            .find(|r| r.seed == seed && !r.smoothing)
            .unwrap();
        let on = rows.iter().find(|r| r.seed == seed && r.smoothing).unwrap();
        assert!(!on.diverged, "smoothed run diverged at seed {seed}");
        if on.skipped_updates <= off.skipped_updates {
            favorable += 1;
        }
        println!(
            "  seed {seed}: skips on={} off={} nll on={:.3} off={:.3}",
            on.skipped_updates, off.skipped_updates, on.nll_bits_per_dim, off.nll_bits_per_dim
        );
    }
    assert!(
        favorable >= 4,
        "smoothing favored in only {favorable}/5 pairs"
    );
    assert!(started.elapsed().as_secs() < 1800, "budget exceeded");
    std::fs::remove_dir_all(&dir).ok();
    pass("c05_smoothing_stability_direction");
}

/// Negative ELBO equals reconstruction plus the per-resolution KL sum to
/// 1e-9 at every step of a 500-step run.
#[test]
fn c06_elbo_decomposition_identity() {
    let dir = tmp_dir("decomp");
    let mut cfg = blobs_run_config();
    cfg.optimizer.total_steps = 500;
    let out = train(&cfg, &dir, None, None).unwrap();
    assert_eq!(out.records.len(), 500);
    for r in &out.records {
        let sum: f64 = r.kl_per_resolution_nats_per_dim.iter().sum();
        assert!(
            (r.negative_elbo_nats_per_dim - (r.reconstruction_nats_per_dim + sum)).abs() < 1e-9,
            "step {}",
            r.step
        );
        assert!(r.kl_per_resolution_nats_per_dim.iter().all(|&k| k >= 0.0));
    }
    std::fs::remove_dir_all(&dir).ok();
    pass("c06_elbo_decomposition_identity");
}

/// Adamax per-coordinate updates stay within 1.0001 * lr_t / (1 - beta1^t)
/// at every step of a 2000-step training run.
#[test]
fn c07_adamax_bounded_updates() {
    use hvae_core::data::{batch_indices, mix_seed, split_indices, STREAM_NOISE};
    use hvae_core::optimizer::{cosine_lr, OptimizerState, SkipGuard};

    let cfg = blobs_run_config();
    let dataset = Dataset::load(&cfg.data).unwrap();
    let split = split_indices(
        dataset.count,
        cfg.data.train_fraction,
        cfg.data.shuffle_seed,
    );
    let mut model = Model::build(&cfg.model, cfg.seed).unwrap();
    let mut opt = OptimizerState::new(
        hvae_core::optimizer::Algorithm::Adamax,
        model.params(),
        0.9,
        0.999,
        1e-8,
    )
    .unwrap();
    let mut guard = SkipGuard::new(cfg.optimizer.skip_threshold).unwrap();
    for step in 0..2000u64 {
        let lr = cosine_lr(step, cfg.optimizer.base_lr, 2000, 0.0);
        let idx = batch_indices(&split.train, 4, step, cfg.data.shuffle_seed);
        let x = dataset.batch(&idx);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step, u64::from(STREAM_NOISE)));
        let ctx = model.pass(true);
        let (h, head) = model.infer(&ctx, &x, &mut rng).unwrap();
        let elbo = hierarchical_elbo(&cfg.model, &h, &head, &x, 8, 1.0).unwrap();
        let grads = backward(&elbo.loss);
        let norm = grads.global_norm(&ctx.param_tensors);
        let before: Vec<Arr> = model.params().values().to_vec();
        let t_before = opt.step_count();
        let (outcome, res) = guard.guarded_apply(norm, || {
            let gv: Vec<Option<Arr>> = ctx
                .param_tensors
                .iter()
                .map(|t| grads.wrt(t).cloned())
                .collect();
            opt.step(model.params_mut(), &gv, lr)
        });
        if let Some(r) = res {
            r.unwrap();
        }
        if outcome == hvae_core::optimizer::StepOutcome::Applied {
            let t = t_before + 1;
            let bound = 1.0001 * lr / (1.0 - 0.9f64.powi(t as i32));
            for (after, before) in model.params().values().iter().zip(before.iter()) {
                for (a, b) in after.iter().zip(before.iter()) {
                    assert!(
                        (a - b).abs() <= bound,
                        "step {step}: |delta| {} > {bound}",
                        (a - b).abs()
                    );
                }
            }
        }
    }
    pass("c07_adamax_bounded_updates");
}

/// Train the toy model to convergence, sweep kept fractions
/// {2.5, 3, 4, 5, 7, 100}%: reconstruction loss is nonincreasing in the
/// kept fraction within single-posterior-sample noise (10-sample
/// averaging), and the encoded-size ratio equals the kept fraction within
/// rounding.
#[test]
fn c08_pruning_reproduction() {
    let started = std::time::Instant::now();
    let dir = tmp_dir("prune");
    let cfg = blobs_run_config();
    let out = train(&cfg, &dir, None, None).unwrap();
    assert_eq!(out.status, RunStatus::Completed);
    let ckpt = checkpoint::load(&out.final_checkpoint).unwrap();
    let model = hvae_core::training::model_from_checkpoint(&ckpt).unwrap();
    let data = hvae_core::training::load_split(&cfg).unwrap();
    let eval_set: Vec<usize> = data.split.valid[..32.min(data.split.valid.len())].to_vec();

    let stats = accumulate_kl_stats(&model, &data.dataset, &data.split.train, 8, cfg.seed).unwrap();
    let fractions = [0.025, 0.03, 0.04, 0.05, 0.07, 1.0];
    let total = stats.total_dims();

    // per fraction: mean and single-sample std over 10 posterior samples
    let mut recon_mean = Vec::new();
    let mut recon_sd = Vec::new();
    for (fi, &q) in fractions.iter().enumerate() {
        let mask = make_mask(&stats, MaskSelector::KeptFraction(q)).unwrap();
        let mut vals = Vec::with_capacity(10);
        for s in 0..10u64 {
            let opts = EvalOptions {
                num_posterior_samples: 1,
                max_images: None,
                compute_ssim: false,
                seed: 4_000 + 100 * fi as u64 + s,
                batch_size: 8,
            };
            let rec =
                evaluate_masked(&model, &data.dataset, &eval_set, Some(&mask), &opts).unwrap();
            vals.push(rec.reconstruction_nats_per_dim / LN_2);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        recon_mean.push(mean);
        recon_sd.push(var.sqrt());

        // encoded-size ratio equals the kept fraction within rounding
        let report = evaluate_pruned(
            &model,
            &data.dataset,
            &eval_set[..4],
            &mask,
            data.dataset.count,
            &EvalOptions {
                num_posterior_samples: 1,
                max_images: None,
                compute_ssim: false,
                seed: 1,
                batch_size: 4,
            },
        )
        .unwrap();
        let full_size = (total * data.dataset.count) as f64
            * hvae_core::latent_analysis::BYTES_PER_LATENT_VALUE as f64;
        let ratio = report.encoded_size_bytes as f64 / full_size;
        assert!(
            (ratio - q).abs() <= 0.5 / total as f64 + 1e-12,
            "encoded ratio {ratio} vs fraction {q}"
        );
    }
    for i in 0..fractions.len() - 1 {
        let tol = recon_sd[i].max(recon_sd[i + 1]);
        assert!(
            recon_mean[i + 1] <= recon_mean[i] + tol,
            "reconstruction rose from {:.4} to {:.4} (tol {:.4}) between kept {} and {}",
            recon_mean[i],
            recon_mean[i + 1],
            tol,
            fractions[i],
            fractions[i + 1]
        );
    }
    println!(
        "  recon bits/dim over sweep: {:?}",
        recon_mean
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    assert!(started.elapsed().as_secs() < 3600, "budget exceeded");
    std::fs::remove_dir_all(&dir).ok();
    pass("c08_pruning_reproduction");
}

/// Every published layer-distribution preset builds and its stochastic
/// layer counts per resolution match the table exactly; an infer+generate
/// round trip runs on each preset's layer structure.
#[test]
fn c09_architecture_presets() {
    let expected: &[(&str, &[usize], usize)] = &[
        ("cifar10_c1", &[3, 4, 7, 11, 22], 47),
        ("cifar10_c2", &[3, 4, 7, 11, 22], 47),
        ("imagenet32_c1", &[6, 7, 19, 25, 16], 73),
        ("imagenet32_c2", &[6, 7, 19, 25, 16], 73),
        ("imagenet64_c1", &[6, 7, 19, 25, 16, 11], 84),
        ("imagenet64_c2", &[6, 7, 19, 25, 16, 11], 84),
        ("ffhq256_c1", &[2, 4, 5, 10, 22, 14, 8, 1], 66),
        ("ffhq256_c2", &[2, 4, 5, 10, 22, 14, 8, 1], 66),
    ];
    for ((name, cfg), (ename, layers, total)) in presets::all_presets().iter().zip(expected) {
        assert_eq!(name, ename);
        let p = plan(cfg).unwrap();
        assert_eq!(&p.layers_per_resolution, layers, "{name}");
        assert_eq!(p.total_layers, *total, "{name}");
    }

    // full-width build of the incremental-width preset
    let c1 = Model::build(&presets::cifar10_c1(), 0).unwrap();
    assert_eq!(
        c1.count_parameters(),
        plan(&presets::cifar10_c1()).unwrap().parameter_count
    );
    assert_eq!(c1.config().total_layers(), 47);
    drop(c1);

    // desk-width round trip for every preset's layer distribution
    for (name, cfg) in presets::all_presets() {
        let mut desk = cfg.clone();
        for w in &mut desk.widths_per_resolution {
            *w = (*w / 32).max(8);
        }
        desk.latent_dim = 2;
        if let OutputHeadConfig::Mol { components, .. } = &mut desk.output_head {
            *components = 2;
        }
        let model = Model::build(&desk, 1).unwrap();
        let r = desk.input_resolution();
        let max = ((1u32 << desk.output_head.num_bits()) - 1) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Arr::from_shape_fn(IxDyn(&[1, 3, r, r]), |_| (rng.gen::<f64>() * max).floor());
        let ctx = model.pass(false);
        let (h, _) = model.infer(&ctx, &x, &mut rng).unwrap();
        assert_eq!(h.len(), cfg.total_layers(), "{name}");
        let imgs = model
            .generate(1, &TemperatureSpec::Uniform(0.85), &mut rng)
            .unwrap();
        assert!(imgs.iter().all(|&v| (0.0..=max).contains(&v)), "{name}");
        println!("  {name}: round trip at {r}x{r} ok");
    }
    pass("c09_architecture_presets");
}

/// 2000 training steps on blobs cut the negative ELBO by at least 30% from
/// initialization, and checkpoint resume is bitwise identical to an
/// uninterrupted run.
#[test]
fn c10_training_loop_end_to_end() {
    let dir_full = tmp_dir("e2e_full");
    let dir_half = tmp_dir("e2e_half");
    let dir_resume = tmp_dir("e2e_resume");
    let mut cfg = blobs_run_config();
    cfg.checkpoint_every = 1000;

    let full = train(&cfg, &dir_full, None, None).unwrap();
    assert_eq!(full.status, RunStatus::Completed);
    let initial = full.records[0].negative_elbo_nats_per_dim;
    let final_mean = full.records[full.records.len() - 10..]
        .iter()
        .map(|r| r.negative_elbo_nats_per_dim)
        .sum::<f64>()
        / 10.0;
    let reduction = 1.0 - final_mean / initial;
    println!(
        "  nelbo {initial:.4} -> {final_mean:.4} nats/dim ({:.1}% reduction)",
        100.0 * reduction
    );
    assert!(
        reduction >= 0.30,
        "negative ELBO fell only {:.1}%",
        100.0 * reduction
    );

    train(&cfg, &dir_half, None, Some(1000)).unwrap();
    let mid = dir_half.join("checkpoint_step001000.ckpt");
    let resumed = train(&cfg, &dir_resume, Some(&mid), None).unwrap();
    let a = std::fs::read(&full.final_checkpoint).unwrap();
    let b = std::fs::read(&resumed.final_checkpoint).unwrap();
    assert_eq!(a, b, "resume is not bitwise identical");
    for d in [dir_full, dir_half, dir_resume] {
        std::fs::remove_dir_all(&d).ok();
    }
    pass("c10_training_loop_end_to_end");
}

/// The 5-bit pipeline runs end to end (quantize, train a tiny model,
/// sample) and dequantized 5-bit targets show at most 32 distinct display
/// levels per channel.
#[test]
fn c11_five_bit_pipeline() {
    let dir = tmp_dir("fivebit");
    let mut cfg = blobs_run_config();
    cfg.data.num_bits = 5;
    cfg.data.source = SourceSpec::Synthetic {
        generator: SyntheticKind::GradientRamps,
        count: 128,
        seed: 9,
    };
    cfg.model.output_head = OutputHeadConfig::Mol {
        num_bits: 5,
        components: 4,
        bounded: true,
        scale_floor: -7.0,
        beta_smoothing: LN_2,
    };
    cfg.optimizer.total_steps = 300;
    let out = train(&cfg, &dir, None, None).unwrap();
    assert_eq!(out.status, RunStatus::Completed);

    let ckpt = checkpoint::load(&out.final_checkpoint).unwrap();
    let model = hvae_core::training::model_from_checkpoint(&ckpt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs = model
        .generate(4, &TemperatureSpec::Uniform(0.9), &mut rng)
        .unwrap();
    assert!(imgs.iter().all(|&v| (0.0..=31.0).contains(&v)));

    // banding: dequantized 5-bit targets land on at most 32 display levels
    let data = Dataset::load(&cfg.data).unwrap();
    let mut levels = std::collections::BTreeSet::new();
    for &l in data.raw_levels() {
        levels.insert(hvae_core::data::dequantize_for_display(l, 5));
    }
    assert!(levels.len() <= 32, "{} display levels", levels.len());
    std::fs::remove_dir_all(&dir).ok();
    pass("c11_five_bit_pipeline");
}
